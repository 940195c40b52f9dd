"""DynoStore: a wide-area object store over federated storage containers.

Objects live behind a single hierarchical namespace; payloads are dispersed
across independently owned storage containers with Reed-Solomon coding, and
object metadata is kept consistent across replicas with a timestamp-ordered
majority protocol.
"""

__version__ = "0.1.0"
