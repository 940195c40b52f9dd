import random

import pytest

from dynostore.harness.cluster import LocalCluster


@pytest.fixture
def rng():
    return random.Random(0xD15C)


@pytest.fixture
def cluster():
    """Small in-process cluster; stopped even when the test blows up."""
    made = []

    def factory(containers=4, **kw):
        c = LocalCluster(n_containers=containers, **kw)
        made.append(c)
        return c

    yield factory
    for c in made:
        c.stop()
