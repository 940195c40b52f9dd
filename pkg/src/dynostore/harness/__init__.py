"""Desk-scale experiment harness.

Everything here runs in one process against real components: real erasure
coding, real placement, real consensus; only the transports are loopback
shims with kill switches instead of sockets. A shared manual clock makes
time-dependent behavior (retention, token expiry, probe staleness)
reproducible run to run.
"""
