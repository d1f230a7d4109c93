"""Aggregator-side regulation: dispatch, MPC and the broadcast loop.

Nothing in this package reads per-EV state; the loop talks to the fleet through ``FleetPort``.
"""
