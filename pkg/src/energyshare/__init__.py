"""Peer-to-peer energy-services platform over emulated devices.

Devices in a confined area share battery energy one-to-one: a consumer
requests an amount of charge (mAh) or a charging period (seconds), the
platform routes the request to the closest available provider, the pair
runs a monitored charging session, and the collected telemetry is
uploaded to an edge store for later analysis.

The radio link and the charging hardware are emulated: message delivery
goes through a pluggable transport (deterministic in-process simulation
or TCP loopback) and the charging physics is a parametric battery model.
"""

__version__ = "0.1.0"
