"""Detector-filtered PBFT for IoT blockchains: fusion, low-rank outlier
detection, ledger, two-step consensus and a deterministic network simulator."""

__version__ = "0.1.0"
