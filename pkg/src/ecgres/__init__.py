"""Spiking-reservoir ECG anomaly detection: WFDB ingest through segment-level evaluation."""

__version__ = "0.1.0"
