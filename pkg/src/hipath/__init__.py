"""Structured pathology-report prediction: hierarchical aggregation, OT-aligned contrastive training, slot decoding."""

__version__ = "0.1.0"
