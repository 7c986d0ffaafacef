"""Logic-layer anomaly detection for water-treatment process logs.

The pipeline derives labels from cause-and-effect process rules, reduces the
tag set to a compact feature subset, and trains a small LSTM chunk by chunk so
that memory stays bounded.
"""

__version__ = "0.1.0"
