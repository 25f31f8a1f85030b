"""Multi-band mutual-distillation Transformer for EEG seizure-type classification."""

__version__ = "0.1.0"
