"""dynaeval: online test-time adaptation of autoregressive transformers at desk scale."""

__version__ = "0.1.0"
