"""Multi-stage vision transformers with residual spatial reduction and
weight-sharing architecture search."""

__version__ = "0.1.0"
