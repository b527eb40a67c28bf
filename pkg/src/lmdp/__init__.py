"""Layer-wise reweighted DP-SGD with IR-level membership risk estimation."""

__version__ = "0.1.0"
