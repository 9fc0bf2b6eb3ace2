"""Context-encoding skull stripping on a from-scratch autodiff core."""

__version__ = "0.1.0"
