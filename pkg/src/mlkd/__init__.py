"""Multi-label knowledge distillation on a synthetic glyph-grid task, built on a small numpy autodiff core."""

__version__ = "0.1.0"
