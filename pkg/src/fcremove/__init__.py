"""Few-step object removal with region-aware distillation and foreground token caching."""

__version__ = "0.1.0"
