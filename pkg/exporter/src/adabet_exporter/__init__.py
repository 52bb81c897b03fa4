"""Bridge from torch models to adabet activation-dump directories."""

__version__ = "0.1.0"

from .export import ExportError, ExportPlan, export

__all__ = ["ExportError", "ExportPlan", "export", "__version__"]
