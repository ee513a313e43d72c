"""Bridge from image files to TKFM feature maps via a CNN backbone."""

from .export import ExportSpec, TorchBackbone, export_features, scaled_size, write_tkfm

__version__ = "0.1.0"
