"""Quality-classified image analysis.

Degrade images into quality classes, predict an image's quality class with a
small CNN, and route it to the analyzers trained for the most likely classes.
"""

__version__ = "0.1.0"

from .degrade import BJ, BL, G, QualityClass, QualityTaxonomy, degrade, enumerate_classes  # noqa: E402
from .imageio import Raster, load_image, save_image  # noqa: E402
from .qualitynet import FusedQualityVector, QualityPredictor, classify_quality, fuse_quality  # noqa: E402
from .routing import Detection, RoutingConfig, analyze, nms, select_top_k  # noqa: E402

__all__ = [
    "BJ", "BL", "G", "QualityClass", "QualityTaxonomy", "degrade", "enumerate_classes",
    "Raster", "load_image", "save_image",
    "FusedQualityVector", "QualityPredictor", "classify_quality", "fuse_quality",
    "Detection", "RoutingConfig", "analyze", "nms", "select_top_k",
]
