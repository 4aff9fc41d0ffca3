from .adapter import (
    UNIVERSAL,
    AdapterSet,
    ManifestEntry,
    TaskVector,
    adapter_manifest,
    flatten_adapter,
    unflatten,
)
from .backbone import Backbone, BackboneConfig
from .classifier import Classifier, logits
from .state import ModelState
from .statistics import VARIANCE_FLOOR, ClassStatistics

__all__ = [
    "UNIVERSAL",
    "VARIANCE_FLOOR",
    "AdapterSet",
    "Backbone",
    "BackboneConfig",
    "ClassStatistics",
    "Classifier",
    "ManifestEntry",
    "ModelState",
    "TaskVector",
    "adapter_manifest",
    "flatten_adapter",
    "logits",
    "unflatten",
]
