"""Patient-conditioned hyper-adapters: a hypernetwork turns patient attributes
into low-rank, per-sample weight offsets for a frozen classification backbone."""

from .adapters import AdapterConfig, build_registry, count_parameters, generate_offsets
from .attributes import MISSING, AttributeSchema, AttributeSpec
from .backbone import BackboneSpec, build_backbone, forward_adapted
from .data import SyntheticConfig, generate, split
from .training import TrainConfig

__all__ = [
    "MISSING", "AdapterConfig", "AttributeSchema", "AttributeSpec", "BackboneSpec", "SyntheticConfig",
    "TrainConfig", "build_backbone", "build_registry", "count_parameters", "forward_adapted", "generate",
    "generate_offsets", "split",
]
