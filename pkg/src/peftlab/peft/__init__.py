from .adapters import (
    AdaLoRAAdapter,
    AdaptedModel,
    Adapter,
    BitFitAdapter,
    FullFTAdapter,
    GLoRAAdapter,
    IA3Adapter,
    LoRAAdapter,
    S2LoRAAdapter,
    UnsupportedMergeError,
    WiringError,
    attach,
    delta_adalora,
    delta_alpha_lora,
    delta_lora,
    delta_s2lora,
    merge,
)
from .counting import BITFIT_ASSUMPTIONS, TrainableCount, count_trainable
from .spec import METHODS, AdapterSpec, AdapterSpecError

__all__ = [
    "AdaLoRAAdapter",
    "AdaptedModel",
    "Adapter",
    "AdapterSpec",
    "AdapterSpecError",
    "BITFIT_ASSUMPTIONS",
    "BitFitAdapter",
    "FullFTAdapter",
    "GLoRAAdapter",
    "IA3Adapter",
    "LoRAAdapter",
    "METHODS",
    "S2LoRAAdapter",
    "TrainableCount",
    "UnsupportedMergeError",
    "WiringError",
    "attach",
    "count_trainable",
    "delta_adalora",
    "delta_alpha_lora",
    "delta_lora",
    "delta_s2lora",
    "merge",
]
