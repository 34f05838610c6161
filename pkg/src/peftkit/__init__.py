"""Low-rank adapters, block quantization and summarization metrics."""

from ._backend import backend_name
from .adalora import AdaLoraAdapter, BudgetSchedule, init_adalora
from .lora import LoraAdapter, attach_adapters, init_lora, param_ratio
from .quantize import Codec, QuantizedTensor
from .trainer import RunConfig, train

__version__ = "0.1.0"

__all__ = [
    "AdaLoraAdapter",
    "BudgetSchedule",
    "Codec",
    "LoraAdapter",
    "QuantizedTensor",
    "RunConfig",
    "attach_adapters",
    "backend_name",
    "init_adalora",
    "init_lora",
    "param_ratio",
    "train",
]
