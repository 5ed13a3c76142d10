"""Multi-task low-rank adaptation for hierarchical vision transformers, in numpy."""

from .backbone import Backbone, BackboneConfig
from .errors import (
    ConfigurationError,
    DimensionError,
    DomainError,
    FormatError,
    MTLoRAError,
    NonFiniteLossError,
    UsageError,
)
from .heads import TaskSpec, default_tasks
from .lora import LoRAAdapter, MTLoRALinear, merge_adapter
from .model import FreezePolicy, MTLModel, build_model
from .tensor import Parameter, Tensor, backward, no_grad

__version__ = "0.1.0"
