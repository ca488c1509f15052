"""Fisher-gated PEFT toolbox on a toy vision transformer."""
from .backbone import Backbone, BackboneConfig, ConfigError, Head, encode
from .config import Mode, TrainConfig, load_config
from .estimator import GateSegmenter
from .fisher import (
    FisherAccumulator,
    FisherGate,
    GateConfig,
    ImportanceTable,
    accumulate_fisher,
    aggregate_module_scores,
    kl_categorical,
    normalize_scores,
    select_top_k,
)
from .synth import DatasetConfig, DomainSpec, make_benchmark, toy_casid
from .toolbox import ModuleId, ModuleKind, Toolbox, ToolboxDims, attach_toolbox
from .trainer import Trainer

__version__ = "0.1.0"

__all__ = [
    "Backbone", "BackboneConfig", "ConfigError", "Head", "encode",
    "Mode", "TrainConfig", "load_config", "GateSegmenter",
    "FisherAccumulator", "FisherGate", "GateConfig", "ImportanceTable",
    "accumulate_fisher", "aggregate_module_scores", "kl_categorical",
    "normalize_scores", "select_top_k",
    "DatasetConfig", "DomainSpec", "make_benchmark", "toy_casid",
    "ModuleId", "ModuleKind", "Toolbox", "ToolboxDims", "attach_toolbox",
    "Trainer",
]
