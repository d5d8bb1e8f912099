"""Split cloud/edge parameter-efficient fine-tuning with a Kill and Revive
module scheduler, built on a small numpy decoder-only transformer."""

from .config import RunConfig
from .costs import CostLedger
from .model import Backbone, ModelConfig
from .runtime import ReferenceTrainer, run_finetune
from .scheduler import KRState, Mode, select_active

__version__ = "0.1.0"

__all__ = [
    "Backbone",
    "CostLedger",
    "KRState",
    "Mode",
    "ModelConfig",
    "ReferenceTrainer",
    "RunConfig",
    "run_finetune",
    "select_active",
]
