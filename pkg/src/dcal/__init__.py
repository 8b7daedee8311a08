"""Dual cross-attention learning (self-attention + GLCA + PWCA) on a small numpy autodiff core."""

from .model import DcalConfig, DcalModel, DcalParams, forward_infer, forward_train, init_params

__version__ = "0.1.0"

__all__ = ["DcalConfig", "DcalModel", "DcalParams", "forward_infer", "forward_train", "init_params"]
