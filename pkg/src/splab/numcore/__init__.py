from . import tensor as ops
from .checkpoint import load_params, save_params
from .gradcheck import GradCheckReport, grad_check
from .nn import MLP, CrossAttention, LayerNorm, Linear, Module, Parameter, attend
from .optim import AdamW, OptimizerState, adamw_step, warmup_lr
from .tensor import Tensor, no_grad

__all__ = [
    "AdamW",
    "CrossAttention",
    "GradCheckReport",
    "LayerNorm",
    "Linear",
    "MLP",
    "Module",
    "OptimizerState",
    "Parameter",
    "Tensor",
    "adamw_step",
    "attend",
    "grad_check",
    "load_params",
    "no_grad",
    "ops",
    "save_params",
    "warmup_lr",
]
