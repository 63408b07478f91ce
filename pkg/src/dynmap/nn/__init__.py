"""Small numpy neural-network kernel with tape-based reverse mode."""
from . import functional
from .checkpoint import CheckpointError, load_parameters, load_tensors, save_parameters, save_tensors
from .gradcheck import GradCheckError, GradCheckReport, grad_check
from .init import conv_params, deconv_params, dense_params, kaiming_uniform, lstm_params
from .optim import AdamState, adam_step
from .tape import NonFiniteError, Parameter, Tape, Tensor, as_tensor

__all__ = [
    "functional", "Tape", "Tensor", "Parameter", "as_tensor", "NonFiniteError",
    "AdamState", "adam_step", "grad_check", "GradCheckReport", "GradCheckError",
    "save_tensors", "load_tensors", "save_parameters", "load_parameters", "CheckpointError",
    "dense_params", "conv_params", "deconv_params", "lstm_params", "kaiming_uniform",
]
