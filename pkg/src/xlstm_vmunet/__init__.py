"""xLSTM-VMUNet binary segmentation on a from-scratch autodiff substrate."""

from .errors import ConfigurationError, ContractError, DataError, NumericalAbort, XVMUError
from .network import ModelConfig, forward, init_weights
from .training import TrainConfig, train

__all__ = [
    "ConfigurationError", "ContractError", "DataError", "NumericalAbort", "XVMUError",
    "ModelConfig", "TrainConfig", "forward", "init_weights", "train",
]
__version__ = "0.1.0"
