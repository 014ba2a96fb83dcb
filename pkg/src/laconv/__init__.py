"""Language-guided dynamic convolution networks on a numpy autodiff core."""
from .kernels import BACKEND
from .layer import LaConv, LaConvBlock
from .net import LaConvNet, NetConfig, StageConfig, build
from .tensor import Tape, Tensor

__all__ = ["BACKEND", "LaConv", "LaConvBlock", "LaConvNet", "NetConfig", "StageConfig", "Tape", "Tensor", "build"]
__version__ = "0.1.0"
