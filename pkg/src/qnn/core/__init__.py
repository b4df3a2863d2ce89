from . import functional
from .functional import conv2d, exact_accumulation, im2col
from .layers import Network
from .optim import SGD, sgd_step
from .spec import LayerSpec, ModelSpec, build_template
from .tensor import Tensor, backward, no_grad

__all__ = [
    "functional", "conv2d", "exact_accumulation", "im2col", "Network", "SGD", "sgd_step",
    "LayerSpec", "ModelSpec", "build_template", "Tensor", "backward", "no_grad",
]
