from .tensor import (
    Parameter,
    StaleGraphError,
    Tensor,
    concat,
    constant,
    conv2d,
    cross_entropy,
    cumsum,
    depthwise_conv1d,
    exp,
    log,
    matmul,
    maximum,
    minimum,
    mul,
    add,
    clip,
    no_grad,
    overlap_add,
    pad1d,
    pad2d,
    pad_edge1d,
    power,
    relu,
    reshape,
    sigmoid,
    sqrt,
    square,
    tanh,
    tmean,
    transpose,
    tsum,
    unfold_frames,
)
from .layers import (
    BatchNorm,
    Conv1d,
    Conv2d,
    CumulativeLayerNorm,
    DepthwiseConv1d,
    Module,
    ModuleList,
    PReLU,
)
from .optim import Adam
from .checkpoint import load_archive, save_archive

__all__ = [name for name in dir() if not name.startswith("_")]
