"""Layer modules built on the tape engine.

Shapes follow the rest of the toolkit: 2-D feature maps are (panels,
height, frames) without a batch axis, 1-D sequences are (channels,
frames). Parameters are registered by attribute assignment and show up
in state_dict() / named_parameters() with dotted names.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, key, array: np.ndarray):
        self._buffers[key] = array
        object.__setattr__(self, key, array)

    def _set_buffer(self, key, array: np.ndarray):
        # keep dict and attribute in sync when a buffer is replaced
        self.register_buffer(key, array)

    def named_parameters(self, prefix=""):
        for k, p in self._params.items():
            yield (prefix + k, p)
        for k, m in self._modules.items():
            yield from m.named_parameters(prefix + k + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def named_buffers(self, prefix=""):
        for k, b in self._buffers.items():
            yield (prefix + k, b)
        for k, m in self._modules.items():
            yield from m.named_buffers(prefix + k + ".")

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def freeze(self):
        """Mark every parameter non-trainable (gradients still flow through)."""
        for p in self.parameters():
            p.trainable = False
        return self

    def state_dict(self):
        out = {name: p.data for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            out[name] = b
        return out

    def load_state_dict(self, state: dict, strict=True):
        own_params = dict(self.named_parameters())
        own_buffers = dict(self.named_buffers())
        missing = (set(own_params) | set(own_buffers)) - set(state)
        extra = set(state) - (set(own_params) | set(own_buffers))
        if strict and (missing or extra):
            raise ValueError(f"state dict mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in state.items():
            if name in own_params:
                p = own_params[name]
                if p.data.shape != arr.shape:
                    raise ValueError(f"shape mismatch for {name}: {p.data.shape} vs {arr.shape}")
                p.data = arr.astype(p.data.dtype, copy=True)
            elif name in own_buffers:
                self._assign_buffer(name, arr)

    def _assign_buffer(self, dotted: str, arr: np.ndarray):
        parts = dotted.split(".")
        mod = self
        for part in parts[:-1]:
            mod = mod._modules[part]
        key = parts[-1]
        mod._set_buffer(key, arr.astype(mod._buffers[key].dtype, copy=True))

    def astype(self, dtype):
        """Convert parameters and buffers in place (used for 64-bit checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for name, _ in list(self.named_buffers()):
            parts = name.split(".")
            mod = self
            for part in parts[:-1]:
                mod = mod._modules[part]
            mod._set_buffer(parts[-1], mod._buffers[parts[-1]].astype(dtype))
        return self


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module):
        self._modules[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    """(C,H,W) -> (O,H',W') cross-correlation; pad = ((top,bot),(left,right))."""

    def __init__(self, in_channels, out_channels, kernel, stride=(1, 1), dilation=(1, 1),
                 pad=((0, 0), (0, 0)), bias=True, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng()
        kh, kw = kernel
        fan_in = in_channels * kh * kw
        self.weight = Parameter(
            _kaiming_uniform(rng, (out_channels, in_channels, kh, kw), fan_in, dtype)
        )
        self.bias = Parameter(_kaiming_uniform(rng, (out_channels,), fan_in, dtype)) if bias else None
        self.stride = tuple(stride)
        self.dilation = tuple(dilation)
        self.pad = tuple(map(tuple, pad))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.pad)

    __call__ = forward


class Conv1d(Module):
    """(C,T) -> (O,T') cross-correlation; k=1 takes the plain matmul path."""

    def __init__(self, in_channels, out_channels, kernel=1, dilation=1, pad=(0, 0),
                 bias=True, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng()
        fan_in = in_channels * kernel
        self.weight = Parameter(
            _kaiming_uniform(rng, (out_channels, in_channels, kernel), fan_in, dtype)
        )
        self.bias = Parameter(_kaiming_uniform(rng, (out_channels,), fan_in, dtype)) if bias else None
        self.kernel = kernel
        self.dilation = dilation
        self.pad = tuple(pad)

    def forward(self, x: Tensor) -> Tensor:
        O, C, k = self.weight.shape
        if k == 1 and self.pad == (0, 0):
            out = T.matmul(T.reshape(self.weight, (O, C)), x)
        else:
            x3 = T.reshape(x, (x.shape[0], 1, x.shape[1]))
            w4 = T.reshape(self.weight, (O, C, 1, k))
            out = T.conv2d(x3, w4, None, stride=(1, 1), dilation=(1, self.dilation),
                           pad=((0, 0), self.pad))
            out = T.reshape(out, (O, out.shape[2]))
        if self.bias is not None:
            out = out + T.reshape(self.bias, (O, 1))
        return out

    __call__ = forward


class DepthwiseConv1d(Module):
    """Per-channel (C,T) -> (C,T') correlation with causal/explicit padding."""

    def __init__(self, channels, kernel, dilation=1, pad=(0, 0), bias=True,
                 rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng()
        self.weight = Parameter(_kaiming_uniform(rng, (channels, kernel), kernel, dtype))
        self.bias = Parameter(_kaiming_uniform(rng, (channels,), kernel, dtype)) if bias else None
        self.dilation = dilation
        self.pad = tuple(pad)

    def forward(self, x: Tensor) -> Tensor:
        x = T.pad1d(x, *self.pad)
        out = T.depthwise_conv1d(x, self.weight, dilation=self.dilation)
        if self.bias is not None:
            out = out + T.reshape(self.bias, (self.weight.shape[0], 1))
        return out

    __call__ = forward


class PReLU(Module):
    """Single-slope parametric ReLU (slope shared over all elements)."""

    def __init__(self, init=0.25, dtype=np.float32):
        super().__init__()
        self.slope = Parameter(np.full((1,), init, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.maximum(x, 0.0) + self.slope * T.minimum(x, 0.0)

    __call__ = forward


class BatchNorm(Module):
    """Per-channel batch normalization over every non-channel axis.

    Training mode normalizes by batch statistics and blends them into
    running buffers; eval mode uses the running buffers. Biased variance
    throughout.
    """

    def __init__(self, num_features, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.gamma = Parameter(np.ones(num_features, dtype=dtype))
        self.beta = Parameter(np.zeros(num_features, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(num_features, dtype=dtype))
        self.register_buffer("running_var", np.ones(num_features, dtype=dtype))
        self.eps = eps
        self.momentum = momentum

    def forward(self, x: Tensor) -> Tensor:
        C = x.shape[0]
        if C != self.gamma.shape[0]:
            raise ValueError(f"batchnorm expects {self.gamma.shape[0]} channels, got {C}")
        axes = tuple(range(1, len(x.shape)))
        bshape = (C,) + (1,) * (len(x.shape) - 1)
        gamma = T.reshape(self.gamma, bshape)
        beta = T.reshape(self.beta, bshape)
        if self.training:
            n = int(np.prod(x.shape[1:]))
            if n < 2:
                raise ValueError("batchnorm training mode needs >= 2 elements per channel")
            mu = T.tmean(x, axis=axes, keepdims=True)
            xc = x - mu
            var = T.tmean(T.square(xc), axis=axes, keepdims=True)
            m = self.momentum
            self._set_buffer(
                "running_mean",
                ((1 - m) * self.running_mean + m * mu.data.reshape(C)).astype(self.running_mean.dtype),
            )
            self._set_buffer(
                "running_var",
                ((1 - m) * self.running_var + m * var.data.reshape(C)).astype(self.running_var.dtype),
            )
            inv = T.power(var + self.eps, -0.5)
            return xc * inv * gamma + beta
        rm = T.constant(self.running_mean.reshape(bshape))
        inv = T.constant(1.0 / np.sqrt(self.running_var.reshape(bshape) + self.eps))
        return (x - rm) * inv * gamma + beta

    __call__ = forward


class CumulativeLayerNorm(Module):
    """Causal normalization of (C,T): frame t uses statistics of frames <= t."""

    def __init__(self, channels, eps=1e-8, dtype=np.float32):
        super().__init__()
        self.gamma = Parameter(np.ones((channels, 1), dtype=dtype))
        self.beta = Parameter(np.zeros((channels, 1), dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        C, Tn = x.shape
        counts = (np.arange(1, Tn + 1, dtype=x.dtype) * C).reshape(1, Tn)
        csum = T.cumsum(T.tsum(x, axis=0, keepdims=True), axis=1)
        csq = T.cumsum(T.tsum(T.square(x), axis=0, keepdims=True), axis=1)
        mean = csum * T.constant(1.0 / counts)
        var = csq * T.constant(1.0 / counts) - T.square(mean)
        var = T.maximum(var, 0.0) + self.eps
        return (x - mean) * T.power(var, -0.5) * self.gamma + self.beta

    __call__ = forward
