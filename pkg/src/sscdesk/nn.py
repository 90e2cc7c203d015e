"""Parameter containers and the few layer primitives built on the tape."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParamBuilder:
    """Creates named parameters in a fixed order from one generator.

    Weights are uniform in +-1/sqrt(fan_in); biases start at zero.
    """

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.rng = rng
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}

    def _add(self, name, arr):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def uniform(self, name, shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return self._add(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name, shape):
        return self._add(name, np.zeros(shape))

    def ones(self, name, shape):
        return self._add(name, np.ones(shape))

    def linear(self, name, c_in, c_out, bias=True, zero=False):
        if zero:
            self.zeros(f"{name}.w", (c_in, c_out))
        else:
            self.uniform(f"{name}.w", (c_in, c_out), c_in)
        if bias:
            self.zeros(f"{name}.b", (c_out,))

    def conv(self, name, kernel, c_in, c_out, zero=False):
        shape = tuple(kernel) + (c_in, c_out)
        if zero:
            self.zeros(f"{name}.w", shape)
        else:
            self.uniform(f"{name}.w", shape, int(np.prod(kernel)) * c_in)
        self.zeros(f"{name}.b", (c_out,))

    def layer_norm(self, name, c):
        self.ones(f"{name}.g", (c,))
        self.zeros(f"{name}.b", (c,))


def linear(x, params, name):
    y = T.matmul(x, params[f"{name}.w"])
    b = params.get(f"{name}.b")
    return y if b is None else y + b


def conv(x, params, name, pad=None, stride=1):
    w = params[f"{name}.w"]
    if pad is None:
        pad = w.shape[0] // 2
    return T.conv_nd(x, w, stride=stride, pad=pad, bias=params[f"{name}.b"])


def norm(x, params, name):
    return T.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def residual_block(x, params, name):
    """``x + conv2(relu(conv1(x)))``; identity when both convs are zero."""
    h = conv(x, params, f"{name}.c1").relu()
    return x + conv(h, params, f"{name}.c2")


def add_residual_block(pb: ParamBuilder, name, kernel, channels, zero=False):
    pb.conv(f"{name}.c1", kernel, channels, channels, zero=zero)
    pb.conv(f"{name}.c2", kernel, channels, channels, zero=zero)


def subset(params, prefix):
    """Parameters whose name starts with ``prefix``."""
    return {k: v for k, v in params.items() if k.startswith(prefix)}


def cast_params(params, dtype):
    return {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in params.items()}
