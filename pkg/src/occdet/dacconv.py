"""Two-factor convolution kernels: a per-channel factor times a feature-map factor.

For each input channel ``c`` the spatial kernel rows are ``kf[c] @ kc[c]`` with
``kc[c]`` of shape [D, S] and ``kf[c]`` of shape [C_out, D] (S = kh*kw). The
product folds into an ordinary [C_out, C_in, kh, kw] kernel, so inference
costs exactly one standard convolution plus one small matrix product.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch, StaleFold
from .tensor import (
    Conv2d,
    Layer,
    LayerGrad,
    OpCounter,
    as_tensor,
    conv2d,
    conv2d_backward,
    conv2d_cost,
    conv_output_size,
    debug_enabled,
)


@dataclass
class DacKernelPair:
    kc: np.ndarray  # [C_in, D, S]
    kf: np.ndarray  # [C_in, C_out, D]
    kh: int
    kw: int

    def __post_init__(self):
        self.kc = as_tensor(self.kc)
        self.kf = as_tensor(self.kf)
        if self.kc.ndim != 3 or self.kf.ndim != 3:
            raise ShapeMismatch(f"kc must be [C_in,D,S] and kf [C_in,C_out,D], got {self.kc.shape}, {self.kf.shape}")
        c_in, d, s = self.kc.shape
        if s != self.kh * self.kw:
            raise ShapeMismatch(f"kc spatial extent {s} != kh*kw = {self.kh * self.kw}")
        if d < 1:
            raise ShapeMismatch("depth multiplier D must be >= 1")
        if self.kf.shape[0] != c_in or self.kf.shape[2] != d:
            raise ShapeMismatch(f"kf {self.kf.shape} incompatible with kc {self.kc.shape}")

    @property
    def c_in(self):
        return self.kc.shape[0]

    @property
    def c_out(self):
        return self.kf.shape[1]

    @property
    def depth(self):
        return self.kc.shape[1]


def compose(pair: DacKernelPair) -> np.ndarray:
    """Fold the two factors into a standard [C_out, C_in, kh, kw] kernel."""
    k = np.matmul(pair.kf, pair.kc)  # [C_in, C_out, S]
    return np.ascontiguousarray(k.transpose(1, 0, 2)).reshape(pair.c_out, pair.c_in, pair.kh, pair.kw)


def compose_backward(pair: DacKernelPair, d_kernel: np.ndarray):
    """Chain a composed-kernel gradient back to (d_kc, d_kf)."""
    dk = d_kernel.reshape(pair.c_out, pair.c_in, -1).transpose(1, 0, 2)  # [C_in, C_out, S]
    d_kf = np.matmul(dk, pair.kc.transpose(0, 2, 1))
    d_kc = np.matmul(pair.kf.transpose(0, 2, 1), dk)
    return d_kc, d_kf


def fold_cost_of(pair: DacKernelPair) -> OpCounter:
    c_in, d, s = pair.kc.shape
    c_out = pair.c_out
    return OpCounter(
        multiplies=c_in * c_out * d * s,
        adds=c_in * c_out * (d - 1) * s,
        moves=c_in * c_out * s,
    )


class DacLayer(Layer):
    """Convolution whose kernel is composed from ``kc`` and ``kf`` on every call
    unless :meth:`fold` has cached it."""

    name = "dacconv"

    def __init__(self, pair: DacKernelPair, bias=None, stride: int = 1, padding: int = 0):
        self.pair = pair
        self.bias = None if bias is None else as_tensor(bias)
        self.stride = stride
        self.padding = padding
        self.folded = None
        self._fold_snapshot = None
        self.param_names = ("kc", "kf") if bias is None else ("kc", "kf", "bias")

    @property
    def kc(self):
        return self.pair.kc

    @property
    def kf(self):
        return self.pair.kf

    @classmethod
    def init(cls, rng: np.random.Generator, c_in: int, c_out: int, k: int = 3, depth: int | None = None,
             kc_noise: float = 0.01, stride: int = 1, padding: int | None = None, bias: bool = True):
        """Identity-plus-noise ``kc`` and fan-in uniform ``kf``; D defaults to k*k."""
        s = k * k
        d = s if depth is None else depth
        kc = np.broadcast_to(np.eye(d, s), (c_in, d, s)).copy()
        if kc_noise:
            kc += rng.normal(0.0, kc_noise, size=kc.shape)
        bound = 1.0 / math.sqrt(c_in * s)
        kf = rng.uniform(-bound, bound, size=(c_in, c_out, d))
        return cls(DacKernelPair(kc, kf, k, k), np.zeros(c_out) if bias else None,
                   stride, k // 2 if padding is None else padding)

    @classmethod
    def from_conv(cls, conv: Conv2d, depth: int | None = None, rng: np.random.Generator | None = None):
        """A layer whose composed kernel equals ``conv.kernel`` exactly.

        ``kc`` is the (rectangular) identity; for D > kh*kw the surplus ``kf``
        columns multiply zero rows of ``kc`` and are drawn from ``rng``.
        """
        c_out, c_in, kh, kw = conv.kernel.shape
        s = kh * kw
        d = s if depth is None else depth
        if d < s:
            raise ShapeMismatch(f"an exact copy of a standard kernel needs D >= {s}, got {d}")
        kc = np.broadcast_to(np.eye(d, s), (c_in, d, s)).copy()
        kf = np.zeros((c_in, c_out, d))
        kf[:, :, :s] = conv.kernel.reshape(c_out, c_in, s).transpose(1, 0, 2)
        if d > s:
            rng = rng or np.random.default_rng(0)
            bound = 1.0 / math.sqrt(c_in * s)
            kf[:, :, s:] = rng.uniform(-bound, bound, size=(c_in, c_out, d - s))
        bias = None if conv.bias is None else conv.bias.copy()
        return cls(DacKernelPair(kc, kf, kh, kw), bias, conv.stride, conv.padding)

    def fold(self) -> np.ndarray:
        self.folded = compose(self.pair)
        self._fold_snapshot = (self.kc.copy(), self.kf.copy())
        return self.folded

    def params_updated(self) -> None:
        self.folded = None
        self._fold_snapshot = None

    def kernel(self) -> np.ndarray:
        if self.folded is None:
            return compose(self.pair)
        if debug_enabled():
            kc, kf = self._fold_snapshot
            if not (np.array_equal(kc, self.kc) and np.array_equal(kf, self.kf)):
                raise StaleFold("parameters changed since fold(); call params_updated() or fold() again")
        return self.folded

    def forward(self, x):
        if x.shape[0] != self.pair.c_in:
            raise ShapeMismatch(f"layer expects {self.pair.c_in} input channels, got {x.shape[0]}")
        y = conv2d(x, self.kernel(), self.stride, self.padding)
        if self.bias is not None:
            y += self.bias[:, None, None]
        return y

    def backward(self, x, grad_out):
        d_x, d_k = conv2d_backward(x, compose(self.pair), grad_out, self.stride, self.padding)
        d_kc, d_kf = compose_backward(self.pair, d_k)
        grads = [d_kc, d_kf]
        if self.bias is not None:
            grads.append(grad_out.sum(axis=(1, 2)))
        return LayerGrad(d_x, grads)

    def cost(self, input_shape) -> OpCounter:
        """Forward cost with the kernel already folded (same as a standard conv)."""
        ho = conv_output_size(input_shape[1], self.pair.kh, self.stride, self.padding)
        wo = conv_output_size(input_shape[2], self.pair.kw, self.stride, self.padding)
        return conv2d_cost(self.pair.c_in, self.pair.c_out, self.pair.kh, self.pair.kw, ho, wo)


def dac_forward(layer: DacLayer, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)


def dac_backward(layer: DacLayer, x: np.ndarray, upstream_grad: np.ndarray) -> LayerGrad:
    return layer.backward(x, upstream_grad)


def fold_cost(layer: DacLayer) -> OpCounter:
    return fold_cost_of(layer.pair)
