"""Dense tensor primitives, the layer contract and finite-difference gradient checking.

Tensors are plain C-contiguous ``float64`` numpy arrays. Row-major layout makes
``reshape`` a metadata-only change, which the replaceable pooling lift/drop
stages depend on.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidHyperparam, NonDeterministicLayer, ShapeMismatch

_debug = contextvars.ContextVar("occdet_debug", default=False)


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Enable finite-value and stale-cache validation inside the block."""
    token = _debug.set(enabled)
    try:
        yield
    finally:
        _debug.reset(token)


def debug_enabled() -> bool:
    return _debug.get()


def check_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if debug_enabled() and not np.all(np.isfinite(t)):
        raise FloatingPointError(f"non-finite values in {what}")
    return t


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array (no copy when already one)."""
    return np.ascontiguousarray(x, dtype=np.float64)


@dataclass(frozen=True)
class OpCounter:
    """Tally of primitive operations performed by one invocation.

    Cost model: one compare per max candidate, one add per accumulation into an
    existing partial result, one multiply per product or scaling, one move per
    element copied into a new buffer (including result stores).
    """

    compares: int = 0
    adds: int = 0
    multiplies: int = 0
    moves: int = 0

    def __add__(self, other: "OpCounter") -> "OpCounter":
        return OpCounter(
            self.compares + other.compares,
            self.adds + other.adds,
            self.multiplies + other.multiplies,
            self.moves + other.moves,
        )

    def scaled(self, k: int) -> "OpCounter":
        return OpCounter(self.compares * k, self.adds * k, self.multiplies * k, self.moves * k)

    @property
    def total(self) -> int:
        return self.compares + self.adds + self.multiplies + self.moves

    def as_dict(self) -> dict:
        return {
            "compares": self.compares,
            "adds": self.adds,
            "multiplies": self.multiplies,
            "moves": self.moves,
            "total": self.total,
        }


@dataclass
class LayerGrad:
    d_input: np.ndarray
    d_params: list = field(default_factory=list)


def reshape(t: np.ndarray, new_shape: Sequence[int]) -> np.ndarray:
    new_shape = tuple(int(s) for s in new_shape)
    if math.prod(new_shape) != t.size:
        raise ShapeMismatch(f"cannot reshape {t.shape} into {new_shape}")
    return as_tensor(t).reshape(new_shape)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv_args(x: np.ndarray, kernel: np.ndarray, stride: int, padding: int):
    if stride <= 0:
        raise InvalidHyperparam(f"stride must be positive, got {stride}")
    if padding < 0:
        raise InvalidHyperparam(f"padding must be non-negative, got {padding}")
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeMismatch(f"conv2d expects [C,H,W] input and 4-d kernel, got {x.shape}, {kernel.shape}")
    c_in, h, w = x.shape
    _, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise ShapeMismatch(f"kernel expects {kc} input channels, input has {c_in}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeMismatch(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Unfold [C,H,W] into columns [C*kh*kw, H'*W'] (channel-major, then kernel row, kernel col)."""
    c = x.shape[0]
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    return win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo)


def col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto a [C,H,W] map."""
    c, h, w = shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    out = np.zeros((c, h + 2 * padding, w + 2 * padding))
    cols = cols.reshape(c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    if padding:
        out = out[:, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out)


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlate a [C_in,H,W] map with a [C_out,C_in,Kh,Kw] kernel, zero padding."""
    _check_conv_args(x, kernel, stride, padding)
    c_out, _, kh, kw = kernel.shape
    ho = conv_output_size(x.shape[1], kh, stride, padding)
    wo = conv_output_size(x.shape[2], kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)
    out = kernel.reshape(c_out, -1) @ cols
    return check_finite(out.reshape(c_out, ho, wo), "conv2d output")


def conv2d_backward(x: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray, stride: int = 1, padding: int = 0):
    """Return (d_input, d_kernel) for :func:`conv2d` given the upstream gradient."""
    c_out, _, kh, kw = kernel.shape
    cols = im2col(x, kh, kw, stride, padding)
    g = grad_out.reshape(c_out, -1)
    d_kernel = (g @ cols.T).reshape(kernel.shape)
    d_cols = kernel.reshape(c_out, -1).T @ g
    d_input = col2im(d_cols, x.shape, kh, kw, stride, padding)
    return d_input, d_kernel


def conv2d_cost(c_in: int, c_out: int, kh: int, kw: int, ho: int, wo: int) -> OpCounter:
    """Operation count of a direct convolution producing a [c_out, ho, wo] map."""
    macs = c_out * ho * wo * c_in * kh * kw
    return OpCounter(adds=macs, multiplies=macs, moves=c_out * ho * wo)


class Layer:
    """Differentiable layer contract.

    ``forward`` and ``backward`` are pure functions of the input and the current
    parameter arrays. ``backward`` recomputes whatever forward state it needs.
    """

    name = "layer"
    param_names: tuple = ()

    @property
    def params(self) -> list:
        return [getattr(self, n) for n in self.param_names]

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> LayerGrad:
        raise NotImplementedError

    def params_updated(self) -> None:
        """Hook called after parameters are modified in place."""

    def __call__(self, x):
        return self.forward(x)


class Linear(Layer):
    name = "linear"
    param_names = ("weight",)

    def __init__(self, weight):
        self.weight = as_tensor(weight)

    def forward(self, x):
        return self.weight @ x

    def backward(self, x, grad_out):
        return LayerGrad(self.weight.T @ grad_out, [np.outer(grad_out, x) if x.ndim == 1 else grad_out @ x.T])


class ReLU(Layer):
    name = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, x, grad_out):
        return LayerGrad(grad_out * (x > 0), [])


class Conv2d(Layer):
    name = "conv2d"

    def __init__(self, kernel, bias=None, stride: int = 1, padding: int = 0):
        self.kernel = as_tensor(kernel)
        self.bias = None if bias is None else as_tensor(bias)
        self.stride = stride
        self.padding = padding
        self.param_names = ("kernel",) if bias is None else ("kernel", "bias")

    @classmethod
    def init(cls, rng: np.random.Generator, c_in: int, c_out: int, k: int = 3, stride=1, padding=None, bias=True):
        bound = 1.0 / math.sqrt(c_in * k * k)
        kernel = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
        b = np.zeros(c_out) if bias else None
        return cls(kernel, b, stride, k // 2 if padding is None else padding)

    def forward(self, x):
        y = conv2d(x, self.kernel, self.stride, self.padding)
        if self.bias is not None:
            y += self.bias[:, None, None]
        return y

    def backward(self, x, grad_out):
        d_x, d_k = conv2d_backward(x, self.kernel, grad_out, self.stride, self.padding)
        grads = [d_k]
        if self.bias is not None:
            grads.append(grad_out.sum(axis=(1, 2)))
        return LayerGrad(d_x, grads)

    def cost(self, input_shape) -> OpCounter:
        c_out, c_in, kh, kw = self.kernel.shape
        ho = conv_output_size(input_shape[1], kh, self.stride, self.padding)
        wo = conv_output_size(input_shape[2], kw, self.stride, self.padding)
        return conv2d_cost(c_in, c_out, kh, kw, ho, wo)


@dataclass
class GradCheckReport:
    layer: str
    errors: dict
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # max abs deviation normalised by the tensor's gradient scale
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _numeric_grad(f, arr: np.ndarray, eps: float) -> np.ndarray:
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        g[i] = (fp - fm) / (2 * eps)
    return grad


def grad_check(layer: Layer, x: np.ndarray, eps: float = 1e-6, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients with central differences of ``sum(forward(x)**2)``.

    Parameters are perturbed in place and restored; the layer is left unchanged.
    """
    if not 0 < eps <= 1e-2:
        raise InvalidHyperparam(f"eps must lie in (0, 1e-2], got {eps}")
    x = np.array(x, dtype=np.float64)
    y = layer.forward(x)
    if not np.array_equal(y, layer.forward(x)):
        raise NonDeterministicLayer(f"{layer.name}: repeated forward calls disagree")
    analytic = layer.backward(x, 2.0 * y)

    def loss():
        layer.params_updated()
        return float(np.sum(layer.forward(x) ** 2))

    errors = {"input": _rel_err(analytic.d_input, _numeric_grad(loss, x, eps))}
    for name, p, g in zip(layer.param_names, layer.params, analytic.d_params):
        errors[name] = _rel_err(g, _numeric_grad(loss, p, eps))
    layer.params_updated()
    return GradCheckReport(layer.name, errors, tol)
