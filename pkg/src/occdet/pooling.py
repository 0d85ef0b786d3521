"""Replaceable pooling: lift to rank 5, pool with a named reduction, drop back.

The reduction is looked up in a registry so callers can swap it by name. The
older rotation-max voxel pooling is kept as :func:`legacy_pool`, both as a
reference oracle and as the baseline for the operation-count comparison.
"""
from __future__ import annotations

import itertools
import math
import tracemalloc
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DuplicateName,
    EmptyVoxel,
    InvalidHyperparam,
    NonUnitLiftedAxis,
    RankMismatch,
    ShapeMismatch,
    UnknownPoolFn,
    WindowTooLarge,
)
from .tensor import Layer, LayerGrad, OpCounter, as_tensor


@dataclass(frozen=True)
class PoolFn:
    """A pooling reduction over the last axis of a region array.

    ``reduce(values)`` maps [..., R] to [...]; ``grad_mask(values)`` returns the
    [..., R] partial derivatives of the reduced value with respect to each
    region element; ``cost(R)`` is the :class:`OpCounter` of one region.
    """

    name: str
    reduce: Callable[[np.ndarray], np.ndarray]
    grad_mask: Callable[[np.ndarray], np.ndarray]
    cost: Callable[[int], OpCounter]


_REGISTRY: dict[str, PoolFn] = {}


def register_pool(fn: PoolFn) -> None:
    if fn.name in _REGISTRY:
        raise DuplicateName(f"pool function {fn.name!r} already registered")
    _REGISTRY[fn.name] = fn


def get_pool(fn) -> PoolFn:
    """Resolve a registered name (or pass a :class:`PoolFn` through)."""
    if isinstance(fn, PoolFn):
        return fn
    try:
        return _REGISTRY[fn]
    except KeyError:
        raise UnknownPoolFn(f"no pool function named {fn!r}; known: {sorted(_REGISTRY)}") from None


def registered_pools() -> list[str]:
    return sorted(_REGISTRY)


def _max_mask(v):
    idx = np.argmax(v, axis=-1)  # first maximiser in scan order
    mask = np.zeros_like(v)
    np.put_along_axis(mask, idx[..., None], 1.0, axis=-1)
    return mask


def _avg_mask(v):
    return np.full_like(v, 1.0 / v.shape[-1])


def _lp_reduce(v):
    # signed power mean with p=2: sign(s) * sqrt(|s|), s = mean(v * |v|)
    s = np.mean(v * np.abs(v), axis=-1)
    return np.sign(s) * np.sqrt(np.abs(s))


def _lp_mask(v):
    y = np.abs(_lp_reduce(v))
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.abs(v) / (v.shape[-1] * y[..., None])
    return np.where(y[..., None] > 0, g, 0.0)


def _soft_weights(v):
    e = np.exp(v - np.max(v, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def _soft_reduce(v):
    w = _soft_weights(v)
    return np.einsum("...i,...i->...", w, v)


def _soft_mask(v):
    w = _soft_weights(v)
    y = np.einsum("...i,...i->...", w, v)
    return w * (1.0 + v - y[..., None])


BUILTIN_POOLS = (
    PoolFn("max", lambda v: np.max(v, axis=-1), _max_mask,
           lambda r: OpCounter(compares=r, moves=1)),
    PoolFn("avg", lambda v: np.mean(v, axis=-1), _avg_mask,
           lambda r: OpCounter(adds=r - 1, multiplies=1, moves=1)),
    PoolFn("lp", _lp_reduce, _lp_mask,
           lambda r: OpCounter(adds=r - 1, multiplies=2 * r + 2, moves=1)),
    PoolFn("soft", _soft_reduce, _soft_mask,
           lambda r: OpCounter(compares=r, adds=2 * (r - 1), multiplies=2 * r + 1, moves=1)),
)

for _fn in BUILTIN_POOLS:
    register_pool(_fn)


# --- legacy rotation pooling -------------------------------------------------

@dataclass
class VoxelFeatureSet:
    """Per-voxel point features under ``N_rot`` rotation variants.

    ``features`` has shape [K, N_rot, n]; ``rotations[j]`` is a permutation of
    the n feature slots applied to variant j, with ``rotations[0]`` the identity.
    """

    features: np.ndarray
    rotations: list = field(default=None)

    def __post_init__(self):
        self.features = as_tensor(self.features)
        if self.features.ndim != 3:
            raise RankMismatch(f"voxel features must be [K, N_rot, n], got {self.features.shape}")
        _, n_rot, n = self.features.shape
        if n_rot < 1:
            raise ShapeMismatch("need at least one rotation variant")
        if self.rotations is None:
            self.rotations = [np.arange(n)] * n_rot
        self.rotations = [np.asarray(r, dtype=np.intp) for r in self.rotations]
        if len(self.rotations) != n_rot:
            raise ShapeMismatch(f"{len(self.rotations)} rotation maps for {n_rot} variants")
        if not np.array_equal(self.rotations[0], np.arange(n)):
            raise ValueError("rotations[0] must be the identity map")
        for r in self.rotations:
            if r.shape != (n,) or not np.array_equal(np.sort(r), np.arange(n)):
                raise ValueError("every rotation map must be a bijection on the n feature slots")

    @property
    def shape(self):
        return self.features.shape

    @classmethod
    def random(cls, rng: np.random.Generator, k: int, n_rot: int, n: int):
        rotations = [np.arange(n)] + [rng.permutation(n) for _ in range(n_rot - 1)]
        return cls(rng.standard_normal((k, n_rot, n)), rotations)


def legacy_pool(v: VoxelFeatureSet):
    """Rotation-max voxel pooling: ``F_k = max_j |mean_i f_kij|``.

    Each rotation variant is materialised by gathering through its map, summed
    by a running prefix sum, normalised, and the absolute means are compared.
    Returns ``(F [K], OpCounter)``.
    """
    k, n_rot, n = v.features.shape
    if n == 0:
        raise EmptyVoxel("voxels hold no point features")
    index = np.stack(v.rotations)[None]
    rotated = np.take_along_axis(v.features, index, axis=2)
    running = np.cumsum(rotated, axis=2)
    means = running[:, :, -1] / n
    out = np.max(np.abs(means), axis=1)
    cost = OpCounter(
        moves=k * n_rot * n + k,
        adds=k * n_rot * (n - 1),
        multiplies=k * n_rot,
        compares=k * n_rot,
    )
    return out, cost


def voxel_workload(v: VoxelFeatureSet) -> np.ndarray:
    """View voxel features as a [K, N_rot, 1, n] map for replaceable pooling.

    No rotation maps are applied: every registered reduction is permutation
    invariant, so pooling the unrotated slots gives the same value.
    """
    k, n_rot, n = v.features.shape
    return v.features.reshape(k, n_rot, 1, n)


# --- replaceable pooling -----------------------------------------------------

LIFTED_AXIS = 2


@dataclass(frozen=True)
class PoolRegionSpec:
    """Window and stride per pooled axis of the rank-5 lifted tensor."""

    window: tuple
    stride: tuple = None
    axes: tuple = (3, 4)

    def __post_init__(self):
        window = tuple(int(w) for w in self.window)
        stride = window if self.stride is None else tuple(int(s) for s in self.stride)
        axes = tuple(int(a) for a in self.axes)
        object.__setattr__(self, "window", window)
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "axes", axes)
        if not (len(window) == len(stride) == len(axes)):
            raise InvalidHyperparam("window, stride and axes must have equal length")
        if any(w < 1 for w in window) or any(s < 1 for s in stride):
            raise InvalidHyperparam(f"window and stride must be >= 1, got {window}, {stride}")
        if len(set(axes)) != len(axes) or any(a not in (2, 3, 4) for a in axes):
            raise InvalidHyperparam(f"pooled axes must be distinct members of (2, 3, 4), got {axes}")

    @classmethod
    def square(cls, size: int, stride: int | None = None):
        return cls((size, size), (stride or size, stride or size), (3, 4))

    def full_axes(self):
        """(window, stride) for all three spatial axes of the lifted tensor."""
        win, st = [1, 1, 1], [1, 1, 1]
        for a, w, s in zip(self.axes, self.window, self.stride):
            win[a - 2], st[a - 2] = w, s
        return tuple(win), tuple(st)


def rp_lift(t: np.ndarray) -> np.ndarray:
    """[N,C,H,W] -> [N,C,1,H,W] as a view of the same data (no element moves)."""
    if t.ndim != 4:
        raise RankMismatch(f"rp_lift expects a rank-4 tensor, got rank {t.ndim}")
    n, c, h, w = t.shape
    return t.reshape(n, c, 1, h, w)


def rp_drop(t: np.ndarray) -> np.ndarray:
    """[N,C,1,H,W] -> [N,C,H,W]; the lifted axis must have extent 1."""
    if t.ndim != 5:
        raise RankMismatch(f"rp_drop expects a rank-5 tensor, got rank {t.ndim}")
    if t.shape[LIFTED_AXIS] != 1:
        raise NonUnitLiftedAxis(f"lifted axis has extent {t.shape[LIFTED_AXIS]}, expected 1")
    n, c, _, h, w = t.shape
    return t.reshape(n, c, h, w)


def _regions(t: np.ndarray, spec: PoolRegionSpec):
    win, st = spec.full_axes()
    ext = t.shape[2:]
    for e, w in zip(ext, win):
        if w > e:
            raise WindowTooLarge(f"window {win} exceeds extents {ext}")
    out_ext = tuple((e - w) // s + 1 for e, w, s in zip(ext, win, st))
    view = sliding_window_view(t, win, axis=(2, 3, 4))
    view = view[:, :, ::st[0], ::st[1], ::st[2]]
    regions = view.reshape(t.shape[:2] + out_ext + (math.prod(win),))
    return regions, win, st, out_ext


def rp_pool(t: np.ndarray, spec: PoolRegionSpec, fn):
    """Reduce every region of a rank-5 tensor with ``fn``; returns (out, OpCounter)."""
    if t.ndim != 5:
        raise RankMismatch(f"rp_pool expects a rank-5 tensor, got rank {t.ndim}")
    fn = get_pool(fn)
    regions, _, _, _ = _regions(t, spec)
    out = fn.reduce(regions)
    cost = fn.cost(regions.shape[-1]).scaled(out.size)
    return np.ascontiguousarray(out), cost


def rp_pool_backward(t: np.ndarray, spec: PoolRegionSpec, fn, grad_out: np.ndarray) -> np.ndarray:
    """Route ``grad_out`` back onto the input through each region's grad mask."""
    fn = get_pool(fn)
    regions, win, st, out_ext = _regions(t, spec)
    weighted = fn.grad_mask(regions) * grad_out[..., None]
    weighted = weighted.reshape(t.shape[:2] + out_ext + win)
    d_t = np.zeros_like(t)
    for off in itertools.product(*(range(w) for w in win)):
        sl = tuple(slice(o, o + s * e, s) for o, s, e in zip(off, st, out_ext))
        d_t[(slice(None), slice(None)) + sl] += weighted[(Ellipsis,) + off]
    return d_t


def replaceable_pool_3d(t: np.ndarray, spec: PoolRegionSpec, fn):
    """Lift, pool and drop a [N,C,H,W] tensor. Returns (out, OpCounter)."""
    lifted = rp_lift(t)
    if LIFTED_AXIS in spec.axes and spec.window[spec.axes.index(LIFTED_AXIS)] != 1:
        raise NonUnitLiftedAxis("pooling the lifted axis with a window > 1 cannot be dropped")
    pooled, cost = rp_pool(lifted, spec, fn)
    # lift and drop only rewrite shape metadata
    return rp_drop(pooled), cost


def replaceable_pool_2d(img: np.ndarray, spec: PoolRegionSpec, fn):
    """Pool a [C,H,W] image through the same lift/pool/drop path."""
    if img.ndim != 3:
        raise RankMismatch(f"replaceable_pool_2d expects [C,H,W], got rank {img.ndim}")
    out, cost = replaceable_pool_3d(img[None], spec, fn)
    return out[0], cost


def replaceable_pool_2d_backward(img, spec, fn, grad_out):
    lifted = img[None, :, None]
    return rp_pool_backward(lifted, spec, fn, grad_out[None, :, None])[0, :, 0]


def pool_output_shape(shape: Sequence[int], spec: PoolRegionSpec):
    c, h, w = shape
    _, wh, ww = spec.full_axes()[0]
    _, sh, sw = spec.full_axes()[1]
    return c, (h - wh) // sh + 1, (w - ww) // sw + 1


class RPPool(Layer):
    """2D replaceable pooling as a parameter-free layer."""

    name = "rp_pool"

    def __init__(self, spec: PoolRegionSpec, fn="max"):
        self.spec = spec
        self.fn = get_pool(fn)

    def forward(self, x):
        return replaceable_pool_2d(x, self.spec, self.fn)[0]

    def backward(self, x, grad_out):
        return LayerGrad(replaceable_pool_2d_backward(x, self.spec, self.fn, grad_out), [])


def peak_transient_bytes(func, *args, **kwargs):
    """Run ``func`` under tracemalloc; return (result, peak bytes allocated during the call)."""
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base, _ = tracemalloc.get_traced_memory()
        result = func(*args, **kwargs)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        if not was_tracing:
            tracemalloc.stop()
    return result, peak - base
