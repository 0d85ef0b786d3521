"""Deformable convolution, replaceable ROI pooling and multi-scale pyramid fusion.

Coordinate conventions
----------------------
``bilinear_sample`` takes index coordinates: integer (x, y) hits grid cell
(y, x) exactly and neighbours outside the map read as zero.

ROIs live in input-image pixels. ``rroi_pool`` converts them to map units with
``spatial_scale`` and treats cell ``c`` as the continuous interval [c, c+1),
so a sample at continuous position u reads index u - 0.5.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRoi, InvalidHyperparam, ShapeMismatch
from .pooling import PoolRegionSpec, get_pool, replaceable_pool_2d, replaceable_pool_2d_backward
from .tensor import Layer, LayerGrad, as_tensor, conv2d, conv2d_backward, conv_output_size


# --- bilinear sampling ---------------------------------------------------------

def _corners(h, w, ys, xs):
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    ly = ys - y0
    lx = xs - x0
    y0 = y0.astype(np.intp)
    x0 = x0.astype(np.intp)
    out = []
    for dy, dx, wgt, gy, gx in (
        (0, 0, (1 - ly) * (1 - lx), -(1 - lx), -(1 - ly)),
        (0, 1, (1 - ly) * lx, -lx, (1 - ly)),
        (1, 0, ly * (1 - lx), (1 - lx), -ly),
        (1, 1, ly * lx, lx, ly),
    ):
        yi = y0 + dy
        xi = x0 + dx
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        out.append((np.where(valid, yi, 0), np.where(valid, xi, 0), valid, wgt, gy, gx))
    return out


def bilinear_sample_many(fmap: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample a [C,H,W] map at index coordinates; returns [C, *ys.shape]."""
    _, h, w = fmap.shape
    out = 0.0
    for yi, xi, valid, wgt, _, _ in _corners(h, w, ys, xs):
        out = out + np.where(valid, wgt, 0.0) * fmap[:, yi, xi]
    return out


def bilinear_sample(fmap: np.ndarray, px: float, py: float) -> np.ndarray:
    """Interpolated channel vector at fractional column ``px`` and row ``py``."""
    return bilinear_sample_many(fmap, np.asarray(py, dtype=float), np.asarray(px, dtype=float))


def bilinear_backward(fmap_shape, ys, xs, grad: np.ndarray, fmap: np.ndarray | None = None):
    """Adjoint of :func:`bilinear_sample_many`.

    Returns the map gradient, and when ``fmap`` is given also the gradients
    with respect to the sample coordinates (d_ys, d_xs), summed over channels.
    """
    c, h, w = fmap_shape
    d_map = np.zeros(c * h * w)
    d_ys = np.zeros(ys.shape) if fmap is not None else None
    d_xs = np.zeros(xs.shape) if fmap is not None else None
    chan = (np.arange(c) * h * w).reshape((c,) + (1,) * ys.ndim)
    for yi, xi, valid, wgt, gy, gx in _corners(h, w, ys, xs):
        wv = np.where(valid, wgt, 0.0)
        idx = chan + yi * w + xi
        d_map += np.bincount(idx.ravel(), (wv * grad).ravel(), minlength=c * h * w)
        if fmap is not None:
            vals = np.where(valid, fmap[:, yi, xi], 0.0)
            gv = np.sum(vals * grad, axis=0)
            d_ys += gy * gv
            d_xs += gx * gv
    d_map = d_map.reshape(c, h, w)
    if fmap is None:
        return d_map
    return d_map, d_ys, d_xs


# --- deformable convolution ----------------------------------------------------

class DeformableLayer(Layer):
    """Deformable convolution with a standard-conv offset predictor.

    Offsets come from ``conv2d(x, offset_weight) + offset_bias`` with the same
    kernel size, stride and padding as the main conv. Channel ``2k`` holds the
    row offset and ``2k+1`` the column offset of kernel tap ``k`` (row-major).
    """

    name = "deform_conv"

    def __init__(self, weight, offset_weight, offset_bias, bias=None, stride: int = 1, padding: int = 0):
        self.weight = as_tensor(weight)
        self.offset_weight = as_tensor(offset_weight)
        self.offset_bias = as_tensor(offset_bias)
        self.bias = None if bias is None else as_tensor(bias)
        self.stride = stride
        self.padding = padding
        c_out, c_in, kh, kw = self.weight.shape
        if self.offset_weight.shape != (2 * kh * kw, c_in, kh, kw):
            raise ShapeMismatch(f"offset weight must be {(2 * kh * kw, c_in, kh, kw)}, got {self.offset_weight.shape}")
        if self.offset_bias.shape != (2 * kh * kw,):
            raise ShapeMismatch("offset bias needs one entry per offset channel")
        names = ["weight", "offset_weight", "offset_bias"]
        if bias is not None:
            names.append("bias")
        self.param_names = tuple(names)

    @classmethod
    def init(cls, rng: np.random.Generator, c_in: int, c_out: int, k: int = 3, stride: int = 1,
             padding: int | None = None, bias: bool = True):
        """Fan-in uniform weights; the offset predictor starts at zero."""
        bound = 1.0 / math.sqrt(c_in * k * k)
        weight = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
        return cls(weight, np.zeros((2 * k * k, c_in, k, k)), np.zeros(2 * k * k),
                   np.zeros(c_out) if bias else None, stride, k // 2 if padding is None else padding)

    @property
    def offset_channels(self):
        return self.offset_weight.shape[0]

    def offsets(self, x):
        off = conv2d(x, self.offset_weight, self.stride, self.padding)
        return off + self.offset_bias[:, None, None]

    def _sample_grid(self, x, off):
        _, kh, kw = self.weight.shape[1:]
        _, ho, wo = off.shape
        ti, tj = np.divmod(np.arange(kh * kw), kw)
        oy = np.arange(ho) * self.stride - self.padding
        ox = np.arange(wo) * self.stride - self.padding
        ys = ti[:, None, None] + oy[None, :, None] + off[0::2]
        xs = tj[:, None, None] + ox[None, None, :] + off[1::2]
        return ys, xs

    def forward(self, x):
        c_out, c_in = self.weight.shape[:2]
        if x.shape[0] != c_in:
            raise ShapeMismatch(f"layer expects {c_in} input channels, got {x.shape[0]}")
        off = self.offsets(x)
        ys, xs = self._sample_grid(x, off)
        cols = bilinear_sample_many(x, ys, xs)  # [C_in, K, Ho, Wo]
        _, _, ho, wo = cols.shape
        y = (self.weight.reshape(c_out, -1) @ cols.reshape(-1, ho * wo)).reshape(c_out, ho, wo)
        if self.bias is not None:
            y += self.bias[:, None, None]
        return y

    def backward(self, x, grad_out):
        c_out = self.weight.shape[0]
        off = self.offsets(x)
        ys, xs = self._sample_grid(x, off)
        cols = bilinear_sample_many(x, ys, xs)
        g = grad_out.reshape(c_out, -1)
        d_weight = (g @ cols.reshape(cols.shape[0] * cols.shape[1], -1).T).reshape(self.weight.shape)
        d_cols = (self.weight.reshape(c_out, -1).T @ g).reshape(cols.shape)
        d_x, d_ys, d_xs = bilinear_backward(x.shape, ys, xs, d_cols, fmap=x)
        d_off = np.empty_like(off)
        d_off[0::2] = d_ys
        d_off[1::2] = d_xs
        d_x_off, d_ow = conv2d_backward(x, self.offset_weight, d_off, self.stride, self.padding)
        grads = [d_weight, d_ow, d_off.sum(axis=(1, 2))]
        if self.bias is not None:
            grads.append(grad_out.sum(axis=(1, 2)))
        return LayerGrad(d_x + d_x_off, grads)


def deform_conv(layer: DeformableLayer, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)


# --- ROI pooling ---------------------------------------------------------------

@dataclass
class Roi:
    """Axis-aligned box in input-image pixels; ``level`` is filled by level assignment."""

    x: float
    y: float
    w: float
    h: float
    level: int | None = None

    def scaled(self, k: float) -> "Roi":
        return Roi(self.x * k, self.y * k, self.w * k, self.h * k, self.level)

    def as_xyxy(self):
        return self.x, self.y, self.x + self.w, self.y + self.h


def _roi_samples(roi: Roi, grid: int, spatial_scale: float, sampling_ratio: int | None):
    if grid < 1:
        raise InvalidHyperparam(f"grid must be >= 1, got {grid}")
    if roi.w <= 0 or roi.h <= 0:
        raise DegenerateRoi(f"ROI needs positive extent, got w={roi.w}, h={roi.h}")
    x0, y0 = roi.x * spatial_scale, roi.y * spatial_scale
    bw, bh = roi.w * spatial_scale / grid, roi.h * spatial_scale / grid
    sy = sampling_ratio or max(1, math.ceil(bh - 1e-9))
    sx = sampling_ratio or max(1, math.ceil(bw - 1e-9))
    # continuous sample centres, then shift onto the index grid
    fy = (np.arange(grid)[:, None] + (np.arange(sy)[None, :] + 0.5) / sy) * bh + y0 - 0.5
    fx = (np.arange(grid)[:, None] + (np.arange(sx)[None, :] + 0.5) / sx) * bw + x0 - 0.5
    ys = np.broadcast_to(fy[:, None, :, None], (grid, grid, sy, sx)).reshape(grid, grid, sy * sx)
    xs = np.broadcast_to(fx[None, :, None, :], (grid, grid, sy, sx)).reshape(grid, grid, sy * sx)
    return ys, xs


def rroi_pool(fmap: np.ndarray, roi: Roi, grid: int, fn="max", spatial_scale: float = 1.0,
              sampling_ratio: int | None = None) -> np.ndarray:
    """Pool an ROI of a [C,H,W] map into [C, grid, grid] with a registered reduction.

    Each bin is reduced over a sy x sx lattice of bilinear samples. With
    ``sampling_ratio=None`` the lattice adapts to ceil(bin extent) per axis, so
    bins up to two cells wide take the usual 2x2 samples and cell-aligned bins
    sample every cell centre exactly.
    """
    fn = get_pool(fn)
    ys, xs = _roi_samples(roi, grid, spatial_scale, sampling_ratio)
    return fn.reduce(bilinear_sample_many(fmap, ys, xs))


def rroi_pool_backward(fmap, roi, grid, fn, grad_out, spatial_scale=1.0, sampling_ratio=None):
    fn = get_pool(fn)
    ys, xs = _roi_samples(roi, grid, spatial_scale, sampling_ratio)
    samples = bilinear_sample_many(fmap, ys, xs)
    d_samples = fn.grad_mask(samples) * grad_out[..., None]
    return bilinear_backward(fmap.shape, ys, xs, d_samples)


class RroiPool(Layer):
    """ROI pooling of a fixed box, differentiable with respect to the map."""

    name = "rroi_pool"

    def __init__(self, roi: Roi, grid: int = 2, fn="max", spatial_scale: float = 1.0, sampling_ratio=None):
        self.roi, self.grid, self.fn = roi, grid, get_pool(fn)
        self.spatial_scale, self.sampling_ratio = spatial_scale, sampling_ratio

    def forward(self, x):
        return rroi_pool(x, self.roi, self.grid, self.fn, self.spatial_scale, self.sampling_ratio)

    def backward(self, x, grad_out):
        return LayerGrad(rroi_pool_backward(x, self.roi, self.grid, self.fn, grad_out,
                                            self.spatial_scale, self.sampling_ratio), [])


# --- EAConv ----------------------------------------------------------------------

class EAConv(Layer):
    """Two deformable convolutions followed by replaceable ROI pooling.

    ``roi=None`` pools the full extent of the second layer's output.
    """

    name = "eaconv"

    def __init__(self, first: DeformableLayer, second: DeformableLayer, grid: int = 1, fn="max",
                 roi: Roi | None = None, activation: bool = False, sampling_ratio=None):
        self.first, self.second = first, second
        self.grid, self.fn, self.roi = grid, get_pool(fn), roi
        self.activation = activation
        self.sampling_ratio = sampling_ratio
        self.param_names = tuple(f"first.{n}" for n in first.param_names) + tuple(
            f"second.{n}" for n in second.param_names)

    @property
    def params(self):
        return self.first.params + self.second.params

    def _roi(self, fmap):
        return self.roi or Roi(0.0, 0.0, float(fmap.shape[2]), float(fmap.shape[1]))

    def features(self, x):
        """Output of the two deformable layers before ROI pooling."""
        h1 = self.first.forward(x)
        a1 = np.maximum(h1, 0.0) if self.activation else h1
        h2 = self.second.forward(a1)
        return np.maximum(h2, 0.0) if self.activation else h2

    def forward(self, x):
        f = self.features(x)
        return rroi_pool(f, self._roi(f), self.grid, self.fn, sampling_ratio=self.sampling_ratio)

    def features_backward(self, x, grad_f):
        h1 = self.first.forward(x)
        a1 = np.maximum(h1, 0.0) if self.activation else h1
        if self.activation:
            grad_f = grad_f * (self.second.forward(a1) > 0)
        g2 = self.second.backward(a1, grad_f)
        g_a1 = g2.d_input * (h1 > 0) if self.activation else g2.d_input
        g1 = self.first.backward(x, g_a1)
        return LayerGrad(g1.d_input, g1.d_params + g2.d_params)

    def backward(self, x, grad_out):
        f = self.features(x)
        grad_f = rroi_pool_backward(f, self._roi(f), self.grid, self.fn, grad_out,
                                    sampling_ratio=self.sampling_ratio)
        return self.features_backward(x, grad_f)


def eaconv(block: EAConv, x: np.ndarray) -> np.ndarray:
    return block.forward(x)


# --- level assignment and pyramid fusion -----------------------------------------

def assign_level(roi: Roi, k0: int = 4, reference: float = 224.0,
                 min_level: int | None = None, max_level: int | None = None) -> int:
    """``floor(k0 + log2(sqrt(w*h) / reference))``, optionally clamped.

    The floor of log2 is read off the binary exponent, so doubling both box
    sides moves the unclamped level by exactly one.
    """
    if roi.w <= 0 or roi.h <= 0:
        raise DegenerateRoi(f"ROI needs positive extent, got w={roi.w}, h={roi.h}")
    ratio = math.sqrt(roi.w * roi.h) / reference
    _, exponent = math.frexp(ratio)
    k = k0 + exponent - 1
    if min_level is not None:
        k = max(k, min_level)
    if max_level is not None:
        k = min(k, max_level)
    return k


@dataclass
class FeaturePyramid:
    """Maps at successively halved resolution; level ``l`` cells span ``window(l)`` image pixels."""

    levels: list
    scale_base: float = 1.0

    def __post_init__(self):
        if not self.levels:
            raise ShapeMismatch("a pyramid needs at least one level")
        c = self.levels[0].shape[0]
        for a, b in zip(self.levels, self.levels[1:]):
            if b.shape[0] != c:
                raise ShapeMismatch("all pyramid levels must share a channel count")
            if b.shape[1:] != (math.ceil(a.shape[1] / 2), math.ceil(a.shape[2] / 2)):
                raise ShapeMismatch(f"level {b.shape} is not a 2x reduction of {a.shape}")

    def __len__(self):
        return len(self.levels)

    def window(self, level: int) -> float:
        return self.scale_base * 2 ** level


_HALVE = PoolRegionSpec.square(2)


def _pad_even(fmap):
    _, h, w = fmap.shape
    return np.pad(fmap, ((0, 0), (0, h % 2), (0, w % 2)), mode="edge")


def _unpad_even_grad(grad, shape):
    _, h, w = shape
    if w % 2:
        grad[:, :, w - 1] += grad[:, :, w]
        grad = grad[:, :, :w]
    if h % 2:
        grad[:, h - 1, :] += grad[:, h, :]
        grad = grad[:, :h, :]
    return np.ascontiguousarray(grad)


def build_pyramid(fmap: np.ndarray, depth: int, fn="avg", scale_base: float = 1.0) -> FeaturePyramid:
    """Pyramid by repeated 2x2 replaceable pooling (edge-padded when odd)."""
    levels = [fmap]
    for _ in range(depth - 1):
        levels.append(replaceable_pool_2d(_pad_even(levels[-1]), _HALVE, fn)[0])
    return FeaturePyramid(levels, scale_base)


def build_pyramid_backward(pyr: FeaturePyramid, level_grads, fn="avg") -> np.ndarray:
    """Accumulate per-level gradients down to level 0."""
    grad = level_grads[-1]
    for lvl in range(len(pyr) - 1, 0, -1):
        src = pyr.levels[lvl - 1]
        g = replaceable_pool_2d_backward(_pad_even(src), _HALVE, fn, grad)
        grad = level_grads[lvl - 1] + _unpad_even_grad(g, src.shape)
    return grad


# fused output = mean over the assigned level and its coarser neighbour
FUSIONS = ("mean",)


def _fuse_plan(pyr, roi, k0, reference):
    k = assign_level(roi, k0, reference, 0, len(pyr) - 1)
    return [k] if k + 1 >= len(pyr) else [k, k + 1]


def _level_jobs(pyr, rois, grid, k0, reference, sampling_ratio):
    """Group (roi index, weight, sample grid) by pyramid level."""
    jobs = {}
    for i, roi in enumerate(rois):
        plan = _fuse_plan(pyr, roi, k0, reference)
        for k in plan:
            ys, xs = _roi_samples(roi, grid, 1.0 / pyr.window(k), sampling_ratio)
            jobs.setdefault(k, []).append((i, 1.0 / len(plan), ys, xs))
    return jobs


def _flat(job_list):
    ys = np.concatenate([j[2].ravel() for j in job_list])
    xs = np.concatenate([j[3].ravel() for j in job_list])
    bounds = np.cumsum([0] + [j[2].size for j in job_list])
    return ys, xs, bounds


def fuse_pyramid(pyr: FeaturePyramid, rois, grid: int, fn="max", k0: int = 4, reference: float = 224.0,
                 fusion: str = "mean", sampling_ratio=None) -> np.ndarray:
    """Pool each ROI at its assigned level and fuse with the next coarser level.

    Returns [num_rois, C, grid, grid]. All ROIs pooled from one level share a
    single bilinear gather.
    """
    if fusion not in FUSIONS:
        raise KeyError(f"unknown fusion operator {fusion!r}")
    fn = get_pool(fn)
    c = pyr.levels[0].shape[0]
    out = np.zeros((len(rois), c, grid, grid))
    for k, job_list in sorted(_level_jobs(pyr, rois, grid, k0, reference, sampling_ratio).items()):
        ys, xs, bounds = _flat(job_list)
        samples = bilinear_sample_many(pyr.levels[k], ys, xs)
        for (i, share, gy, _), a, b in zip(job_list, bounds[:-1], bounds[1:]):
            out[i] += share * fn.reduce(samples[:, a:b].reshape((c,) + gy.shape))
    return out


def fuse_pyramid_backward(pyr: FeaturePyramid, rois, grid: int, fn, grad_out, k0: int = 4,
                          reference: float = 224.0, fusion: str = "mean", sampling_ratio=None):
    """Per-level map gradients of :func:`fuse_pyramid`."""
    fn = get_pool(fn)
    c = pyr.levels[0].shape[0]
    grads = [np.zeros_like(l) for l in pyr.levels]
    for k, job_list in _level_jobs(pyr, rois, grid, k0, reference, sampling_ratio).items():
        ys, xs, bounds = _flat(job_list)
        samples = bilinear_sample_many(pyr.levels[k], ys, xs)
        d_samples = np.empty_like(samples)
        for (i, share, gy, _), a, b in zip(job_list, bounds[:-1], bounds[1:]):
            region = samples[:, a:b].reshape((c,) + gy.shape)
            d = fn.grad_mask(region) * (share * grad_out[i])[..., None]
            d_samples[:, a:b] = d.reshape(c, -1)
        grads[k] += bilinear_backward(pyr.levels[k].shape, ys, xs, d_samples)
    return grads


class PyramidFusion(Layer):
    """Level-0 map -> pooled pyramid -> fused ROI features, as one layer."""

    name = "fusion"

    def __init__(self, rois, depth: int = 3, grid: int = 2, fn="max", k0: int = 1, reference: float = 4.0,
                 scale_base: float = 1.0, pyramid_fn="avg", sampling_ratio=None):
        self.rois, self.depth, self.grid, self.fn = list(rois), depth, grid, get_pool(fn)
        self.k0, self.reference, self.scale_base = k0, reference, scale_base
        self.pyramid_fn, self.sampling_ratio = get_pool(pyramid_fn), sampling_ratio

    def forward(self, x):
        pyr = build_pyramid(x, self.depth, self.pyramid_fn, self.scale_base)
        return fuse_pyramid(pyr, self.rois, self.grid, self.fn, self.k0, self.reference,
                            sampling_ratio=self.sampling_ratio)

    def backward(self, x, grad_out):
        pyr = build_pyramid(x, self.depth, self.pyramid_fn, self.scale_base)
        level_grads = fuse_pyramid_backward(pyr, self.rois, self.grid, self.fn, grad_out, self.k0,
                                            self.reference, sampling_ratio=self.sampling_ratio)
        return LayerGrad(build_pyramid_backward(pyr, level_grads, self.pyramid_fn), [])
