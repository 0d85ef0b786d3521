"""A miniature single-class detector built from the library's layers.

The backbone is three conv-like slots separated by replaceable pooling. Each
slot is a standard convolution, a two-factor :class:`DacLayer`, or a pair of
deformable convolutions (the convolutional half of an EAConv block). A 1x1
dense head predicts objectness and a box per cell. With ``mefem=True`` a
second stage pools every proposal from a feature pyramid (replaceable ROI
pooling at the assigned level fused with the next coarser one) and a linear
layer rescores and refines it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..dacconv import DacLayer
from ..mefem import (
    DeformableLayer,
    Roi,
    build_pyramid,
    build_pyramid_backward,
    fuse_pyramid,
    fuse_pyramid_backward,
)
from ..pooling import PoolRegionSpec, RPPool
from ..tensor import Conv2d, Layer, ReLU
from .evaluation import iou, nms

SLOT_TYPES = ("conv", "dac", "eaconv")
BOX_REF = 16.0


@dataclass(frozen=True)
class DetectorSpec:
    slots: tuple = ("conv", "conv", "conv")
    channels: tuple = (8, 16, 16)
    pool2d: str = "max"
    dac_depth: int | None = None
    dac_head: bool = False
    mefem: bool = False
    rroi: str = "max"
    grid: int = 2
    pyramid_depth: int = 3
    k0: int = 1
    reference: float = 16.0
    proposals: int = 8

    def __post_init__(self):
        if len(self.slots) != len(self.channels):
            raise ValueError("one channel count per backbone slot")
        for s in self.slots:
            if s not in SLOT_TYPES:
                raise ValueError(f"unknown slot type {s!r}; expected one of {SLOT_TYPES}")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _bce(z, t):
    # numerically stable binary cross-entropy on logits
    return np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))


def _smooth_l1(d):
    a = np.abs(d)
    return np.where(a < 1.0, 0.5 * d * d, a - 0.5), np.clip(d, -1.0, 1.0)


class RoiHead:
    """Second stage: pyramid-fused ROI features -> (score logit, 4 box deltas)."""

    def __init__(self, rng, channels: int, spec: DetectorSpec, stride: int):
        self.spec = spec
        self.stride = stride
        fan_in = channels * spec.grid * spec.grid
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = rng.uniform(-bound, bound, size=(5, fan_in))
        self.bias = np.zeros(5)

    def params(self):
        return [("roi.weight", self.weight), ("roi.bias", self.bias)]

    def features(self, fmap, rois):
        pyr = build_pyramid(fmap, self.spec.pyramid_depth, "avg", float(self.stride))
        pooled = fuse_pyramid(pyr, rois, self.spec.grid, self.spec.rroi, self.spec.k0, self.spec.reference)
        return pyr, pooled.reshape(len(rois), -1)

    def forward(self, fmap, rois):
        pyr, feats = self.features(fmap, rois)
        return pyr, feats, feats @ self.weight.T + self.bias

    def backward(self, pyr, feats, rois, grad_out):
        d_w = grad_out.T @ feats
        d_b = grad_out.sum(axis=0)
        d_feats = (grad_out @ self.weight).reshape(len(rois), -1, self.spec.grid, self.spec.grid)
        level_grads = fuse_pyramid_backward(pyr, rois, self.spec.grid, self.spec.rroi, d_feats,
                                            self.spec.k0, self.spec.reference)
        return build_pyramid_backward(pyr, level_grads, "avg"), [d_w, d_b]


def encode_deltas(roi: Roi, gt: Roi):
    return np.array([
        (gt.x + gt.w / 2 - roi.x - roi.w / 2) / roi.w,
        (gt.y + gt.h / 2 - roi.y - roi.h / 2) / roi.h,
        math.log(gt.w / roi.w),
        math.log(gt.h / roi.h),
    ])


def apply_deltas(roi: Roi, d) -> Roi:
    d = np.clip(d, -4.0, 4.0)
    cx = roi.x + roi.w / 2 + d[0] * roi.w
    cy = roi.y + roi.h / 2 + d[1] * roi.h
    w = roi.w * math.exp(d[2])
    h = roi.h * math.exp(d[3])
    return Roi(cx - w / 2, cy - h / 2, w, h)


class ToyDetector:
    def __init__(self, backbone: list, head: Conv2d, stride: int, spec: DetectorSpec, roi_head: RoiHead | None = None):
        self.backbone = backbone
        self.head = head
        self.stride = stride
        self.spec = spec
        self.roi_head = roi_head

    # --- parameters ---------------------------------------------------------------

    def named_params(self):
        """(name, array, owning layer or None) in a fixed order."""
        out = []
        for i, layer in enumerate(self.backbone):
            for n, p in zip(layer.param_names, layer.params):
                out.append((f"backbone.{i}.{layer.name}.{n}", p, layer))
        for n, p in zip(self.head.param_names, self.head.params):
            out.append((f"head.{n}", p, self.head))
        if self.roi_head is not None:
            out.extend((n, p, None) for n, p in self.roi_head.params())
        return out

    def params_updated(self):
        for layer in self.backbone:
            layer.params_updated()

    # --- dense stage ----------------------------------------------------------------

    def backbone_forward(self, image):
        acts = [image]
        for layer in self.backbone:
            acts.append(layer.forward(acts[-1]))
        return acts

    def backbone_backward(self, acts, grad):
        grads = []
        for layer, x in zip(reversed(self.backbone), reversed(acts[:-1])):
            g = layer.backward(x, grad)
            grads.append(g.d_params)
            grad = g.d_input
        return [p for layer_grads in reversed(grads) for p in layer_grads]

    def dense_targets(self, scene, shape):
        _, hf, wf = shape
        obj = np.zeros((hf, wf))
        box = np.zeros((4, hf, wf))
        for b in scene.boxes:  # paint order: later (front) objects win shared cells
            cx, cy = (b.x + b.w / 2) / self.stride, (b.y + b.h / 2) / self.stride
            col, row = min(int(cx), wf - 1), min(int(cy), hf - 1)
            obj[row, col] = 1.0
            box[:, row, col] = (cx - col, cy - row, math.log(b.w / BOX_REF), math.log(b.h / BOX_REF))
        return obj, box

    def dense_loss(self, out, scene):
        obj_t, box_t = self.dense_targets(scene, out.shape)
        logits = out[0]
        pos = obj_t > 0
        n_pos, n_neg = max(int(pos.sum()), 1), max(int((~pos).sum()), 1)
        bce = _bce(logits, obj_t)
        loss = bce[pos].sum() / n_pos + bce[~pos].sum() / n_neg
        grad = np.zeros_like(out)
        p = _sigmoid(logits)
        grad[0] = np.where(pos, (p - obj_t) / n_pos, (p - obj_t) / n_neg)
        sl, dsl = _smooth_l1(out[1:] - box_t)
        loss += (sl * pos).sum() / n_pos
        grad[1:] = dsl * pos / n_pos
        return loss, grad

    def decode(self, out, threshold: float = 0.05, limit: int = 20):
        scores = _sigmoid(out[0])
        rows, cols = np.nonzero(scores > threshold)
        order = np.argsort(-scores[rows, cols], kind="stable")[:limit]
        dets = []
        for k in order:
            r, c = rows[k], cols[k]
            cx = (c + out[1, r, c]) * self.stride
            cy = (r + out[2, r, c]) * self.stride
            w = BOX_REF * math.exp(min(out[3, r, c], 4.0))
            h = BOX_REF * math.exp(min(out[4, r, c], 4.0))
            dets.append((float(scores[r, c]), Roi(cx - w / 2, cy - h / 2, w, h)))
        return dets

    # --- second stage -----------------------------------------------------------------

    def training_rois(self, scene, dense_dets, rng):
        rois = []
        for b in scene.boxes:
            for _ in range(2):
                s = np.exp(rng.uniform(-0.2, 0.2, size=2))
                shift = rng.uniform(-0.2, 0.2, size=2)
                w, h = b.w * s[0], b.h * s[1]
                cx = b.x + b.w / 2 + shift[0] * b.w
                cy = b.y + b.h / 2 + shift[1] * b.h
                rois.append(Roi(cx - w / 2, cy - h / 2, w, h))
        rois.extend(d[1] for d in nms(dense_dets, 0.5, self.spec.proposals))
        return rois

    def roi_loss(self, raw, rois, scene):
        n = len(rois)
        grad = np.zeros_like(raw)
        loss = 0.0
        labels = np.zeros(n)
        deltas = np.zeros((n, 4))
        for i, r in enumerate(rois):
            ious = [iou(r, g) for g in scene.boxes]
            j = int(np.argmax(ious)) if ious else -1
            if j >= 0 and ious[j] >= 0.5:
                labels[i] = 1.0
                deltas[i] = encode_deltas(r, scene.boxes[j])
        loss += _bce(raw[:, 0], labels).mean()
        grad[:, 0] = (_sigmoid(raw[:, 0]) - labels) / n
        pos = labels > 0
        n_pos = max(int(pos.sum()), 1)
        sl, dsl = _smooth_l1(raw[:, 1:] - deltas)
        loss += (sl * pos[:, None]).sum() / n_pos
        grad[:, 1:] = dsl * pos[:, None] / n_pos
        return loss, grad

    # --- public API -------------------------------------------------------------------

    def loss_and_grads(self, scene, rng=None):
        """Total loss and gradients aligned with :meth:`named_params`."""
        acts = self.backbone_forward(scene.image)
        fmap = acts[-1]
        out = self.head.forward(fmap)
        loss, g_out = self.dense_loss(out, scene)
        hg = self.head.backward(fmap, g_out)
        d_fmap = hg.d_input
        roi_grads = []
        if self.roi_head is not None:
            rng = rng or np.random.default_rng(0)
            rois = self.training_rois(scene, self.decode(out), rng)
            pyr, feats, raw = self.roi_head.forward(fmap, rois)
            l2, g_raw = self.roi_loss(raw, rois, scene)
            loss += l2
            d_f2, roi_grads = self.roi_head.backward(pyr, feats, rois, g_raw)
            d_fmap = d_fmap + d_f2
        grads = self.backbone_backward(acts, d_fmap) + hg.d_params + roi_grads
        return float(loss), grads

    def predict_raw(self, image):
        fmap = self.backbone_forward(image)[-1]
        return fmap, self.head.forward(fmap)

    def predict(self, image, limit: int = 10):
        fmap, out = self.predict_raw(image)
        dets = nms(self.decode(out), 0.5, limit)
        if self.roi_head is None or not dets:
            return dets
        rois = [d[1] for d in dets]
        _, _, raw = self.roi_head.forward(fmap, rois)
        refined = []
        for (s1, r), row in zip(dets, raw):
            s2 = float(_sigmoid(row[0]))
            refined.append((math.sqrt(s1 * s2), apply_deltas(r, row[1:])))
        return nms(refined, 0.5, limit)


def _slot(rng, kind, c_in, c_out, spec):
    if kind == "eaconv":
        return [DeformableLayer.init(rng, c_in, c_out), ReLU(), DeformableLayer.init(rng, c_out, c_out)]
    conv = Conv2d.init(rng, c_in, c_out, 3)
    if kind == "dac":
        # same draws as the standard slot, so the twin starts from an identical kernel
        return [DacLayer.from_conv(conv, spec.dac_depth, np.random.default_rng(rng.integers(2**31)))]
    return [conv]


def build_detector(spec: DetectorSpec, seed: int, in_channels: int = 1) -> ToyDetector:
    """Deterministically initialise a detector; slot types change layers, not draws."""
    rng = np.random.default_rng(seed)
    layers = []
    c_in = in_channels
    pool = RPPool(PoolRegionSpec.square(2), spec.pool2d)
    for i, (kind, c_out) in enumerate(zip(spec.slots, spec.channels)):
        slot_rng = np.random.default_rng([seed, i])
        layers.extend(_slot(slot_rng, kind, c_in, c_out, spec))
        layers.append(ReLU())
        if i < 2:
            layers.append(pool)
        c_in = c_out
    head_rng = np.random.default_rng([seed, 100])
    head = Conv2d.init(head_rng, c_in, 5, 1)
    head.bias[0] = -2.0
    if spec.dac_head:
        head = DacLayer.from_conv(head, spec.dac_depth, np.random.default_rng([seed, 102]))
    roi_head = RoiHead(np.random.default_rng([seed, 101]), c_in, spec, 4) if spec.mefem else None
    return ToyDetector(layers, head, 4, spec, roi_head)
