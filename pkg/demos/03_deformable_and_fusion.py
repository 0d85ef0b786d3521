#!/usr/bin/env python3
# Deformable sampling, ROI pooling with a named reduction, and pyramid fusion.
import numpy as np

from occdet.mefem import (DeformableLayer, EAConv, Roi, assign_level, bilinear_sample,
                          build_pyramid, deform_conv, fuse_pyramid, rroi_pool)
from occdet.tensor import conv2d

rng = np.random.default_rng(2)
x = rng.normal(size=(2, 12, 12))

print("bilinear at (0.5, 0.5):", bilinear_sample(np.array([[[0.0, 1.0], [2.0, 3.0]]]), 0.5, 0.5))

# zero offsets -> ordinary convolution
layer = DeformableLayer.init(rng, 2, 4, padding=0, bias=False)
print("zero offsets == conv:", np.allclose(deform_conv(layer, x), conv2d(x, layer.weight), atol=1e-12))

# every tap shifted one column right
layer.offset_bias[1::2] = 1.0
shifted = np.zeros_like(x)
shifted[:, :, :-1] = x[:, :, 1:]
print("+1 column == conv of shifted input:", np.allclose(deform_conv(layer, x), conv2d(shifted, layer.weight)))

# ROI pooling, same box, different reductions
roi = Roi(2.5, 3.0, 6.0, 5.0)
for fn in ("max", "avg", "soft"):
    print(fn, np.round(rroi_pool(x, roi, 2, fn)[0], 3).tolist())

# two deformable layers then ROI pooling
block = EAConv(DeformableLayer.init(rng, 2, 4), DeformableLayer.init(rng, 4, 4), grid=2, fn="max", roi=roi)
print("eaconv output", block.forward(x).shape)

# level assignment: doubling the box moves one level up
for side in (56, 112, 224, 448):
    print("box %3d -> level %d" % (side, assign_level(Roi(0, 0, side, side), k0=4)))

# pooled at the assigned level, averaged with the next coarser one
pyr = build_pyramid(x, 3)
print("pyramid", [lvl.shape for lvl in pyr.levels])
fused = fuse_pyramid(pyr, [Roi(0, 0, 4, 4), Roi(1, 1, 10, 10)], 2, "avg", k0=1, reference=4.0)
print("fused", fused.shape)
