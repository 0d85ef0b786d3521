#!/usr/bin/env python3
# Replaceable pooling vs the rotation-max voxel pooling it replaces.
import numpy as np

from occdet.pooling import (PoolRegionSpec, VoxelFeatureSet, get_pool, legacy_pool,
                            peak_transient_bytes, registered_pools, replaceable_pool_2d,
                            replaceable_pool_3d, rp_lift, voxel_workload)

rng = np.random.default_rng(0)

# 256 voxels, 4 rotation variants, 100 point features each
v = VoxelFeatureSet.random(rng, 256, 4, 100)
F, legacy_ops = legacy_pool(v)
print("legacy output", F.shape, legacy_ops.as_dict())

# same data viewed as [K, N_rot, 1, n], pooled per rotation over all n slots
work = voxel_workload(v)
spec = PoolRegionSpec((1, 100))
out, rp_ops = replaceable_pool_3d(work, spec, "max")
print("rp output", out.shape, rp_ops.as_dict())
print("op ratio rp/legacy = %.3f" % (rp_ops.total / legacy_ops.total))

# lift is a view, no copy
t = rng.normal(size=(2, 3, 8, 8))
print("lift shares memory:", np.shares_memory(rp_lift(t), t))

# transient memory
(_, _), legacy_peak = peak_transient_bytes(legacy_pool, v)
(_, _), rp_peak = peak_transient_bytes(replaceable_pool_3d, work, spec, "max")
print("peak bytes legacy %d, rp %d" % (legacy_peak, rp_peak))

# the reduction is swapped by name
img = rng.normal(size=(1, 6, 6))
for name in registered_pools():
    pooled, cost = replaceable_pool_2d(img, PoolRegionSpec.square(2), name)
    print("%-5s" % name, np.round(pooled[0, 0], 3), "ops/region:", get_pool(name).cost(4).total)
