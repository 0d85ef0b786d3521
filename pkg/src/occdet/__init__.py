"""Dense float64 layers with hand-written gradients: replaceable pooling,
two-factor convolutions, deformable sampling with ROI pyramid fusion, and a
toy occluded-object detector to exercise them."""

__version__ = "0.1.0"

from . import dacconv, mefem, pooling, tensor  # noqa: E402
from .dacconv import DacKernelPair, DacLayer  # noqa: E402
from .errors import *  # noqa: E402,F401,F403
from .mefem import (  # noqa: E402
    DeformableLayer,
    EAConv,
    FeaturePyramid,
    PyramidFusion,
    Roi,
    RroiPool,
    assign_level,
    bilinear_sample,
    build_pyramid,
    deform_conv,
    fuse_pyramid,
    rroi_pool,
)
from .pooling import (  # noqa: E402
    PoolFn,
    PoolRegionSpec,
    RPPool,
    VoxelFeatureSet,
    get_pool,
    legacy_pool,
    register_pool,
    replaceable_pool_2d,
    replaceable_pool_3d,
    rp_drop,
    rp_lift,
    rp_pool,
)
from .tensor import Conv2d, Layer, LayerGrad, OpCounter, conv2d, grad_check  # noqa: E402
