#!/usr/bin/env python3
# Two-factor (kc, kf) convolution: trains with extra parameters, folds to one kernel.
import numpy as np

from occdet.dacconv import DacLayer, compose, fold_cost
from occdet.tensor import Conv2d, grad_check

rng = np.random.default_rng(1)
conv = Conv2d.init(rng, 4, 8, 3)
x = rng.normal(size=(4, 32, 32))

# an exact twin of a standard conv, with D = 81 instead of 9
twin = DacLayer.from_conv(conv, depth=81, rng=rng)
print("kc", twin.kc.shape, "kf", twin.kf.shape)
print("twin == conv:", np.array_equal(twin.forward(x), conv.forward(x)))

# after some updates the factors no longer look like the identity, but still fold
twin.kc[...] += rng.normal(0, 0.05, twin.kc.shape)
twin.params_updated()
K = twin.fold()
print("folded kernel", K.shape, "matches compose:", np.array_equal(K, compose(twin.pair)))

# inference cost is that of a plain conv; folding is a one-off
fwd = twin.cost(x.shape)
print("forward ops", fwd.total, "== conv ops", conv.cost(x.shape).total)
print("fold/forward at 32x32: %.4f" % (fold_cost(twin).total / fwd.total))
print("at the default D=9: %.4f" % (fold_cost(DacLayer.from_conv(conv)).total / fwd.total))

# gradients flow to both factors
small = DacLayer.init(rng, 2, 3, 3, depth=12, kc_noise=0.2)
print("grad check max rel err: %.2e" % grad_check(small, rng.normal(size=(2, 6, 6))).max_error)
