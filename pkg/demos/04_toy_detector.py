#!/usr/bin/env python3
# Toy occluded-scene detector: standard vs two-factor twin, then the MEFEM stage.
# Short budget so this runs in about a minute; the harness runs the full one.
import numpy as np

from occdet.toy import DetectorSpec, SceneSpec, TrainConfig, build_detector, make_dataset, train
from occdet.toy.training import epochs_to_converge

spec = SceneSpec(occlusion_rate=0.5, truncation_rate=0.2)
train_set = make_dataset(48, 1, spec)
eval_set = make_dataset(32, 2, spec)
s = train_set[0]
print("scene", s.image.shape, "objects", s.num_objects, "tiers", s.tiers)

cfg = TrainConfig(epochs=8, seed=0)
std = train(build_detector(DetectorSpec(), 0), train_set, cfg, eval_scenes=eval_set)
dac = train(build_detector(DetectorSpec(slots=("dac",) * 3, dac_depth=81, dac_head=True), 0),
            train_set, cfg, eval_scenes=eval_set)
thr = 1.10 * min(std.loss_curve)
print("standard loss", np.round(std.loss_curve, 3).tolist())
print("dac      loss", np.round(dac.loss_curve, 3).tolist())
print("epochs to converge: standard", epochs_to_converge(std.loss_curve, thr),
      "dac", epochs_to_converge(dac.loss_curve, thr))

mefem = train(build_detector(DetectorSpec(slots=("conv", "conv", "eaconv"), mefem=True), 0),
              train_set, cfg, eval_scenes=eval_set)
for name, m in (("plain", std), ("mefem", mefem)):
    print("%-6s AP easy %.3f  moderate %.3f  hard %.3f" % (name, m.ap_easy, m.ap_moderate, m.ap_hard))
