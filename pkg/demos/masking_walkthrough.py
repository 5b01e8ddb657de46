"""Walk one clip through the masked temporal path and print shapes and plans."""

import numpy as np

from fmnet import autograd as ag
from fmnet.masking import random_mask_plan, uniform_mask_plan
from fmnet.model import FMNetConfig, build_model
from fmnet.posenc import add_positional
from fmnet.synthetic import SceneDistribution, make_clips

clip = make_clips(1, seed=3, dist=SceneDistribution(height=16, width=16, length=12))[0]
model = build_model(FMNetConfig(height=16, width=16))

print(uniform_mask_plan(12, 2).log_line())
print(random_mask_plan(12, 2, np.random.default_rng(0)).log_line())

with ag.no_grad(), ag.count_ops() as ops:
    f, skips = model.spatial_features(clip.frames)
    p = add_positional(f)
    t_r = model.temporal_features(f, uniform_mask_plan(12, 2))
    depth = model.predictor(t_r.maps, skips)

print("spatial features", f.maps.shape, "skips", [s.shape for s in skips])
print("temporal features", t_r.maps.shape, "positions", t_r.positions)
print("depth", depth.shape, "range", float(depth.data.min()), float(depth.data.max()))
for scope in ("encoder/attention", "decoder/attention", "total"):
    print(f"{scope:18s} {ops[scope]:>12,d} MACs")
