"""Scratch: margin check, full vs zimp (frozen extractor) vs all-off."""
import sys
import numpy as np
from rohydr.data import DatasetSpec, apply_random_missing, generate
from rohydr.model import ModelConfig, RohydrModel
from rohydr.training import TrainConfig, Trainer

SLIM = dict(token_width=16, ff_hidden=32, d_fused=16, ur_hidden=32,
            fused_hidden=32, disc_hidden=16, cls_hidden=16, train_stride=25)

which = sys.argv[1]
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
base = generate(DatasetSpec())
ds = apply_random_missing(base, 0.5, seed=100 + seed)
toggles = {}
strategy = "three_stage"
if which == "zimp":
    strategy = "zero_impute"
elif which == "alloff":
    toggles = dict(use_hddm=False, use_ur=False, use_disc=False,
                   use_mr=False)
model = RohydrModel(ModelConfig(init_seed=seed, **SLIM, **toggles))
cfg = TrainConfig(strategy=strategy, seed=seed, eval_stride=25,
                  lr=2e-3, disc_lr=2e-3)
res = Trainer(model, cfg).fit(ds)
print(which, seed, "test acc2", res.test.acc2, "f1", res.test.f1, flush=True)
