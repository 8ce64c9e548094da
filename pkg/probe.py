"""Scratch quality probe: do the acceptance margins hold at grid settings?"""

import sys
import time

import numpy as np

from rohydr.data import DatasetSpec, apply_random_missing, generate
from rohydr.model import ModelConfig, RohydrModel
from rohydr.training import TrainConfig, Trainer

SLIM = dict(token_width=16, ff_hidden=32, d_fused=16, ur_hidden=32,
            fused_hidden=32, disc_hidden=16, cls_hidden=16, train_stride=25)

base = generate(DatasetSpec())


def run(tag, mr, strategy, seed=0, mcfg=None, **tc):
    ds = apply_random_missing(base, mr, seed=100 + seed)
    model = RohydrModel(ModelConfig(init_seed=seed, **(mcfg or SLIM)))
    cfg = TrainConfig(strategy=strategy, seed=seed, eval_stride=25, **tc)
    t0 = time.time()
    result = Trainer(model, cfg).fit(ds)
    dt = time.time() - t0
    print(f"{tag}: test acc2 {result.test.acc2:.4f} acc7 {result.test.acc7:.4f} "
          f"f1 {result.test.f1:.4f} best@{result.best_epoch} {dt:.0f}s",
          flush=True)
    return result


which = sys.argv[1] if len(sys.argv) > 1 else "gap"

if which == "gap":
    run("full mr0.5", 0.5, "three_stage")
    run("zimp mr0.5", 0.5, "zero_impute")
elif which == "lr":
    run("full lr2e-3", 0.5, "three_stage", lr=2e-3, disc_lr=2e-3)
    run("full lr2e-3 lc0.3", 0.5, "three_stage", lr=2e-3, disc_lr=2e-3,
        lam_cls=0.3)
    run("full lr3e-3", 0.5, "three_stage", lr=3e-3, disc_lr=3e-3)
    run("zimp lr2e-3", 0.5, "zero_impute", lr=2e-3)
elif which == "batch":
    run("full B64", 0.5, "three_stage", lr=2e-3, disc_lr=2e-3, batch_size=64)
    run("full B96", 0.5, "three_stage", lr=2e-3, disc_lr=2e-3, batch_size=96)
    run("zimp B64", 0.5, "zero_impute", lr=2e-3, batch_size=64)
    run("zimp B96", 0.5, "zero_impute", lr=2e-3, batch_size=96)
elif which == "ends":
    run("full mr0.0", 0.0, "three_stage", lr=2e-3, disc_lr=2e-3)
    run("full mr0.7", 0.7, "three_stage", lr=2e-3, disc_lr=2e-3)
elif which == "one":
    run("one  mr0.5", 0.5, "one_stage", lr=2e-3, disc_lr=2e-3)
