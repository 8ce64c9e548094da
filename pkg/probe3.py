"""Scratch: batch-size sweep with recovery-fidelity readout."""
import sys
import time

import numpy as np

from rohydr.data import DatasetSpec, apply_random_missing, generate, MODALITIES
from rohydr.model import ModelConfig, RohydrModel
from rohydr.training import TrainConfig, Trainer
from rohydr import tensor as T

SLIM = dict(token_width=16, ff_hidden=32, d_fused=16, ur_hidden=32,
            fused_hidden=32, disc_hidden=16, cls_hidden=16, train_stride=25)

base = generate(DatasetSpec())
ds = apply_random_missing(base, 0.5, seed=100)


def run(tag, strategy="three_stage", batch_size=128, fidelity=True, **tc):
    model = RohydrModel(ModelConfig(init_seed=0, **SLIM))
    cfg = TrainConfig(strategy=strategy, seed=0, eval_stride=25,
                      lr=2e-3, disc_lr=2e-3, batch_size=batch_size, **tc)
    t0 = time.time()
    res = Trainer(model, cfg).fit(ds)
    dt = time.time() - t0
    msg = f"{tag}: acc2 {res.test.acc2:.4f} best@{res.best_epoch} {dt:.0f}s"
    if fidelity:
        idx = ds.indices("val")
        arrays = {m: ds.arrays[m][idx] for m in MODALITIES}
        missing = ds.mask[idx].astype(bool)
        rng = np.random.default_rng(7)
        with T.no_grad():
            gt = model.extract(arrays)
            rec = model.recover(gt, missing, rng, stride=1)
        parts = []
        for j, m in enumerate(MODALITIES):
            rows, r = rec[m]
            g = gt[m].data[rows]
            mi = gt[m].data[~missing[:, j]].mean(axis=0)
            parts.append(f"{m} {np.mean((r.data - g) ** 2):.2f}"
                         f"/{np.mean((mi - g) ** 2):.2f}")
        msg += "  rec/mi: " + "  ".join(parts)
    print(msg, flush=True)


which = sys.argv[1] if len(sys.argv) > 1 else "b"
if which == "b":
    run("full B64", batch_size=64)
    run("full B48", batch_size=48)
elif which == "b32":
    run("full B32", batch_size=32)
    run("zimp B64", strategy="zero_impute", batch_size=64, fidelity=False)
