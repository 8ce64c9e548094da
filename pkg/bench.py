"""Scratch benchmark: training cost across candidate grid configs."""

import time

import numpy as np

from rohydr.data import DatasetSpec, apply_random_missing, generate
from rohydr.model import ModelConfig, RohydrModel
from rohydr.training import TrainConfig, Trainer, evaluate

ds = apply_random_missing(generate(DatasetSpec()), 0.5, seed=1)

NARROW = dict(token_width=24, ff_hidden=48, d_fused=24, ur_hidden=48,
              fused_hidden=48, disc_hidden=24, cls_hidden=24)
SLIM = dict(token_width=16, ff_hidden=32, d_fused=16, ur_hidden=32,
            fused_hidden=32, disc_hidden=16, cls_hidden=16)


def probe(tag, mcfg, batch):
    model = RohydrModel(mcfg)
    trainer = Trainer(model, TrainConfig(batch_size=batch))
    rng = np.random.default_rng(0)
    batches = list(ds.batches("train", batch))
    trainer.train_batch(batches[0], rng)
    t0 = time.time()
    for b in batches[1:4]:
        trainer.train_batch(b, rng)
    per = (time.time() - t0) / 3
    t0 = time.time()
    evaluate(model, ds, "val", 256, seed=0, stride=10)
    ev = time.time() - t0
    t0 = time.time()
    evaluate(model, ds, "test", 256, seed=0, stride=1)
    fin = time.time() - t0
    epoch = per * len(batches) + ev
    run = 30 * epoch + 2 * fin
    print(f"{tag}: batch {per:.3f}s  epoch {epoch:.2f}s  "
          f"run {run:.0f}s  grid27 {27 * run / 60:.1f}min  "
          f"updates {30 * len(batches)}")


probe("B256 s25 w32", ModelConfig(train_stride=25), 256)
probe("B256 s25 w24", ModelConfig(train_stride=25, **NARROW), 256)
probe("B128 s25 w24", ModelConfig(train_stride=25, **NARROW), 128)
probe("B256 s25 w16", ModelConfig(train_stride=25, **SLIM), 256)
probe("B128 s25 w16", ModelConfig(train_stride=25, **SLIM), 128)
