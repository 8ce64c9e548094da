"""Scratch: stage-1-only training, per-step diagnostics, variant knobs."""
import sys
import time

import numpy as np

from rohydr.data import DatasetSpec, apply_random_missing, generate, MODALITIES
from rohydr.diffusion import build_conditioning
from rohydr.model import ModelConfig, RohydrModel
from rohydr.training import TrainConfig, Trainer
from rohydr import tensor as T

SLIM = dict(token_width=16, ff_hidden=32, d_fused=16, ur_hidden=32,
            fused_hidden=32, disc_hidden=16, cls_hidden=16, train_stride=25)

base = generate(DatasetSpec())
ds = apply_random_missing(base, 0.5, seed=100)


def stage1_only(tag, epochs=30, batch_size=128, lr=2e-3, mcfg=None,
                cross_init=0.0):
    model = RohydrModel(ModelConfig(init_seed=0, **(mcfg or SLIM)))
    if cross_init:
        r = np.random.default_rng(12345)
        for m in MODALITIES:
            for _, cross, _ in model.denoisers[m].blocks:
                w = cross.attn.wo.w
                w.data[...] = cross_init * r.standard_normal(w.shape)
    cfg = TrainConfig(strategy="three_stage", seed=0, eval_stride=25,
                      lr=lr, disc_lr=lr, epochs=epochs,
                      batch_size=batch_size)
    tr = Trainer(model, cfg)
    rng = np.random.default_rng(0)
    t0 = time.time()
    for ep in range(epochs):
        for batch in ds.batches("train", batch_size,
                                rng=np.random.default_rng(1000 + ep)):
            tr.model.registry.zero_all()
            with T.leaf_grads_only():
                tr._stage1(batch, rng)
    dt = time.time() - t0

    idx = ds.indices("val")
    arrays = {m: ds.arrays[m][idx] for m in MODALITIES}
    missing = ds.mask[idx].astype(bool)
    prng = np.random.default_rng(7)
    with T.no_grad():
        gt = model.extract(arrays)
        rec = model.recover(gt, missing, prng, stride=1)
        kv, mask = build_conditioning(gt, missing)
    line = []
    for j, m in enumerate(MODALITIES):
        rows, r = rec[m]
        g = gt[m].data[rows]
        mean_tok = gt[m].data[~missing[:, j]].mean(axis=0)
        line.append(f"{m} rec {np.mean((r.data - g) ** 2):.3f}"
                    f"/mi {np.mean((mean_tok - g) ** 2):.3f}")
    print(f"{tag}: {'  '.join(line)}  ({dt:.0f}s)", flush=True)
    with T.no_grad():
        m, j = "a", 0
        rows = np.flatnonzero(missing[:, j])
        x0 = gt[m].data[rows]
        sub_kv = T.gather_rows(kv, rows)
        sub_mask = mask[rows]
        s = model.schedule
        for t_s in (1, 7, 13, 25, 37, 50):
            t = np.full(len(rows), t_s)
            gbar = s.gamma_bar[t - 1].reshape(-1, 1, 1)
            eps = prng.standard_normal(x0.shape)
            x_t = np.sqrt(gbar) * x0 + np.sqrt(1 - gbar) * eps
            eh, lv = model.denoisers[m](T.Tensor(x_t), t, sub_kv, sub_mask)
            x0h = (x_t - np.sqrt(1 - gbar) * eh.data) / np.sqrt(gbar)
            print(f"  t={t_s:2d} eps {np.mean((eh.data - eps) ** 2):.3f} "
                  f"x0 {np.mean((x0h - x0) ** 2):.3f} "
                  f"sig2 {np.exp(lv.data).mean():.2e} "
                  f"[{np.exp(s.log_var_bounds(t)[0].mean()):.1e},"
                  f"{np.exp(s.log_var_bounds(t)[1].mean()):.1e}]", flush=True)
    return model


which = sys.argv[1] if len(sys.argv) > 1 else "base"
if which == "base":
    stage1_only("s1 base")
elif which == "x":
    stage1_only("s1 cross-init 0.1", cross_init=0.1)
elif which == "b48":
    stage1_only("s1 B48", batch_size=48)
elif which == "b48x":
    stage1_only("s1 B48 cross-init", batch_size=48, cross_init=0.1)
