"""Scratch: can the diffusion beat mean-imputation on frozen tokens?"""
import sys
import time

import numpy as np

from rohydr.data import DatasetSpec, apply_random_missing, generate, MODALITIES
from rohydr.diffusion import build_conditioning, hddm_loss, sample_missing
from rohydr.model import ModelConfig, RohydrModel
from rohydr.nn import Adam
from rohydr.training import TrainConfig, Trainer
from rohydr import tensor as T

SLIM = dict(token_width=16, ff_hidden=32, d_fused=16, ur_hidden=32,
            fused_hidden=32, disc_hidden=16, cls_hidden=16, train_stride=25)

base = generate(DatasetSpec())
ds = apply_random_missing(base, 0.5, seed=100)

# get a task-shaped extractor, then freeze its tokens
model = RohydrModel(ModelConfig(init_seed=0, **SLIM))
cfg = TrainConfig(strategy="three_stage", seed=0, eval_stride=25,
                  lr=2e-3, disc_lr=2e-3)
Trainer(model, cfg).fit(ds)

tr_idx = ds.indices("train")
va_idx = ds.indices("val")
with T.no_grad():
    toks_tr = {m: model.extract({m2: ds.arrays[m2][tr_idx]
                                 for m2 in MODALITIES})[m].data
               for m in MODALITIES}
    toks_va = {m: model.extract({m2: ds.arrays[m2][va_idx]
                                 for m2 in MODALITIES})[m].data
               for m in MODALITIES}
miss_tr = ds.mask[tr_idx].astype(bool)
miss_va = ds.mask[va_idx].astype(bool)

# fresh diffusion, trained alone on the frozen tokens
fresh = RohydrModel(ModelConfig(init_seed=1, **SLIM))
opt = Adam(fresh.registry, ("denoiser", "denoiser_var"), lr=2e-3)
rng = np.random.default_rng(0)
n_updates = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
B = 64
t0 = time.time()
order = np.arange(len(tr_idx))
u = 0
while u < n_updates:
    rng.shuffle(order)
    for lo in range(0, len(order) - B + 1, B):
        take = order[lo:lo + B]
        gt = {m: T.Tensor(toks_tr[m][take]) for m in MODALITIES}
        fresh.registry.zero_all()
        with T.leaf_grads_only():
            loss = hddm_loss(fresh.denoisers, gt, miss_tr[take],
                             fresh.schedule, rng)
            loss.backward()
        opt.step()
        u += 1
        if u >= n_updates:
            break
print(f"{u} updates in {time.time() - t0:.0f}s", flush=True)

prng = np.random.default_rng(7)
gt_va = {m: T.Tensor(toks_va[m]) for m in MODALITIES}
with T.no_grad():
    rec = sample_missing(fresh.denoisers, gt_va, miss_va, fresh.schedule,
                         1, prng)
for j, m in enumerate(MODALITIES):
    rows, r = rec[m]
    g = toks_va[m][rows]
    mi = toks_va[m][~miss_va[:, j]].mean(axis=0)
    print(f"{m}: rec {np.mean((r.data - g) ** 2):.3f} "
          f"mi {np.mean((mi - g) ** 2):.3f} "
          f"samp-var {g.var(axis=0).mean():.3f}")

# per-step quality on the frozen tokens
with T.no_grad():
    kv, mask = build_conditioning(gt_va, miss_va)
    m, j = "a", 0
    rows = np.flatnonzero(miss_va[:, j])
    x0 = toks_va[m][rows]
    sub_kv = T.gather_rows(kv, rows)
    sub_mask = mask[rows]
    s = fresh.schedule
    for t_s in (7, 13, 25, 37, 50):
        t = np.full(len(rows), t_s)
        gbar = s.gamma_bar[t - 1].reshape(-1, 1, 1)
        eps = prng.standard_normal(x0.shape)
        x_t = np.sqrt(gbar) * x0 + np.sqrt(1 - gbar) * eps
        eh, _ = fresh.denoisers[m](T.Tensor(x_t), t, sub_kv, sub_mask)
        x0h = (x_t - np.sqrt(1 - gbar) * eh.data) / np.sqrt(gbar)
        print(f"  t={t_s:2d} eps {np.mean((eh.data - eps) ** 2):.3f} "
              f"x0 {np.mean((x0h - x0) ** 2):.3f}")
