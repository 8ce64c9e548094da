"""Scratch: stride-1 chain trajectory autopsy on frozen tokens."""
import numpy as np

from rohydr.data import DatasetSpec, apply_random_missing, generate, MODALITIES
from rohydr.diffusion import build_conditioning, hddm_loss, reverse_step
from rohydr.model import ModelConfig, RohydrModel
from rohydr.nn import Adam
from rohydr.training import TrainConfig, Trainer
from rohydr import tensor as T

SLIM = dict(token_width=16, ff_hidden=32, d_fused=16, ur_hidden=32,
            fused_hidden=32, disc_hidden=16, cls_hidden=16, train_stride=25)

base = generate(DatasetSpec())
ds = apply_random_missing(base, 0.5, seed=100)

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

fresh = RohydrModel(ModelConfig(init_seed=1, **SLIM))
opt = Adam(fresh.registry, ("denoiser", "denoiser_var"), lr=2e-3)
rng = np.random.default_rng(0)
order = np.arange(len(tr_idx))
u, B = 0, 64
while u < 2000:
    rng.shuffle(order)
    for lo in range(0, len(order) - B + 1, B):
        take = order[lo:lo + B]
        gt = {m: T.Tensor(toks_tr[m][take]) for m in MODALITIES}
        fresh.registry.zero_all()
        with T.leaf_grads_only():
            hddm_loss(fresh.denoisers, gt, miss_tr[take],
                      fresh.schedule, rng).backward()
        opt.step()
        u += 1
        if u >= 2000:
            break

s = fresh.schedule
gt_va = {m: T.Tensor(toks_va[m]) for m in MODALITIES}
prng = np.random.default_rng(7)
with T.no_grad():
    kv, mask = build_conditioning(gt_va, miss_va)
    m, j = "a", 0
    rows = np.flatnonzero(miss_va[:, j])
    x0 = toks_va[m][rows]
    sub_kv = T.gather_rows(kv, rows)
    sub_mask = mask[rows]
    shape = x0.shape

    def walk(seed):
        r = np.random.default_rng(seed)
        x = T.Tensor(r.standard_normal(shape))
        for t in range(s.t_max, 0, -1):
            eh, lv = fresh.denoisers[m](x, t, sub_kv, sub_mask)
            gbar = s.gamma_bar[t - 1]
            x0h = (x.data - np.sqrt(1 - gbar) * eh.data) / np.sqrt(gbar)
            if t in (50, 40, 30, 20, 10, 5, 1):
                # how good is the implied clean estimate on chain states?
                print(f"  t={t:2d} state-std {x.data.std():.3f} "
                      f"x0h-mse {np.mean((x0h - x0) ** 2):.3f} "
                      f"sig {np.exp(lv.data).mean():.3e}", flush=True)
            noise = r.standard_normal(shape) if t > 1 else None
            x = reverse_step(x, t, eh, lv, s, noise)
        return x.data

    a1 = walk(1)
    print("walk 2:")
    a2 = walk(2)
    mi = toks_va[m][~miss_va[:, j]].mean(axis=0)
    print(f"final: rec1 {np.mean((a1 - x0) ** 2):.3f} "
          f"rec2 {np.mean((a2 - x0) ** 2):.3f} "
          f"cross {np.mean((a1 - a2) ** 2):.3f} "
          f"avg2 {np.mean(((a1 + a2) / 2 - x0) ** 2):.3f} "
          f"mi {np.mean((mi - x0) ** 2):.3f}")
