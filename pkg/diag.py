"""Scratch: recovered-token fidelity + per-timestep denoiser quality."""
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
model = RohydrModel(ModelConfig(init_seed=0, **SLIM))
cfg = TrainConfig(strategy="three_stage", seed=0, eval_stride=25,
                  lr=2e-3, disc_lr=2e-3)
res = Trainer(model, cfg).fit(ds)
print("full acc2", res.test.acc2, flush=True)

idx = ds.indices("val")
arrays = {m: ds.arrays[m][idx] for m in MODALITIES}
missing = ds.mask[idx].astype(bool)
rng = np.random.default_rng(7)
with T.no_grad():
    gt = model.extract(arrays)
    rec = model.recover(gt, missing, rng, stride=1)
for j, m in enumerate(MODALITIES):
    rows, r = rec[m]
    g = gt[m].data[rows]
    mean_tok = gt[m].data[~missing[:, j]].mean(axis=0)
    print(f"{m}: rec-vs-gt {np.mean((r.data - g) ** 2):.4f} "
          f"meanimp-vs-gt {np.mean((mean_tok - g) ** 2):.4f} "
          f"gt var {g.var():.4f} rec var {r.data.var():.4f}")

s = model.schedule
with T.no_grad():
    kv, mask = build_conditioning(gt, missing)
    m, j = "a", 0
    rows = np.flatnonzero(missing[:, j])
    x0 = gt[m].data[rows]
    sub_kv = T.gather_rows(kv, rows)
    sub_mask = mask[rows]
    for t_scalar in (1, 13, 25, 37, 50):
        t = np.full(len(rows), t_scalar)
        gbar = s.gamma_bar[t - 1].reshape(-1, 1, 1)
        eps = rng.standard_normal(x0.shape)
        x_t = np.sqrt(gbar) * x0 + np.sqrt(1 - gbar) * eps
        eps_hat, _ = model.denoisers[m](T.Tensor(x_t), t, sub_kv, sub_mask)
        x0_hat = (x_t - np.sqrt(1 - gbar) * eps_hat.data) / np.sqrt(gbar)
        print(f"t={t_scalar:3d} eps ratio "
              f"{np.mean((eps_hat.data - eps) ** 2) / np.mean(eps ** 2):.3f} "
              f"x0hat mse {np.mean((x0_hat - x0) ** 2):.3f}")

zmodel = RohydrModel(ModelConfig(init_seed=0, **SLIM))
zcfg = TrainConfig(strategy="zero_impute", seed=0, eval_stride=25,
                   lr=2e-3, disc_lr=2e-3)
zres = Trainer(zmodel, zcfg).fit(ds)
print("zimp acc2", zres.test.acc2, flush=True)
