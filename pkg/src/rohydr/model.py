"""Full recovery model: extractors, per-modality denoisers and refiners,
fusion, fused-vector refinement, discriminator, and classifier.

The model owns the parameter registry and the noise schedule; training
stages and evaluation drive it through the small composable methods
here.  Every piece can be switched off independently, which is how the
ablation variants are built: with everything off, missing slots are
imputed with raw Gaussian noise and the fused vector goes to the
classifier untouched.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import MODALITIES
from .diffusion import (Denoiser, DiffusionSchedule, FeatureExtractor,
                        apply_unimodal_recon, sample_missing)
from .fusion import Classifier, Discriminator, FusedRefiner, FusionNet
from .nn import (ParamRegistry, ResidualMLP, load_checkpoint,
                 read_checkpoint_meta, save_checkpoint)
from .tensor import ShapeError, Tensor


@dataclass
class ModelConfig:
    """Widths, depths, schedule, and ablation switches."""

    d_a: int = 16
    d_t: int = 32
    d_v: int = 16
    seq_len: int = 8
    n_tokens: int = 4
    token_width: int = 32
    n_heads: int = 4
    ff_hidden: int = 64
    n_blocks: int = 1
    t_width: int = 16
    d_fused: int = 32
    ur_hidden: int = 64
    fused_hidden: int = 64
    disc_hidden: int = 32
    cls_hidden: int = 32
    t_max: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.15
    train_stride: int = 10
    use_hddm: bool = True
    use_ur: bool = True
    use_disc: bool = True
    use_mr: bool = True
    init_seed: int = 0

    def raw_width(self, m):
        return {"a": self.d_a, "t": self.d_t, "v": self.d_v}[m]

    def validate(self):
        if self.seq_len % self.n_tokens != 0:
            raise ShapeError("seq_len must be a multiple of n_tokens")
        if self.token_width % max(self.n_heads, 1) != 0:
            raise ShapeError("token_width must divide evenly into heads")
        if not 1 <= self.train_stride <= self.t_max:
            raise ShapeError("train_stride outside 1..t_max")
        return self


class RohydrModel:
    """Wires the sub-networks together over one parameter registry."""

    def __init__(self, config=None):
        self.cfg = (config or ModelConfig()).validate()
        cfg = self.cfg
        self.registry = ParamRegistry()
        self.schedule = DiffusionSchedule.linear(cfg.t_max, cfg.beta_start,
                                                 cfg.beta_end)
        rng = np.random.default_rng(cfg.init_seed)
        self.extractors = {
            m: FeatureExtractor(self.registry, f"extract.{m}", rng,
                                cfg.raw_width(m), cfg.token_width,
                                cfg.seq_len, cfg.n_tokens)
            for m in MODALITIES}
        self.denoisers = {
            m: Denoiser(self.registry, f"denoise.{m}", rng, cfg.token_width,
                        cfg.n_heads, cfg.ff_hidden, cfg.n_blocks,
                        cfg.t_width, self.schedule)
            for m in MODALITIES}
        self.ur_nets = {
            m: ResidualMLP(self.registry, "unimodal_recon", f"refine.{m}",
                           rng, cfg.token_width, cfg.ur_hidden)
            for m in MODALITIES}
        self.fusion = FusionNet(self.registry, rng, cfg.token_width,
                                cfg.n_heads, cfg.ff_hidden, cfg.d_fused)
        self.fused_refiner = FusedRefiner(self.registry, rng, cfg.d_fused,
                                          cfg.fused_hidden)
        self.discriminator = Discriminator(self.registry, rng, cfg.d_fused,
                                           cfg.disc_hidden)
        self.classifier = Classifier(self.registry, rng, cfg.d_fused,
                                     cfg.cls_hidden)

    # ---- forward pieces ----

    def extract(self, arrays):
        """Per-modality raw sequences -> shared-width token sequences."""
        return {m: self.extractors[m](Tensor(arrays[m])) for m in MODALITIES}

    def recover(self, tokens, missing, rng, stride=None):
        """Fill every missing slot with recovered token sequences.

        Diffusion sampling conditions on the available tokens; the
        per-modality refiners polish the samples.  With diffusion off,
        missing slots start from raw Gaussian noise instead; with the
        refiners off, samples pass through unchanged.  Returns
        {modality: (row_indices, tokens)} for the missing rows only.
        """
        cfg = self.cfg
        if stride is None:
            stride = cfg.train_stride
        if cfg.use_hddm:
            sampled = sample_missing(self.denoisers, tokens, missing,
                                     self.schedule, stride, rng)
        else:
            sampled = {}
            shape_tail = (cfg.n_tokens, cfg.token_width)
            for j, m in enumerate(MODALITIES):
                rows = np.flatnonzero(missing[:, j])
                if len(rows) == 0:
                    continue
                noise = rng.standard_normal((len(rows),) + shape_tail)
                sampled[m] = (rows, Tensor(noise))
        if cfg.use_ur:
            return apply_unimodal_recon(self.ur_nets, sampled)
        return sampled

    def splice(self, tokens, recovered):
        """Replace missing rows of each modality's token tensor with the
        recovered ones; untouched modalities pass through."""
        out = dict(tokens)
        for m, (rows, rec) in recovered.items():
            out[m] = T.scatter_rows(tokens[m], rows, rec)
        return out

    def zero_fill(self, tokens, missing):
        """Replace missing rows of each modality's token tensor with zero
        tokens (the no-recovery baseline).  Masking after extraction also
        cuts the extractor gradient through the blanked rows."""
        out = {}
        for j, m in enumerate(MODALITIES):
            keep = 1.0 - missing[:, j].astype(float)
            out[m] = tokens[m] * keep[:, None, None]
        return out

    def fuse(self, tokens):
        return self.fusion(tokens)

    def refine_fused(self, f_rec):
        if self.cfg.use_mr:
            return self.fused_refiner(f_rec)
        return f_rec

    def discriminate(self, f):
        return self.discriminator(f)

    def classify(self, f):
        return self.classifier(f)

    def fused_recovered(self, arrays, missing, rng, stride=None):
        """The evaluation path: extract whatever is observed (missing
        slots arrive zero-filled), recover, splice, fuse, refine."""
        tokens = self.extract(arrays)
        recovered = self.recover(tokens, missing, rng, stride)
        spliced = self.splice(tokens, recovered)
        return self.refine_fused(self.fuse(spliced))

    def predict(self, arrays, missing, rng, stride=1):
        """Label predictions for a batch, full-resolution reverse walk."""
        with T.no_grad():
            f = self.fused_recovered(arrays, missing, rng, stride)
            return self.classify(f).data.copy()

    # ---- persistence ----

    def save(self, path, extra_meta=None):
        meta = {f"cfg.{f.name}": repr(getattr(self.cfg, f.name))
                for f in dataclasses.fields(ModelConfig)}
        for k, v in (extra_meta or {}).items():
            if k.startswith("cfg."):
                raise ShapeError(f"metadata key {k!r} shadows the config")
            meta[k] = str(v)
        save_checkpoint(self.registry, path, meta)

    @classmethod
    def load(cls, path):
        """Rebuild from a checkpoint directory; returns (model, meta)."""
        fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
        meta = read_checkpoint_meta(path)
        kwargs = {}
        extra = {}
        for k, v in meta.items():
            if k.startswith("cfg."):
                name = k[4:]
                if name not in fields:
                    raise ShapeError(f"unknown config field {name!r}")
                kwargs[name] = _parse_literal(v)
            else:
                extra[k] = v
        model = cls(ModelConfig(**kwargs))
        load_checkpoint(model.registry, path)
        return model, extra


def _parse_literal(text):
    if text == "True":
        return True
    if text == "False":
        return False
    try:
        return int(text)
    except ValueError:
        return float(text)
