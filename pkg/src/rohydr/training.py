"""Training loops for the recovery model.

The default strategy runs three optimization stages per batch, each on
its own forward pass:

  1. denoising and refinement of recovered unimodal tokens, updating
     the extractors, denoisers (mean and variance heads), and the
     per-modality refiners;
  2. adversarial alignment of the fused vectors: first the
     discriminator alone on detached inputs, then the recovery path
     against a frozen discriminator;
  3. classification from both the observed and the recovered fused
     vector, updating everything except the discriminator.

Merged variants exist for comparison: ``two_stage`` folds stage 3 into
stage 2's generator update, ``one_stage`` collapses everything into a
single backward pass with one generator step and one discriminator
step.  ``zero_impute`` is the no-recovery baseline: missing token
sequences are replaced by zeros and only the extractors, fusion, and
classifier train.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

import functools

from .data import MODALITIES, Dataset
from .diffusion import hddm_loss, ur_loss
from .fusion import (adversarial_loss, classification_loss,
                     discriminator_loss, mr_loss, reconstruction_loss)
from .metrics import binary_accuracy, f1_positive, seven_class_accuracy
from .nn import GENERATOR_GROUPS, Adam
from .tensor import DomainError, ShapeError, Tensor, leaf_grads_only, no_grad

STAGE1_GROUPS = ("extractor", "denoiser", "denoiser_var", "unimodal_recon")
STAGE2_GROUPS = STAGE1_GROUPS + ("fusion", "multimodal_recon")
STAGE3_GROUPS = STAGE2_GROUPS + ("classifier",)

STRATEGIES = ("three_stage", "two_stage", "one_stage", "zero_impute")


class NumericError(RuntimeError):
    """A loss went non-finite; the message names the stage."""


def _named_stage(name):
    """Convert numeric-domain failures inside a stage (NaN reaching a
    guarded op, for instance) into NumericError tagged with the stage."""
    def wrap(fn):
        @functools.wraps(fn)
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except DomainError as exc:
                raise NumericError(f"numeric failure in {name}: "
                                   f"{exc}") from exc
        return inner
    return wrap


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    disc_lr: float = 1e-3
    lam_gen: float = 1.0
    lam_adv: float = 0.5
    lam_cls: float = 0.5
    strategy: str = "three_stage"
    seed: int = 0
    eval_stride: int = 1

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ShapeError("epochs must be >= 0 and batch_size >= 1")
        if self.strategy not in STRATEGIES:
            raise ShapeError(f"unknown strategy {self.strategy!r}; "
                             f"expected one of {STRATEGIES}")
        if self.lam_gen < 0:
            raise ShapeError("lam_gen must be non-negative")
        for name in ("lam_adv", "lam_cls"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ShapeError(f"{name} must lie in [0, 1], got {v}")
        if self.eval_stride < 1:
            raise ShapeError("eval_stride must be >= 1")
        return self


def stage1_total(l_hddm, l_ur, lam_gen):
    """Normalized blend of the denoising and refinement losses."""
    return (l_hddm + l_ur * lam_gen) * (1.0 / (1.0 + lam_gen))


def stage3_total(l_gt, l_rec, lam_cls):
    """Blend of the two classification losses."""
    return l_gt * lam_cls + l_rec * (1.0 - lam_cls)


@dataclass
class EvalResult:
    acc2: float
    acc7: float
    f1: float


@dataclass
class EpochStats:
    epoch: int
    loss_s1: float
    loss_s2: float
    loss_s3: float
    val: EvalResult


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    val: EvalResult
    test: EvalResult


def evaluate(model, dataset, split, batch_size, seed=0, stride=1,
             zero_impute=False):
    """Metrics over one split, inference regime: the guard forbids
    ground-truth reads, missing inputs arrive zero-filled, and the
    reverse chain runs at the given stride (1 = every step)."""
    rng = np.random.default_rng(seed)
    preds = []
    labels = []
    for batch in dataset.batches(split, batch_size, guard=True):
        arrays = {m: batch.available(m) for m in MODALITIES}
        if zero_impute:
            with no_grad():
                tokens = model.zero_fill(model.extract(arrays),
                                         batch.missing)
                p = model.classify(model.fuse(tokens)).data.copy()
        else:
            p = model.predict(arrays, batch.missing, rng, stride)
        preds.append(p)
        labels.append(batch.labels)
    preds = np.concatenate(preds)
    labels = np.concatenate(labels)
    return EvalResult(binary_accuracy(preds, labels),
                      seven_class_accuracy(preds, labels),
                      f1_positive(preds, labels))


class Trainer:
    """Owns the two optimizers and the per-batch stage updates."""

    def __init__(self, model, config=None):
        self.model = model
        self.cfg = (config or TrainConfig()).validate()
        self.opt = Adam(model.registry, GENERATOR_GROUPS, lr=self.cfg.lr)
        self.opt_disc = Adam(model.registry, ("discriminator",),
                             lr=self.cfg.disc_lr)

    # ---- shared forward pieces ----

    def _tokens(self, batch):
        arrays = {m: batch.ground_truth(m) for m in MODALITIES}
        return self.model.extract(arrays)

    def _fused_pair(self, tokens, batch, rng):
        """(f_gt, f_tilde): fused observed tokens and the refined fusion
        of tokens with recovered slots spliced in."""
        refined = self.model.recover(tokens, batch.missing, rng)
        spliced = self.model.splice(tokens, refined)
        f_gt = self.model.fuse(tokens)
        f_tilde = self.model.refine_fused(self.model.fuse(spliced))
        return f_gt, f_tilde

    def _step(self, loss, opt, groups, stage):
        if not np.isfinite(loss.data).all():
            raise NumericError(f"non-finite loss in {stage}")
        if loss.requires_grad:
            loss.backward()
            opt.step(groups)

    # ---- stages ----

    @_named_stage("stage 1")
    def _stage1(self, batch, rng):
        model = self.model
        tokens = self._tokens(batch)
        zero = Tensor(0.0)
        l_hddm = (hddm_loss(model.denoisers, tokens, batch.missing,
                            model.schedule, rng)
                  if model.cfg.use_hddm else zero)
        if model.cfg.use_ur:
            refined = model.recover(tokens, batch.missing, rng)
            l_ur = ur_loss(refined, tokens)
        else:
            l_ur = zero
        total = stage1_total(l_hddm, l_ur, self.cfg.lam_gen)
        self._step(total, self.opt, STAGE1_GROUPS, "stage 1")
        return float(total.data)

    def _generator_alignment(self, f_gt, f_tilde):
        """Discriminator sub-update, then the recovery-side loss with the
        discriminator frozen.  Returns the loss, not yet stepped."""
        model = self.model
        if not model.cfg.use_disc:
            return reconstruction_loss(f_tilde, f_gt)
        l_d = discriminator_loss(model.discriminate(f_gt.detach()),
                                 model.discriminate(f_tilde.detach()))
        self._step(l_d, self.opt_disc, ("discriminator",),
                   "stage 2 discriminator update")
        with model.registry.frozen(("discriminator",)):
            l_adv = adversarial_loss(model.discriminate(f_tilde))
        return mr_loss(l_adv, reconstruction_loss(f_tilde, f_gt),
                       self.cfg.lam_adv)

    @_named_stage("stage 2")
    def _stage2(self, batch, rng):
        f_gt, f_tilde = self._fused_pair(self._tokens(batch), batch, rng)
        l_mr = self._generator_alignment(f_gt, f_tilde)
        self._step(l_mr, self.opt, STAGE2_GROUPS, "stage 2")
        return float(l_mr.data)

    @_named_stage("stage 3")
    def _stage3(self, batch, rng):
        model = self.model
        f_gt, f_tilde = self._fused_pair(self._tokens(batch), batch, rng)
        total = stage3_total(
            classification_loss(model.classify(f_gt), batch.labels),
            classification_loss(model.classify(f_tilde), batch.labels),
            self.cfg.lam_cls)
        self._step(total, self.opt, STAGE3_GROUPS, "stage 3")
        return float(total.data)

    # ---- strategies ----

    def _three_stage(self, batch, rng):
        return (self._stage1(batch, rng), self._stage2(batch, rng),
                self._stage3(batch, rng))

    @_named_stage("merged stage")
    def _two_stage(self, batch, rng):
        s1 = self._stage1(batch, rng)
        model = self.model
        f_gt, f_tilde = self._fused_pair(self._tokens(batch), batch, rng)
        l_mr = self._generator_alignment(f_gt, f_tilde)
        total = l_mr + stage3_total(
            classification_loss(model.classify(f_gt), batch.labels),
            classification_loss(model.classify(f_tilde), batch.labels),
            self.cfg.lam_cls)
        self._step(total, self.opt, STAGE3_GROUPS, "merged stage")
        return (s1, float(total.data), 0.0)

    @_named_stage("one-stage update")
    def _one_stage(self, batch, rng):
        model = self.model
        cfg = model.cfg
        tokens = self._tokens(batch)
        zero = Tensor(0.0)
        l_hddm = (hddm_loss(model.denoisers, tokens, batch.missing,
                            model.schedule, rng) if cfg.use_hddm else zero)
        if cfg.use_ur:
            refined = model.recover(tokens, batch.missing, rng)
            l_ur = ur_loss(refined, tokens)
            spliced = model.splice(tokens, refined)
        else:
            l_ur = zero
            spliced = model.splice(tokens,
                                   model.recover(tokens, batch.missing, rng))
        f_gt = model.fuse(tokens)
        f_tilde = model.refine_fused(model.fuse(spliced))
        if cfg.use_disc:
            l_d = discriminator_loss(model.discriminate(f_gt.detach()),
                                     model.discriminate(f_tilde.detach()))
            with model.registry.frozen(("discriminator",)):
                l_adv = adversarial_loss(model.discriminate(f_tilde))
            l_mr = mr_loss(l_adv, reconstruction_loss(f_tilde, f_gt),
                           self.cfg.lam_adv)
        else:
            l_d = zero
            l_mr = reconstruction_loss(f_tilde, f_gt)
        total = (l_hddm + l_ur) * self.cfg.lam_gen + l_d + l_mr \
            + stage3_total(
                classification_loss(model.classify(f_gt), batch.labels),
                classification_loss(model.classify(f_tilde), batch.labels),
                self.cfg.lam_cls)
        # one backward; the discriminator sees only l_d (the adversarial
        # branch was recorded frozen), the generator sees everything else
        if not np.isfinite(total.data).all():
            raise NumericError("non-finite loss in one-stage update")
        if total.requires_grad:
            total.backward()
            self.opt.step(STAGE3_GROUPS)
            if cfg.use_disc:
                self.opt_disc.step(("discriminator",))
        return (float(total.data), 0.0, 0.0)

    @_named_stage("zero-impute update")
    def _zero_impute(self, batch, rng):
        # baseline scope: the extractors stay at their initial weights,
        # only the fusion stack and classifier adapt to the blanked slots
        model = self.model
        arrays = {m: batch.available(m) for m in MODALITIES}
        with no_grad():
            tokens = model.extract(arrays)
        tokens = model.zero_fill(tokens, batch.missing)
        pred = model.classify(model.fuse(tokens))
        loss = classification_loss(pred, batch.labels)
        self._step(loss, self.opt, ("fusion", "classifier"),
                   "zero-impute update")
        return (float(loss.data), 0.0, 0.0)

    def train_batch(self, batch, rng):
        self.model.registry.zero_all()
        step = getattr(self, "_" + self.cfg.strategy)
        with leaf_grads_only():
            return step(batch, rng)

    # ---- driver ----

    def fit(self, dataset: Dataset, start_epoch=0, on_epoch=None):
        """Train on the train split, tracking the best validation epoch.

        Restores the best-validation parameters before the final test
        evaluation.  ``start_epoch`` shifts epoch numbering when resuming
        from a checkpoint; the configured ``epochs`` stays the target
        total, so resuming at 10 of 30 runs twenty more.
        """
        cfg = self.cfg
        shuffle_rng = np.random.default_rng(cfg.seed)
        sample_rng = np.random.default_rng(cfg.seed + 1)
        eval_seed = cfg.seed + 2
        zero_imp = cfg.strategy == "zero_impute"
        history = []
        best = (-1.0, start_epoch, None)
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            sums = np.zeros(3)
            count = 0
            for batch in dataset.batches("train", cfg.batch_size,
                                         rng=shuffle_rng):
                sums += self.train_batch(batch, sample_rng)
                count += 1
            val = evaluate(self.model, dataset, "val", cfg.batch_size,
                           seed=eval_seed, stride=cfg.eval_stride,
                           zero_impute=zero_imp)
            stats = EpochStats(epoch, *(sums / max(count, 1)), val)
            history.append(stats)
            if on_epoch is not None:
                on_epoch(stats)
            if val.acc2 > best[0]:
                best = (val.acc2, epoch, self.model.registry.snapshot())
        if best[2] is not None:
            self.model.registry.restore(best[2])
        # reported metrics always run the full reverse chain; eval_stride
        # only coarsens the per-epoch tracking above
        val = evaluate(self.model, dataset, "val", cfg.batch_size,
                       seed=eval_seed, stride=1, zero_impute=zero_imp)
        test = evaluate(self.model, dataset, "test", cfg.batch_size,
                        seed=eval_seed, stride=1, zero_impute=zero_imp)
        return TrainResult(history, best[1], val, test)


# ---- metrics log ----

CSV_HEADER = "protocol,mr_or_set,seed,epoch,acc2,acc7,f1,loss_s1,loss_s2,loss_s3"


@dataclass
class MetricsRow:
    protocol: str
    mr_or_set: str
    seed: int
    epoch: int
    acc2: float
    acc7: float
    f1: float
    loss_s1: float
    loss_s2: float
    loss_s3: float

    def render(self):
        nums = ",".join(f"{v:.6f}" for v in
                        (self.acc2, self.acc7, self.f1, self.loss_s1,
                         self.loss_s2, self.loss_s3))
        return f"{self.protocol},{self.mr_or_set},{self.seed}," \
               f"{self.epoch},{nums}"


def write_metrics_csv(path, rows):
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for row in rows:
            fh.write(row.render() + "\n")


def read_metrics_csv(path):
    """Parse a metrics log back into rows (used by the plot command)."""
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ShapeError(f"{path}: unexpected header {header!r}")
        for ln in fh:
            ln = ln.strip()
            if not ln:
                continue
            parts = ln.split(",")
            if len(parts) != 10:
                raise ShapeError(f"{path}: bad row {ln!r}")
            rows.append(MetricsRow(parts[0], parts[1], int(parts[2]),
                                   int(parts[3]), *map(float, parts[4:])))
    return rows
