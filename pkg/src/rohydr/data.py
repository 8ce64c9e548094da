"""Synthetic multimodal dataset, missing-modality protocols and file IO.

Each of the three sequence modalities is a noisy affine view of one
shared source (a Gaussian latent vector together with the uniform
label), with its own fixed mixing tensors, noise level and a large
constant offset drawn once from the seed.  Because the source is
shared, a missing modality is predictable from the available ones and
every modality carries the label; because the offsets are large,
zero-filled placeholders sit far from real tokens, which is what
recovery is supposed to fix.  Per-modality noise sets how much each
single view degrades: combining views averages the noise away, so
losing modalities genuinely costs accuracy.

Missing-ness is a per-sample mask over the three modalities.  A masked
slot means the modality is absent for that sample; at least one
modality is always kept.  Masks are built once per run and shared by
all splits.
"""

from __future__ import annotations

import dataclasses
import os

import numpy as np

from .serial import FormatError, read_array, write_array

MODALITIES = ("a", "t", "v")


class ProtocolError(ValueError):
    """A missing-modality request violates the protocol contract."""


class GuardViolation(RuntimeError):
    """Ground truth of a missing modality was touched under guard."""


@dataclasses.dataclass
class DatasetSpec:
    n: int = 2000
    seq_len: int = 8
    d_a: int = 16
    d_t: int = 32
    d_v: int = 16
    latent_dim: int = 8
    noise_a: float = 1.0
    noise_t: float = 1.6
    noise_v: float = 1.0
    seed: int = 0
    split: tuple = (0.7, 0.15, 0.15)

    def dim(self, m):
        return {"a": self.d_a, "t": self.d_t, "v": self.d_v}[m]

    def noise(self, m):
        return {"a": self.noise_a, "t": self.noise_t, "v": self.noise_v}[m]

    def validate(self):
        if self.n <= 0 or self.seq_len <= 0 or self.latent_dim <= 0:
            raise ValueError("dataset sizes must be positive")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split fractions {self.split} must sum to 1")
        if min(self.split) < 0:
            raise ValueError("split fractions must be non-negative")


class Dataset:
    """Arrays for all modalities plus labels, masks and split bounds.

    ``latents`` carries the generator's hidden source when the set was
    drawn in-process; it is a debugging/verification aid and is not
    serialized, so loaded datasets have none.
    """

    def __init__(self, spec, arrays, labels, mask=None, latents=None):
        self.spec = spec
        self.arrays = arrays
        self.labels = labels
        self.latents = latents
        n = len(labels)
        if mask is None:
            mask = np.zeros((n, 3), dtype=np.uint8)
        self.mask = mask
        n_train = round(spec.split[0] * n)
        n_val = round(spec.split[1] * n)
        self._bounds = {"train": (0, n_train),
                        "val": (n_train, n_train + n_val),
                        "test": (n_train + n_val, n)}

    @property
    def n(self):
        return len(self.labels)

    def indices(self, split):
        if split not in self._bounds:
            raise ValueError(f"unknown split {split!r}")
        lo, hi = self._bounds[split]
        return np.arange(lo, hi)

    def with_mask(self, mask):
        mask = np.asarray(mask, dtype=np.uint8)
        if mask.shape != (self.n, 3):
            raise ProtocolError(f"mask shape {mask.shape} does not match "
                                f"({self.n}, 3)")
        if (mask.sum(axis=1) > 2).any():
            raise ProtocolError("some sample lost all modalities")
        return Dataset(self.spec, self.arrays, self.labels, mask,
                       latents=self.latents)

    def batches(self, split, batch_size, rng=None, guard=False):
        idx = self.indices(split)
        if len(idx) == 0:
            raise ValueError(f"split {split!r} is empty")
        if rng is not None:
            idx = idx[rng.permutation(len(idx))]
        for lo in range(0, len(idx), batch_size):
            take = idx[lo:lo + batch_size]
            yield ModalityBatch(
                {m: self.arrays[m][take] for m in MODALITIES},
                self.labels[take], self.mask[take].astype(bool), guard=guard)

    def save(self, path):
        os.makedirs(path, exist_ok=True)
        s = self.spec
        lines = ["format = rohydr-dataset", "version = 1",
                 f"n = {s.n}", f"seq_len = {s.seq_len}",
                 f"d_a = {s.d_a}", f"d_t = {s.d_t}", f"d_v = {s.d_v}",
                 f"latent_dim = {s.latent_dim}",
                 f"noise_a = {s.noise_a!r}", f"noise_t = {s.noise_t!r}",
                 f"noise_v = {s.noise_v!r}", f"seed = {s.seed}",
                 f"split = {s.split[0]!r},{s.split[1]!r},{s.split[2]!r}",
                 f"has_mask = {int(self.mask.any())}"]
        with open(os.path.join(path, "manifest.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
        for m in MODALITIES:
            write_array(os.path.join(path, f"x_{m}.bin"), self.arrays[m])
        write_array(os.path.join(path, "labels.bin"), self.labels)
        if self.mask.any():
            with open(os.path.join(path, "mask.bin"), "wb") as fh:
                fh.write(self.mask.astype(np.uint8).tobytes())


class ModalityBatch:
    """One batch with an access guard separating the two input regimes.

    ``available(m)`` is safe anywhere: rows whose modality is missing
    come back zero-filled.  ``ground_truth(m)`` returns true rows for
    training losses; under guard (inference contract) it raises instead,
    and every call is counted so tests can prove which paths read it.
    """

    def __init__(self, arrays, labels, missing, guard=False):
        self.arrays = arrays
        self.labels = labels
        self.missing = missing
        self.guard = guard
        self.gt_reads = 0

    @property
    def size(self):
        return len(self.labels)

    def missing_rows(self, m):
        return np.flatnonzero(self.missing[:, MODALITIES.index(m)])

    def available(self, m):
        x = self.arrays[m]
        gone = self.missing[:, MODALITIES.index(m)]
        return np.where(gone[:, None, None], 0.0, x)

    def ground_truth(self, m):
        if self.guard:
            raise GuardViolation(f"ground truth of modality {m!r} read "
                                 "under inference guard")
        self.gt_reads += 1
        return self.arrays[m]


def generate(spec):
    """Draw a dataset from the spec; same seed gives bit-identical data.

    The label is uniform on [-3, 3]; its variance-normalized value joins
    the latent coordinates as one more source dimension, so every
    modality sequence is an affine function of (latent, label) plus
    isotropic noise.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    k = spec.latent_dim
    z = rng.standard_normal((spec.n, k))
    y = rng.uniform(-3.0, 3.0, size=spec.n)
    source = np.concatenate([z, y[:, None] / np.sqrt(3.0)], axis=1)
    arrays = {}
    for m in MODALITIES:
        d = spec.dim(m)
        mixing = rng.standard_normal((spec.seq_len, k + 1, d)) \
            / np.sqrt(k + 1)
        # pin the label row's total norm to its expected value so the
        # per-view label signal strength does not swing between seeds
        target = np.sqrt(spec.seq_len * d / (k + 1))
        mixing[:, k, :] *= target / np.linalg.norm(mixing[:, k, :])
        # offsets dominate the signal scale on purpose: a zero-filled
        # placeholder token is then nowhere near any real token
        offset = rng.normal(0.0, 2.0, size=(spec.seq_len, d))
        clean = np.einsum("nk,lkd->nld", source, mixing) + offset
        arrays[m] = clean + spec.noise(m) * rng.standard_normal(clean.shape)
    return Dataset(spec, arrays, y, latents=z)


def load(path):
    manifest = os.path.join(path, "manifest.txt")
    if not os.path.exists(manifest):
        raise FormatError(f"{manifest}: missing dataset manifest")
    fields = {}
    with open(manifest) as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{manifest}:{ln}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            fields[key] = value
    if fields.get("format") != "rohydr-dataset":
        raise FormatError(f"{manifest}: not a dataset manifest")
    if fields.get("version") != "1":
        raise FormatError(f"{manifest}: unsupported version "
                          f"{fields.get('version')}")
    split = tuple(float(x) for x in fields["split"].split(","))
    spec = DatasetSpec(
        n=int(fields["n"]), seq_len=int(fields["seq_len"]),
        d_a=int(fields["d_a"]), d_t=int(fields["d_t"]),
        d_v=int(fields["d_v"]), latent_dim=int(fields["latent_dim"]),
        noise_a=float(fields["noise_a"]), noise_t=float(fields["noise_t"]),
        noise_v=float(fields["noise_v"]), seed=int(fields["seed"]),
        split=split)
    arrays = {}
    for m in MODALITIES:
        arr = read_array(os.path.join(path, f"x_{m}.bin"))
        want = (spec.n, spec.seq_len, spec.dim(m))
        if arr.shape != want:
            raise FormatError(f"x_{m}.bin: shape {arr.shape}, manifest "
                              f"implies {want}")
        arrays[m] = arr
    labels = read_array(os.path.join(path, "labels.bin"))
    if labels.shape != (spec.n,):
        raise FormatError(f"labels.bin: shape {labels.shape}, expected "
                          f"({spec.n},)")
    mask = None
    if int(fields.get("has_mask", "0")):
        mask_path = os.path.join(path, "mask.bin")
        with open(mask_path, "rb") as fh:
            raw = fh.read()
        if len(raw) != spec.n * 3:
            raise FormatError(f"{mask_path}: expected {spec.n * 3} bytes, "
                              f"found {len(raw)}", offset=len(raw))
        mask = np.frombuffer(raw, dtype=np.uint8).reshape(spec.n, 3).copy()
    return Dataset(spec, arrays, labels, mask)


# ---- missing-modality protocols ----

def compute_missing_rate(mask):
    """Fraction of missing (sample, modality) slots."""
    mask = np.asarray(mask)
    return float(mask.astype(np.float64).sum() / mask.size)


def missing_quota(rate, n, n_modalities=3):
    """Exact missing-slot count for a requested rate (banker's rounding)."""
    return round(rate * n * n_modalities)


def apply_random_missing(dataset, rate, seed, clamp=False):
    """Mask exactly ``round(rate*n*3)`` slots, never all three per sample.

    With three modalities and one always kept, at most 2n slots can go
    missing; a request beyond that raises unless ``clamp`` trades the
    overshoot for the feasible maximum (used by evaluation grids whose
    nominal top rate slightly exceeds the ceiling).
    """
    if not 0.0 <= rate <= 0.7:
        raise ProtocolError(f"missing rate {rate} outside [0, 0.7]")
    n = dataset.n
    quota = missing_quota(rate, n)
    ceiling = 2 * n
    if quota > ceiling:
        if not clamp:
            raise ProtocolError(
                f"rate {rate} needs {quota} missing slots but only "
                f"{ceiling} are feasible with one modality always kept")
        quota = ceiling
    rng = np.random.default_rng(seed)
    order = rng.permutation(n * 3)
    mask = np.zeros((n, 3), dtype=np.uint8)
    per_sample = np.zeros(n, dtype=np.int64)
    marked = 0
    for slot in order:
        if marked == quota:
            break
        i = slot // 3
        if per_sample[i] >= 2:
            continue
        mask[i, slot % 3] = 1
        per_sample[i] += 1
        marked += 1
    return dataset.with_mask(mask)


def apply_fixed_availability(dataset, available):
    """Keep exactly the named modalities for every sample."""
    keep = set(available)
    if not keep or not keep.issubset(set(MODALITIES)):
        raise ProtocolError(f"availability set {available!r} must be a "
                            "non-empty subset of a, t, v")
    mask = np.zeros((dataset.n, 3), dtype=np.uint8)
    for j, m in enumerate(MODALITIES):
        if m not in keep:
            mask[:, j] = 1
    return dataset.with_mask(mask)


AVAILABILITY_SETS = ("a", "t", "v", "at", "av", "tv", "atv")
