"""Diffusion-based recovery of missing unimodal token sequences.

The forward process gradually mixes a clean token sequence x_0 with
Gaussian noise.  With per-step retention gamma_t = 1 - beta_t and
running product gbar_t, the closed-form marginal is

    x_t = sqrt(gbar_t) x_0 + sqrt(1 - gbar_t) eps .

A conditional denoiser predicts the noise (and a per-coordinate log
variance) from x_t, the timestep, and tokens of the modalities that are
present; the reverse update

    x_{t-1} = (x_t - beta_t / sqrt(1 - gbar_t) * eps_hat) / sqrt(gamma_t)
              + sigma * noise

walks from pure noise back to a clean sequence.  Training-time sampling
visits a strided subset of steps so gradients can flow through the whole
chain at tolerable cost; evaluation walks every step.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import MODALITIES
from .nn import (AttentionLayer, BiLSTM, Conv1d, FeedForwardLayer, LayerNorm,
                 Linear, MASK_OFF)
from .tensor import ShapeError, Tensor


class DiffusionSchedule:
    """Noise schedule; step indices are 1-based (t in 1..t_max)."""

    def __init__(self, betas):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) == 0:
            raise ShapeError("schedule needs a 1-d, non-empty beta array")
        if (betas <= 0.0).any() or (betas >= 1.0).any():
            raise ShapeError("betas must lie strictly inside (0, 1)")
        if (np.diff(betas) < 0.0).any():
            raise ShapeError("betas must be non-decreasing")
        self.beta = betas
        self.t_max = len(betas)
        self.gamma = 1.0 - betas
        self.gamma_bar = np.cumprod(self.gamma)
        self.gamma_bar_prev = np.concatenate([[1.0], self.gamma_bar[:-1]])
        # one-step posterior variance; zero at t=1, floored before logs
        self.beta_tilde = ((1.0 - self.gamma_bar_prev)
                           / (1.0 - self.gamma_bar) * betas)
        self._var_floor = 1e-10

    @classmethod
    def linear(cls, t_max=50, start=1e-4, end=0.15):
        return cls(np.linspace(start, end, t_max))

    def _index(self, t):
        t = np.asarray(t)
        if ((t < 1) | (t > self.t_max)).any():
            raise ShapeError(f"timestep {t} outside 1..{self.t_max}")
        return t - 1

    def coeff(self, name, t):
        """Schedule array value(s) at 1-based step(s) t."""
        return getattr(self, name)[self._index(t)]

    def log_var_bounds(self, t):
        """Per-step clamp range [log beta_tilde, log beta] for the
        learned variance."""
        i = self._index(t)
        lo = np.log(np.maximum(self.beta_tilde[i], self._var_floor))
        hi = np.log(self.beta[i])
        return lo, hi

    def strided_steps(self, stride):
        """Descending steps from t_max to 1 visiting every stride-th
        step; both endpoints always included."""
        if not 1 <= stride <= self.t_max:
            raise ShapeError(f"stride {stride} outside 1..{self.t_max}")
        steps = list(range(self.t_max, 0, -stride))
        if steps[-1] != 1:
            steps.append(1)
        return steps


def forward_diffuse(x0, t, eps, schedule):
    """Closed-form marginal draw x_t; plain arrays, no graph.

    ``t`` may be a scalar or one value per instance; t=0 returns x0
    (nothing diffused yet)."""
    x0 = np.asarray(x0)
    t = np.asarray(t)
    if ((t < 0) | (t > schedule.t_max)).any():
        raise ShapeError(f"timestep outside 0..{schedule.t_max}")
    gbar = np.where(t == 0, 1.0,
                    schedule.gamma_bar[np.maximum(t, 1) - 1])
    shape = (-1,) + (1,) * (x0.ndim - 1) if gbar.ndim else ()
    gbar = gbar.reshape(shape) if gbar.ndim else gbar
    return np.sqrt(gbar) * x0 + np.sqrt(1.0 - gbar) * eps


def _col(arr, ndim):
    """Reshape a per-instance coefficient vector for broadcasting."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 0:
        return arr
    return arr.reshape((-1,) + (1,) * (ndim - 1))


def posterior_mean(x_t, t, eps_hat, schedule):
    """Reverse-step mean from the noise estimate (tensor-valued)."""
    nd = len(eps_hat.shape)
    beta = _col(schedule.coeff("beta", t), nd)
    gamma = _col(schedule.coeff("gamma", t), nd)
    gbar = _col(schedule.coeff("gamma_bar", t), nd)
    scale = Tensor(beta / np.sqrt(1.0 - gbar))
    return (x_t - eps_hat * scale) * Tensor(1.0 / np.sqrt(gamma))


def reverse_step(x_t, t, eps_hat, log_var, schedule, noise=None):
    """One reverse update; ``noise=None`` takes the mean only (final step)."""
    mean = posterior_mean(x_t, t, eps_hat, schedule)
    if noise is None:
        return mean
    return mean + T.exp(log_var * 0.5) * Tensor(noise)


def strided_jump(x_t, t, t_prev, eps_hat, schedule, noise=None):
    """Reverse jump from step ``t`` directly to ``t_prev`` < t.

    Estimates the clean signal from the noise prediction, then moves to
    the target step's marginal, keeping the state's signal/noise split
    exactly what the denoiser expects there.  Chaining adjacent-step
    reverse updates across a gap instead leaves the state far noisier
    than its nominal step.  With ``t_prev = t - 1`` the mean and
    variance equal the one-step reverse update exactly.

    ``t_prev = 0`` returns the clean-signal estimate itself (chain end).
    """
    gbar_t = float(schedule.coeff("gamma_bar", t))
    root = np.sqrt(1.0 - gbar_t)
    x0_hat = (x_t - eps_hat * Tensor(root)) * Tensor(1.0 / np.sqrt(gbar_t))
    if t_prev == 0:
        return x0_hat
    gbar_p = float(schedule.coeff("gamma_bar", t_prev))
    if not t_prev < t:
        raise ShapeError(f"strided_jump: target step {t_prev} must precede {t}")
    var = (1.0 - gbar_p) / (1.0 - gbar_t) * (1.0 - gbar_t / gbar_p)
    direction = np.sqrt(max(1.0 - gbar_p - var, 0.0))
    out = x0_hat * Tensor(np.sqrt(gbar_p)) + eps_hat * Tensor(direction)
    if noise is None:
        return out
    return out + Tensor(np.sqrt(var) * noise)


def sinusoidal_embedding(t, width):
    """Classic sin/cos position code for integer timesteps, shape (B, width)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = t * freqs
    parts = [np.sin(angles), np.cos(angles)]
    if width % 2:
        parts.append(np.zeros((len(t), 1)))
    return np.concatenate(parts, axis=1)


class FeatureExtractor:
    """conv1d -> biLSTM -> linear projection -> token pooling -> norm.

    Maps one modality's raw (batch, seq_len, d_raw) sequence into the
    shared (batch, n_tokens, dim) token space.  seq_len must be a
    multiple of n_tokens; adjacent steps are mean-pooled.  The final
    layer norm pins token scale near one, which the diffusion noise
    schedule assumes; without it the extractor can shrink its output
    range and starve the recovery losses of signal.
    """

    def __init__(self, reg, name, rng, d_raw, dim, seq_len, n_tokens,
                 kernel=3):
        if dim % 2 != 0:
            raise ShapeError("token width must be even (biLSTM halves)")
        if seq_len % n_tokens != 0:
            raise ShapeError(f"seq_len {seq_len} not a multiple of "
                             f"n_tokens {n_tokens}")
        self.pool = seq_len // n_tokens
        self.n_tokens = n_tokens
        self.dim = dim
        self.conv = Conv1d(reg, "extractor", name + ".conv", rng, d_raw, dim,
                           kernel)
        self.lstm = BiLSTM(reg, "extractor", name + ".lstm", rng, dim, dim // 2)
        self.proj = Linear(reg, "extractor", name + ".proj", rng, dim, dim)
        self.norm = LayerNorm(reg, "extractor", name + ".norm", rng, dim)

    def __call__(self, x):
        h = self.conv(x)
        # skip around the recurrence: fresh LSTMs attenuate their input
        # heavily, which would leave tokens nearly sample-independent
        # until late in training
        h = self.lstm(h) + h
        h = self.proj(h)
        if self.pool > 1:
            batch = h.shape[0]
            h = h.reshape(batch, self.n_tokens, self.pool, self.dim
                          ).mean(axis=2)
        return self.norm(h)


def build_conditioning(tokens_by_modality, missing):
    """Concatenate per-modality tokens into one key/value sequence and an
    additive attention mask that hides every missing slot.

    ``missing`` is a (batch, 3) boolean array.  Masked tokens get exactly
    zero attention weight, so their values never influence the output;
    callers may hand in anything (zeros, stale features) for those rows.
    """
    parts = [tokens_by_modality[m] for m in MODALITIES]
    n_tokens = parts[0].shape[1]
    kv = T.concat(parts, axis=1)
    batch = kv.shape[0]
    mask = np.zeros((batch, 1, 1, 3 * n_tokens))
    for j in range(3):
        block = slice(j * n_tokens, (j + 1) * n_tokens)
        mask[missing[:, j], 0, 0, block] = MASK_OFF
    return kv, mask


class Denoiser:
    """Conditional noise predictor for one modality's token sequence.

    Alternates self-attention over the noisy tokens with cross-attention
    onto the conditioning tokens (available modalities, tagged by learned
    type embeddings), then feeds a position-wise MLP.  Two linear heads
    emit the noise estimate and a log variance squashed into the
    per-step clamp range.
    """

    def __init__(self, reg, name, rng, dim, n_heads, ff_hidden, n_blocks,
                 t_width, schedule):
        self.schedule = schedule
        self.t_width = t_width
        self.t_proj = Linear(reg, "denoiser", name + ".t_proj", rng,
                             t_width, dim)
        self.type_emb = reg.add(
            "denoiser", name + ".type_emb",
            Tensor(0.02 * rng.standard_normal((3, dim)), requires_grad=True))
        self.blocks = []
        for i in range(n_blocks):
            cross = AttentionLayer(reg, "denoiser", f"{name}.b{i}.cross",
                                   rng, dim, n_heads, cross=True)
            # conditioning must flow from the first update on: a closed
            # (zero) output projection here starves the whole stack of
            # cross-modal gradient during the short training budget
            wo = cross.attn.wo.w
            wo.data[...] = 0.1 * rng.standard_normal(wo.shape) / np.sqrt(dim)
            self.blocks.append((
                AttentionLayer(reg, "denoiser", f"{name}.b{i}.self", rng,
                               dim, n_heads),
                cross,
                FeedForwardLayer(reg, "denoiser", f"{name}.b{i}.ff", rng,
                                 dim, ff_hidden),
            ))
        self.out_norm = LayerNorm(reg, "denoiser", name + ".out_norm", rng, dim)
        self.eps_head = Linear(reg, "denoiser", name + ".eps_head", rng,
                               dim, dim, zero_init=True)
        # per-step gain on a direct copy of the noisy input: the trunk's
        # normalization erases input scale, but at high noise levels the
        # optimal noise estimate is close to a calibrated copy of x_t,
        # and a chain whose first steps are miscalibrated diverges
        self.eps_skip = Linear(reg, "denoiser", name + ".eps_skip", rng,
                               t_width, 1, zero_init=True)
        self.var_head = Linear(reg, "denoiser_var", name + ".var_head", rng,
                               dim, dim, zero_init=True)

    def _type_tagged(self, cond_tokens):
        n = cond_tokens.shape[1] // 3
        ids = np.repeat(np.arange(3), n)
        return cond_tokens + T.gather_rows(self.type_emb, ids)

    def __call__(self, x_t, t, cond_tokens, cond_mask):
        """Returns (eps_hat, log_var), both shaped like ``x_t``."""
        batch = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t), (batch,))
        t_code = Tensor(sinusoidal_embedding(t, self.t_width))
        temb = self.t_proj(t_code)
        h = x_t + temb.reshape(batch, 1, temb.shape[-1])
        kv = self._type_tagged(cond_tokens)
        for self_attn, cross_attn, ff in self.blocks:
            h = self_attn(h)
            h = cross_attn(h, kv=kv, mask=cond_mask)
            h = ff(h)
        h = self.out_norm(h)
        gain = self.eps_skip(t_code).reshape(batch, 1, 1)
        eps_hat = self.eps_head(h) + gain * x_t
        lo, hi = self.schedule.log_var_bounds(t)
        lo = Tensor(_col(lo, len(x_t.shape)))
        span = Tensor(_col(hi - lo.data.reshape(-1), len(x_t.shape)))
        squashed = (T.tanh(self.var_head(h)) + 1.0) * 0.5
        log_var = lo + squashed * span
        return eps_hat, log_var


def sample_missing(denoisers, tokens_by_modality, missing, schedule, stride,
                   rng, on_step=None):
    """Draw recovered token sequences for every missing slot.

    Starts from pure Gaussian noise per missing (sample, modality) and
    walks the strided reverse chain, conditioning on whatever is
    available.  Returns {modality: (row_indices, tokens)}.  Gradients
    flow through the chain when recording is on; pass stride=1 for the
    full-resolution walk used at evaluation.
    """
    steps = schedule.strided_steps(stride)
    targets = list(steps[1:]) + [0]
    kv, mask = build_conditioning(tokens_by_modality, missing)
    recovered = {}
    for j, m in enumerate(MODALITIES):
        rows = np.flatnonzero(missing[:, j])
        if len(rows) == 0:
            continue
        shape = (len(rows),) + tuple(tokens_by_modality[m].shape[1:])
        sub_kv = T.gather_rows(kv, rows)
        sub_mask = mask[rows]
        x = Tensor(rng.standard_normal(shape))
        if stride == 1:
            for t in steps:
                eps_hat, log_var = denoisers[m](x, t, sub_kv, sub_mask)
                noise = rng.standard_normal(shape) if t > 1 else None
                x = reverse_step(x, t, eps_hat, log_var, schedule, noise)
                if on_step is not None:
                    on_step(m, t)
        else:
            # coarse walks jump marginal-to-marginal; the learned variance
            # belongs to adjacent steps and would understate a wide gap
            for t, t_prev in zip(steps, targets):
                eps_hat, _ = denoisers[m](x, t, sub_kv, sub_mask)
                noise = (rng.standard_normal(shape) if t_prev > 0 else None)
                x = strided_jump(x, t, t_prev, eps_hat, schedule, noise)
                if on_step is not None:
                    on_step(m, t)
        recovered[m] = (rows, x)
    return recovered


def diffusion_nll(target, mean, log_var):
    """Gaussian negative log likelihood core, averaged over everything:

        0.5 * ((target - mean)^2 / sigma^2 + log sigma^2)
    """
    diff = target - mean
    return ((diff * diff) * T.exp(-1.0 * log_var) + log_var).mean() * 0.5


def hddm_loss(denoisers, gt_tokens, missing, schedule, rng):
    """One-step denoising loss over missing slots.

    Per missing modality, draws one uniform timestep per instance,
    builds the forward pair (x_{t-1} from the marginal, x_t one kernel
    step further) and scores the predicted reverse mean and variance
    against x_{t-1}.  Absent modalities contribute nothing; returns the
    per-modality mean summed over modalities.

    The clean tokens play the role of data here: both the forward pair
    and the target are cut from the graph, so this loss trains the
    denoiser (and, through the conditioning tokens, the extractor) but
    never pressures the extractor to make its own output easier to
    predict by collapsing it.
    """
    kv, mask = build_conditioning(gt_tokens, missing)
    total = Tensor(0.0)
    for j, m in enumerate(MODALITIES):
        rows = np.flatnonzero(missing[:, j])
        if len(rows) == 0:
            continue
        x0 = T.gather_rows(gt_tokens[m].detach(), rows)
        nd = len(x0.shape)
        t = rng.integers(1, schedule.t_max + 1, size=len(rows))
        gbar_prev = _col(schedule.coeff("gamma_bar_prev", t), nd)
        eps1 = rng.standard_normal(x0.shape)
        x_prev = x0 * Tensor(np.sqrt(gbar_prev)) + Tensor(
            np.sqrt(1.0 - gbar_prev) * eps1)
        gamma = _col(schedule.coeff("gamma", t), nd)
        beta = _col(schedule.coeff("beta", t), nd)
        eps2 = rng.standard_normal(x0.shape)
        x_t = x_prev * Tensor(np.sqrt(gamma)) + Tensor(np.sqrt(beta) * eps2)
        eps_hat, log_var = denoisers[m](x_t, t, T.gather_rows(kv, rows),
                                        mask[rows])
        mu = posterior_mean(x_t, t, eps_hat, schedule)
        total = total + diffusion_nll(x_prev, mu, log_var)
    return total


def ur_loss(refined, gt_tokens):
    """Refinement loss: mean square between the refined recovered tokens
    and the ground-truth tokens, over instances and coordinates, summed
    over the modalities that actually had missing slots.  Ground-truth
    tokens are treated as data (no gradient), matching hddm_loss."""
    total = Tensor(0.0)
    for m, (rows, x) in refined.items():
        diff = x - T.gather_rows(gt_tokens[m].detach(), rows)
        total = total + (diff * diff).mean()
    return total


def apply_unimodal_recon(ur_nets, recovered):
    """Run each modality's refinement net over its sampled tokens."""
    return {m: (rows, ur_nets[m](x)) for m, (rows, x) in recovered.items()}
