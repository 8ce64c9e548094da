"""Network building blocks, parameter bookkeeping and the optimizer.

Every trainable tensor is registered under exactly one named group so
the staged training schedule can move precise parameter subsets and
prove the others untouched.  Layers are plain callables that build the
autodiff graph on each call.
"""

from __future__ import annotations

import contextlib
import hashlib
import os

import numpy as np

from . import tensor as T
from .serial import FormatError, read_array, write_array
from .tensor import ShapeError, Tensor

GROUPS = (
    "extractor",
    "denoiser",
    "denoiser_var",
    "unimodal_recon",
    "fusion",
    "discriminator",
    "multimodal_recon",
    "classifier",
)

GENERATOR_GROUPS = tuple(g for g in GROUPS if g != "discriminator")


class ParamRegistry:
    """Named, grouped store of trainable tensors.

    Insertion order is fixed by model construction, which makes
    checkpoints and checksums deterministic.
    """

    def __init__(self):
        self._entries = {g: [] for g in GROUPS}
        self._names = set()

    def add(self, group, name, tensor):
        if group not in self._entries:
            raise ShapeError(f"unknown parameter group {group!r}")
        if name in self._names:
            raise ShapeError(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad:
            raise ShapeError(f"parameter {name!r} must require gradients")
        self._names.add(name)
        self._entries[group].append((name, tensor))
        return tensor

    def named(self, group):
        return list(self._entries[group])

    def tensors(self, groups=None):
        for g in groups if groups is not None else GROUPS:
            for _, t in self._entries[g]:
                yield t

    def count(self, group=None):
        if group is not None:
            return len(self._entries[group])
        return sum(len(v) for v in self._entries.values())

    def zero_all(self):
        for t in self.tensors():
            t.zero_grad()

    def checksum(self, group):
        """Digest of the group's current values; moves iff values move."""
        h = hashlib.sha256()
        for name, t in self._entries[group]:
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def checksums(self):
        return {g: self.checksum(g) for g in GROUPS}

    @contextlib.contextmanager
    def frozen(self, groups):
        """Treat the given groups as constants while recording ops."""
        held = [t for t in self.tensors(groups)]
        for t in held:
            t.requires_grad = False
        try:
            yield
        finally:
            for t in held:
                t.requires_grad = True

    def snapshot(self):
        return {name: t.data.copy()
                for g in GROUPS for name, t in self._entries[g]}

    def restore(self, snap):
        for g in GROUPS:
            for name, t in self._entries[g]:
                t.data[...] = snap[name]


def fan_in_uniform(rng, fan_in, shape):
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape)


def _param(reg, group, name, array):
    return reg.add(group, name, Tensor(array, requires_grad=True))


class Linear:
    def __init__(self, reg, group, name, rng, d_in, d_out, zero_init=False):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = fan_in_uniform(rng, d_in, (d_in, d_out))
        self.w = _param(reg, group, name + ".w", w)
        self.b = _param(reg, group, name + ".b", np.zeros(d_out))

    def __call__(self, x):
        return x @ self.w + self.b


class Conv1d:
    """Same-length 1-d convolution over (batch, length, channels)."""

    def __init__(self, reg, group, name, rng, d_in, d_out, kernel=3):
        if kernel % 2 != 1:
            raise ShapeError("conv kernel must be odd for same-length output")
        self.kernel = kernel
        self.d_in = d_in
        w = fan_in_uniform(rng, kernel * d_in, (kernel, d_in, d_out))
        self.w = _param(reg, group, name + ".w", w)
        self.b = _param(reg, group, name + ".b", np.zeros(d_out))

    def __call__(self, x):
        batch, length, d_in = x.shape
        if d_in != self.d_in:
            raise ShapeError(f"conv expected {self.d_in} channels, got {d_in}")
        if self.kernel > 2 * length + 1:
            raise ShapeError(f"conv kernel {self.kernel} too wide for "
                             f"length {length}")
        pad = (self.kernel - 1) // 2
        zeros = Tensor(np.zeros((batch, pad, d_in)))
        xp = T.concat([zeros, x, zeros], axis=1)
        out = None
        for k in range(self.kernel):
            piece = xp[:, k:k + length, :] @ self.w[k]
            out = piece if out is None else out + piece
        return out + self.b


class BiLSTM:
    """Bidirectional LSTM; outputs forward and backward states stacked
    on the feature axis, so width doubles."""

    def __init__(self, reg, group, name, rng, d_in, d_hidden):
        self.d_hidden = d_hidden
        self.params = {}
        for tag in ("fwd", "bwd"):
            # forget gates start open (bias 1) so fresh cells retain
            # input signal instead of damping it toward zero
            bias = np.zeros(4 * d_hidden)
            bias[1 * d_hidden:2 * d_hidden] = 1.0
            self.params[tag] = {
                "w_ih": _param(reg, group, f"{name}.{tag}.w_ih",
                               fan_in_uniform(rng, d_in, (d_in, 4 * d_hidden))),
                "w_hh": _param(reg, group, f"{name}.{tag}.w_hh",
                               fan_in_uniform(rng, d_hidden,
                                              (d_hidden, 4 * d_hidden))),
                "b": _param(reg, group, f"{name}.{tag}.b", bias),
            }

    def _direction(self, x, tag, reverse):
        p = self.params[tag]
        batch, length, _ = x.shape
        nh = self.d_hidden
        pre = x @ p["w_ih"] + p["b"]
        h = Tensor(np.zeros((batch, nh)))
        c = Tensor(np.zeros((batch, nh)))
        steps = range(length - 1, -1, -1) if reverse else range(length)
        outs = [None] * length
        for t in steps:
            z = pre[:, t, :] + h @ p["w_hh"]
            gi = T.sigmoid(z[:, 0 * nh:1 * nh])
            gf = T.sigmoid(z[:, 1 * nh:2 * nh])
            gg = T.tanh(z[:, 2 * nh:3 * nh])
            go = T.sigmoid(z[:, 3 * nh:4 * nh])
            c = gf * c + gi * gg
            h = go * T.tanh(c)
            outs[t] = h.reshape(batch, 1, nh)
        return T.concat(outs, axis=1)

    def __call__(self, x):
        fwd = self._direction(x, "fwd", reverse=False)
        bwd = self._direction(x, "bwd", reverse=True)
        return T.concat([fwd, bwd], axis=2)


class LayerNorm:
    def __init__(self, reg, group, name, rng, dim, eps=1e-5):
        self.eps = eps
        self.gamma = _param(reg, group, name + ".gamma", np.ones(dim))
        self.beta = _param(reg, group, name + ".beta", np.zeros(dim))

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


MASK_OFF = -1e30  # additive attention logit for excluded keys


class MultiHeadAttention:
    """Scaled dot-product attention with per-head projections.

    The output projection starts at zero so attention layers begin as
    the identity inside residual blocks.  ``mask`` is an additive logit
    array broadcastable to (batch, heads, queries, keys); excluded keys
    get exactly zero weight.
    """

    def __init__(self, reg, group, name, rng, dim, n_heads):
        if dim % n_heads != 0:
            raise ShapeError(f"width {dim} not divisible by {n_heads} heads")
        self.dim = dim
        self.n_heads = n_heads
        self.d_head = dim // n_heads
        self.wq = Linear(reg, group, name + ".q", rng, dim, dim)
        self.wk = Linear(reg, group, name + ".k", rng, dim, dim)
        self.wv = Linear(reg, group, name + ".v", rng, dim, dim)
        self.wo = Linear(reg, group, name + ".o", rng, dim, dim, zero_init=True)

    def _split(self, x, batch, length):
        return x.reshape(batch, length, self.n_heads,
                         self.d_head).transpose(0, 2, 1, 3)

    def __call__(self, q_in, kv_in, mask=None):
        batch, lq, _ = q_in.shape
        lk = kv_in.shape[1]
        q = self._split(self.wq(q_in), batch, lq)
        k = self._split(self.wk(kv_in), batch, lk)
        v = self._split(self.wv(kv_in), batch, lk)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(self.d_head))
        if mask is not None:
            scores = scores + Tensor(mask)
        attn = T.softmax(scores, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(batch, lq, self.dim)
        return self.wo(out)


class AttentionLayer:
    """Pre-norm residual attention; cross-attention when kv is separate."""

    def __init__(self, reg, group, name, rng, dim, n_heads, cross=False):
        self.norm_q = LayerNorm(reg, group, name + ".nq", rng, dim)
        self.norm_kv = (LayerNorm(reg, group, name + ".nkv", rng, dim)
                        if cross else None)
        self.attn = MultiHeadAttention(reg, group, name + ".attn", rng,
                                       dim, n_heads)

    def __call__(self, x, kv=None, mask=None):
        q = self.norm_q(x)
        if kv is None:
            k = q
        else:
            k = self.norm_kv(kv)
        return x + self.attn(q, k, mask)


class FeedForwardLayer:
    """Pre-norm residual position-wise MLP; starts as the identity."""

    def __init__(self, reg, group, name, rng, dim, hidden):
        self.norm = LayerNorm(reg, group, name + ".n", rng, dim)
        self.lin1 = Linear(reg, group, name + ".l1", rng, dim, hidden)
        self.lin2 = Linear(reg, group, name + ".l2", rng, hidden, dim,
                           zero_init=True)

    def __call__(self, x):
        return x + self.lin2(T.tanh(self.lin1(self.norm(x))))


class ResidualMLP:
    """x + MLP(x) with a zero-init output layer: exact identity at init."""

    def __init__(self, reg, group, name, rng, dim, hidden):
        self.lin1 = Linear(reg, group, name + ".l1", rng, dim, hidden)
        self.lin2 = Linear(reg, group, name + ".l2", rng, hidden, dim,
                           zero_init=True)

    def __call__(self, x):
        return x + self.lin2(T.tanh(self.lin1(x)))


class MLPHead:
    """Two-layer head mapping (..., d_in) to (..., d_out), linear output."""

    def __init__(self, reg, group, name, rng, d_in, hidden, d_out):
        self.lin1 = Linear(reg, group, name + ".l1", rng, d_in, hidden)
        self.lin2 = Linear(reg, group, name + ".l2", rng, hidden, d_out)

    def __call__(self, x):
        return self.lin2(T.tanh(self.lin1(x)))


class Adam:
    """Adam with bias correction, scoped to parameter groups per step.

    Moment buffers and step counters live per parameter, so groups that
    sit out a step keep correct corrections when they next move.  A step
    zeroes the gradients of exactly the tensors it updated.
    """

    def __init__(self, registry, groups, lr=1e-3, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.registry = registry
        self.groups = tuple(groups)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._state = {}

    def _slot(self, t):
        s = self._state.get(id(t))
        if s is None:
            s = [0, np.zeros_like(t.data), np.zeros_like(t.data)]
            self._state[id(t)] = s
        return s

    def step(self, groups=None):
        target = self.groups if groups is None else tuple(groups)
        for g in target:
            if g not in self.groups:
                raise ShapeError(f"group {g!r} not managed by this optimizer")
        for t in self.registry.tensors(target):
            s = self._slot(t)
            s[0] += 1
            s[1] = self.beta1 * s[1] + (1.0 - self.beta1) * t.grad
            s[2] = self.beta2 * s[2] + (1.0 - self.beta2) * (t.grad * t.grad)
            m_hat = s[1] / (1.0 - self.beta1 ** s[0])
            v_hat = s[2] / (1.0 - self.beta2 ** s[0])
            t.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            t.zero_grad()


# ---- checkpoints ----

_MANIFEST = "manifest.txt"


def save_checkpoint(registry, path, meta=None):
    """Write every registered tensor as a blob plus a text manifest."""
    os.makedirs(path, exist_ok=True)
    lines = ["rohydr-checkpoint version 1"]
    for key, value in (meta or {}).items():
        lines.append(f"meta {key} {value}")
    index = 0
    for group in GROUPS:
        for name, t in registry.named(group):
            fname = f"{index:04d}.bin"
            dims = "x".join(str(d) for d in t.data.shape) or "scalar"
            lines.append(f"tensor {group} {name} {dims} {fname}")
            write_array(os.path.join(path, fname), t.data)
            index += 1
    with open(os.path.join(path, _MANIFEST), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_manifest(path):
    manifest = os.path.join(path, _MANIFEST)
    if not os.path.exists(manifest):
        raise FormatError(f"{manifest}: missing checkpoint manifest")
    with open(manifest) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != "rohydr-checkpoint version 1":
        raise FormatError(f"{manifest}: bad header line")
    meta = {}
    listed = {}
    order = []
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "meta" and len(parts) >= 3:
            meta[parts[1]] = " ".join(parts[2:])
        elif parts[0] == "tensor" and len(parts) == 5:
            group, name, dims, fname = parts[1:]
            shape = (() if dims == "scalar"
                     else tuple(int(d) for d in dims.split("x")))
            listed[name] = (group, shape, fname)
            order.append(name)
        else:
            raise FormatError(f"{manifest}: unparseable line {ln!r}")
    return manifest, meta, listed, order


def read_checkpoint_meta(path):
    """Meta dict of a checkpoint without touching any tensors."""
    return _parse_manifest(path)[1]


def load_checkpoint(registry, path):
    """Restore registered tensors from ``path``; returns the meta dict.

    The manifest must describe exactly the tensors the registry holds,
    with matching shapes; anything else is a format error.
    """
    manifest, meta, listed, order = _parse_manifest(path)
    expected = {name: (group, t.data.shape)
                for group in GROUPS for name, t in registry.named(group)}
    if set(listed) != set(expected):
        missing = sorted(set(expected) - set(listed))
        extra = sorted(set(listed) - set(expected))
        raise FormatError(f"{manifest}: tensor set mismatch "
                          f"(missing {missing}, unexpected {extra})")
    for name in order:
        group, shape, fname = listed[name]
        if expected[name] != (group, shape):
            raise FormatError(f"{manifest}: {name} declared as {group}{shape},"
                              f" registry has {expected[name]}")
    for group in GROUPS:
        for name, t in registry.named(group):
            _, shape, fname = listed[name]
            arr = read_array(os.path.join(path, fname))
            if arr.shape != t.data.shape:
                raise FormatError(f"{fname}: blob shape {arr.shape} does not "
                                  f"match manifest {t.data.shape}")
            t.data[...] = arr
    return meta
