"""Minimal reverse-mode differentiation over the pipeline's fixed operator set.

The operator set is closed on purpose: affine maps (matmul + broadcast add),
rectifier, sigmoid, tanh, clamp, absolute value, elementwise product/sum,
strided convolution, sparse linear warps, block upsampling, row gather/scatter,
p-norms, total variation, binary cross entropy on logits, and reductions.
That covers every term of the projection/attack losses, and a closed set keeps
the gradient code small enough to verify against finite differences.

Subgradient conventions at kinks are fixed: clamp passes gradient only where
the input lies inside [lo, hi] (inclusive), the rectifier uses 0 at the kink,
and absolute value uses sign(0) = 0.  Tapes are single-use; a second backward
pass raises.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ProjforgeError


class TapeError(ProjforgeError):
    """Tape misuse: non-scalar output, reuse, or mixing tapes."""


class Var:
    """One node of a recorded computation: a value plus how to push gradients back."""

    __slots__ = ("value", "tape", "parents", "vjp", "watched")

    def __init__(self, value, tape, parents=(), vjp=None, watched=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.watched = watched

    @property
    def shape(self):
        return self.value.shape

    # arithmetic sugar; raw arrays/scalars are treated as constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_var(other, self.tape), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Append-only record of executed operators, ending in one scalar loss."""

    def __init__(self):
        self._nodes: list[Var] = []
        self._output: Var | None = None
        self._consumed = False
        self.watched: list[Var] = []

    def input(self, value) -> Var:
        """A watched leaf; backward() reports its gradient."""
        v = Var(value, self, watched=True)
        self._nodes.append(v)
        self.watched.append(v)
        return v

    def constant(self, value) -> Var:
        v = Var(value, self)
        self._nodes.append(v)
        return v

    def finalize(self, output: Var) -> Var:
        if output.tape is not self:
            raise TapeError("output belongs to a different tape")
        if output.value.shape != ():
            raise TapeError(f"tape output must be scalar, got shape {output.value.shape}")
        self._output = output
        return output

    def _record(self, value, parents, vjp) -> Var:
        for p in parents:
            if p.tape is not self:
                raise TapeError("operands belong to different tapes")
        v = Var(value, self, parents=tuple(parents), vjp=vjp)
        self._nodes.append(v)
        return v


@dataclass
class Grad:
    """Per-input gradients of one backward pass, keyed by the watched Var."""

    grads: dict[int, np.ndarray]
    inputs: list[Var] = field(default_factory=list)

    def of(self, var: Var) -> np.ndarray:
        g = self.grads.get(id(var))
        if g is None:
            return np.zeros_like(var.value)
        return g


def backward(tape: Tape) -> Grad:
    """Exact reverse-mode gradients of the tape's scalar output.

    Creation order is a topological order, so one reversed sweep with adjoint
    accumulation suffices.  The accumulation order is fixed by that sweep,
    which makes repeated runs bitwise identical.
    """
    if tape._output is None:
        raise TapeError("tape has no finalized scalar output")
    if tape._consumed:
        raise TapeError("tape already consumed by a backward pass")
    tape._consumed = True

    adjoint: dict[int, np.ndarray] = {id(tape._output): np.asarray(1.0)}
    grads: dict[int, np.ndarray] = {}
    for node in reversed(tape._nodes):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.watched:
            grads[id(node)] = np.asarray(g, dtype=np.float64).reshape(node.value.shape)
        if node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            acc = adjoint.get(id(parent))
            adjoint[id(parent)] = pg if acc is None else acc + pg
    return Grad(grads, list(tape.watched))


def _as_var(x, tape: Tape) -> Var:
    if isinstance(x, Var):
        return x
    return tape.constant(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    g = np.asarray(grad)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Var, b) -> Var:
    b = _as_var(b, a.tape)
    value = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return a.tape._record(value, (a, b), vjp)


def sub(a: Var, b) -> Var:
    b = _as_var(b, a.tape)
    value = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), -_unbroadcast(g, b.value.shape)

    return a.tape._record(value, (a, b), vjp)


def mul(a: Var, b) -> Var:
    b = _as_var(b, a.tape)
    value = a.value * b.value
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return a.tape._record(value, (a, b), vjp)


def relu(a: Var) -> Var:
    mask = a.value > 0.0
    return a.tape._record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Var) -> Var:
    s = _stable_sigmoid(a.value)
    return a.tape._record(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Var) -> Var:
    t = np.tanh(a.value)
    return a.tape._record(t, (a,), lambda g: (g * (1.0 - t * t),))


def clamp(a: Var, lo: float, hi: float) -> Var:
    inside = (a.value >= lo) & (a.value <= hi)
    value = np.clip(a.value, lo, hi)
    return a.tape._record(value, (a,), lambda g: (g * inside,))


def absolute(a: Var) -> Var:
    s = np.sign(a.value)  # sign(0) = 0, the fixed subgradient at the kink
    return a.tape._record(np.abs(a.value), (a,), lambda g: (g * s,))


def bce_logits(logits: Var, targets: np.ndarray) -> Var:
    """Elementwise binary cross entropy on raw logits (numerically stable)."""
    t = logits.value
    y = np.asarray(targets, dtype=np.float64)
    value = np.maximum(t, 0.0) - t * y + np.log1p(np.exp(-np.abs(t)))
    s = _stable_sigmoid(t)
    return logits.tape._record(value, (logits,), lambda g: (g * (s - y),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# reductions and norms


def sum_all(a: Var) -> Var:
    shape = a.value.shape
    return a.tape._record(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Var) -> Var:
    n = a.value.size
    shape = a.value.shape
    return a.tape._record(
        a.value.mean(), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),)
    )


def pnorm(a: Var, p: float, normalize_count: int | None = None) -> Var:
    """((1/n) * sum |a_i|^p)^(1/p), the count-normalized p-norm.

    With ``normalize_count=None`` the plain p-norm is computed.  The gradient
    at the all-zero point is defined as zero (the subgradient choice that
    keeps an untouched patch untouched).
    """
    if p < 1.0:
        raise ValueError("p-norm requires p >= 1")
    av = a.value
    absa = np.abs(av)
    n = float(normalize_count) if normalize_count else 1.0
    s = (absa**p).sum() / n
    value = s ** (1.0 / p)

    def vjp(g):
        if s == 0.0:
            return (np.zeros_like(av),)
        scale = value / s / n  # s^(1/p - 1) / n
        return (g * scale * np.sign(av) * absa ** (p - 1.0),)

    return a.tape._record(value, (a,), vjp)


def total_variation_op(a: Var) -> Var:
    """Anisotropic TV of an H x W x 3 image, L1 over adjacent pixel pairs,
    divided by the pixel count.  Subgradient of |.| at 0 is 0."""
    img = a.value
    h, w = img.shape[0], img.shape[1]
    npix = float(h * w)
    dx = img[:, 1:, :] - img[:, :-1, :]
    dy = img[1:, :, :] - img[:-1, :, :]
    value = (np.abs(dx).sum() + np.abs(dy).sum()) / npix
    sx, sy = np.sign(dx), np.sign(dy)

    def vjp(g):
        out = np.zeros_like(img)
        out[:, 1:, :] += sx
        out[:, :-1, :] -= sx
        out[1:, :, :] += sy
        out[:-1, :, :] -= sy
        return (g / npix * out,)

    return a.tape._record(value, (a,), vjp)


# ---------------------------------------------------------------------------
# linear maps


def matmul(a: Var, b) -> Var:
    """2-D @ 2-D or 2-D @ 1-D matrix product."""
    b = _as_var(b, a.tape)
    av, bv = a.value, b.value
    value = av @ bv

    def vjp(g):
        g = np.asarray(g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        if av.ndim == 1:
            return g @ bv.T, np.outer(av, g)
        return g @ bv.T, av.T @ g

    return a.tape._record(value, (a, b), vjp)


def sparse_warp(a: Var, op) -> Var:
    """Apply a fixed sparse pull-warp operator to an H x W x 3 image Var.

    ``op`` supplies ``indices`` (L, 4) into the flattened source, ``weights``
    (L, 4), ``src_shape`` and ``out_shape``; the backward pass is the exact
    transpose, accumulated with bincount so it is deterministic.
    """
    src_h, src_w = op.src_shape
    out_h, out_w = op.out_shape
    flat = a.value.reshape(src_h * src_w, 3)
    out = (flat[op.indices] * op.weights[:, :, None]).sum(axis=1)

    idx = op.indices
    wts = op.weights

    def vjp(g):
        g2 = np.asarray(g).reshape(out_h * out_w, 3)
        contrib = wts[:, :, None] * g2[:, None, :]  # (L, 4, 3)
        tri = (idx[:, :, None] * 3 + np.arange(3)).ravel()
        acc = np.bincount(tri, weights=contrib.ravel(), minlength=src_h * src_w * 3)
        return (acc.reshape(src_h, src_w, 3),)

    return a.tape._record(out.reshape(out_h, out_w, 3), (a,), vjp)


def block_upsample(a: Var, fh: int, fw: int) -> Var:
    """Repeat each (i, j) cell of an n x m x 3 array into an fh x fw block."""
    n, m = a.value.shape[0], a.value.shape[1]
    value = np.repeat(np.repeat(a.value, fh, axis=0), fw, axis=1)

    def vjp(g):
        g = np.asarray(g).reshape(n, fh, m, fw, 3)
        return (g.sum(axis=(1, 3)),)

    return a.tape._record(value, (a,), vjp)


def gather_rows(a: Var, idx: np.ndarray) -> Var:
    """Select rows of a (N, C) Var; indices must be unique."""
    idx = np.asarray(idx, dtype=np.intp)
    n = a.value.shape[0]

    def vjp(g):
        out = np.zeros_like(a.value)
        out[idx] = g
        return (out,)

    return a.tape._record(a.value[idx], (a,), vjp)


def scatter_rows(a: Var, idx: np.ndarray, n_rows: int) -> Var:
    """Place rows of a (K, C) Var into a zero (n_rows, C) array; unique indices."""
    idx = np.asarray(idx, dtype=np.intp)
    value = np.zeros((n_rows,) + a.value.shape[1:], dtype=np.float64)
    value[idx] = a.value
    return a.tape._record(value, (a,), lambda g: (np.asarray(g)[idx],))


def concat_cols(a: Var, b: Var) -> Var:
    ka = a.value.shape[1]
    value = np.concatenate([a.value, b.value], axis=1)

    def vjp(g):
        g = np.asarray(g)
        return g[:, :ka], g[:, ka:]

    return a.tape._record(value, (a, b), vjp)


def reshape(a: Var, shape) -> Var:
    old = a.value.shape
    return a.tape._record(a.value.reshape(shape), (a,), lambda g: (np.asarray(g).reshape(old),))


# ---------------------------------------------------------------------------
# convolution

_COL_CACHE: dict[tuple, tuple] = {}


def _im2col_indices(c, h, w, kh, kw, stride, pad):
    key = (c, h, w, kh, kw, stride, pad)
    hit = _COL_CACHE.get(key)
    if hit is not None:
        return hit
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    ci = np.repeat(np.arange(c), kh * kw)
    ki = np.tile(np.repeat(np.arange(kh), kw), c)
    kj = np.tile(np.arange(kw), c * kh)
    oi = stride * np.repeat(np.arange(oh), ow)
    oj = stride * np.tile(np.arange(ow), oh)
    rows = ki[:, None] + oi[None, :]
    cols = kj[:, None] + oj[None, :]
    flat = (ci[:, None] * hp + rows) * wp + cols  # (c*kh*kw, oh*ow)
    entry = (flat, oh, ow, hp, wp)
    _COL_CACHE[key] = entry
    return entry


_SCATTER_CACHE: dict[tuple, np.ndarray] = {}


def conv2d(x: Var, w, b, stride: int = 1, pad: int = 0) -> Var:
    """Batched 2-D convolution: x (B,C,H,W), w (F,C,kh,kw), b (F,).

    im2col is laid out as (C*kh*kw, B*L) so both the forward product and the
    two backward products are single large 2-D GEMMs; the input gradient is
    scattered with one bincount over cached flat indices (deterministic).
    """
    tape = x.tape
    w = _as_var(w, tape)
    b = _as_var(b, tape)
    bsz, c, h, wd = x.value.shape
    f, _, kh, kw = w.value.shape
    flat, oh, ow, hp, wp = _im2col_indices(c, h, wd, kh, kw, stride, pad)
    k = c * kh * kw
    ell = oh * ow

    if pad:
        xp = np.pad(x.value, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x.value
    cols_bkl = xp.reshape(bsz, c * hp * wp)[:, flat.ravel()].reshape(bsz, k, ell)
    cols = np.ascontiguousarray(cols_bkl.transpose(1, 0, 2)).reshape(k, bsz * ell)
    w_mat = w.value.reshape(f, k)
    out2 = w_mat @ cols  # (F, B*L)
    value = (
        out2.reshape(f, bsz, ell).transpose(1, 0, 2) + b.value[None, :, None]
    ).reshape(bsz, f, oh, ow)

    def vjp(g):
        g2 = np.ascontiguousarray(
            np.asarray(g).reshape(bsz, f, ell).transpose(1, 0, 2)
        ).reshape(f, bsz * ell)
        dw = (g2 @ cols.T).reshape(w.value.shape)
        db = g2.sum(axis=1)
        dcols = (w_mat.T @ g2).reshape(k, bsz, ell).transpose(1, 0, 2)
        npad = c * hp * wp
        key = (id(flat), bsz)
        big = _SCATTER_CACHE.get(key)
        if big is None:
            big = (np.arange(bsz)[:, None] * npad + flat.ravel()[None, :]).ravel()
            _SCATTER_CACHE[key] = big
        acc = np.bincount(big, weights=dcols.reshape(-1), minlength=bsz * npad)
        dxp = acc.reshape(bsz, c, hp, wp)
        dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
        return dx, dw, db

    return tape._record(value, (x, w, b), vjp)


# ---------------------------------------------------------------------------
# optimizer and gradient checking


class Adam:
    """Adaptive-moment gradient descent over a list of parameter arrays."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: list[np.ndarray] | None = None
        self._v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self._m[i] = b1 * self._m[i] + (1.0 - b1) * g
            self._v[i] = b2 * self._v[i] + (1.0 - b2) * g * g
            mhat = self._m[i] / (1.0 - b1**self.t)
            vhat = self._v[i] / (1.0 - b2**self.t)
            out.append(p - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


@dataclass
class GradCheckEntry:
    input_index: int
    coords_checked: int
    worst_rel_err: float
    worst_coord: tuple


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float

    @property
    def worst_rel_err(self) -> float:
        return max((e.worst_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst_rel_err <= self.tolerance


def check_gradients(
    fn,
    point: list[np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: int | None = 50,
    seed: int = 0,
    rel_floor: float = 1e-6,
    zero_tol: float = 1e-7,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn(tape, *vars) -> Var`` must be pure and deterministic.  At most
    ``max_coords`` coordinates per input are sampled with the given seed.
    Relative error uses ``|a - n| / max(|a|, |n|, rel_floor)``; differences
    below ``zero_tol`` count as exact (central differences of a flat loss
    return rounding noise around 1e-16/step, not zero).  Failures are
    reported, not raised.
    """
    point = [np.asarray(p, dtype=np.float64) for p in point]

    def evaluate(arrs):
        tape = Tape()
        vs = [tape.input(a) for a in arrs]
        out = tape.finalize(fn(tape, *vs))
        return float(out.value), tape, vs

    _, tape, vs = evaluate(point)
    grad = backward(tape)
    analytic = [grad.of(v) for v in vs]

    rng = np.random.default_rng(seed)
    entries = []
    for i, p in enumerate(point):
        n_total = p.size
        if max_coords is None or n_total <= max_coords:
            coords = np.arange(n_total)
        else:
            coords = rng.choice(n_total, size=max_coords, replace=False)
            coords.sort()
        worst = 0.0
        worst_coord = ()
        for flat_idx in coords:
            idx = np.unravel_index(int(flat_idx), p.shape)
            bumped = [q.copy() for q in point]
            bumped[i][idx] += step
            f_plus, _, _ = evaluate(bumped)
            bumped[i][idx] -= 2.0 * step
            f_minus, _, _ = evaluate(bumped)
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[i][idx])
            if abs(a - numeric) <= zero_tol:
                rel = 0.0
            else:
                rel = abs(a - numeric) / max(abs(a), abs(numeric), rel_floor)
            if rel > worst:
                worst, worst_coord = rel, idx
        entries.append(GradCheckEntry(i, len(coords), worst, worst_coord))
    return GradCheckReport(entries, tolerance)
