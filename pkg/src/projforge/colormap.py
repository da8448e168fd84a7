"""Projector-to-surface color mapping model.

Predicts the camera-observed color of a surface pixel from the pair (surface
color, projected color).  The regressor is a 6 -> h -> h -> 3 network with
rectifier activations, trained on mean L1 error with the adaptive-moment
method; at inference the output is clamped to [0, 1].  Training is
deterministic for a fixed (dataset, config, seed).

A small registry of synthetic capture laws stands in for physical data
collection.  Each law is an affine mix O = clamp(s*S + p*P + offset); the
ambient-light variants shrink the projector coefficient the way stronger
ambient light shrinks the achievable color range on a real surface.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffengine as de
from .errors import InputError, NumericalError
from .imagecore import ImageBuffer


@dataclass(frozen=True)
class ColorSample:
    """One calibration triple: unlit surface color, projector color, observed color."""

    surface: np.ndarray
    projected: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        for name in ("surface", "projected", "observed"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != (3,):
                raise InputError(f"{name} must be a 3-vector")
            if v.min() < 0.0 or v.max() > 1.0:
                raise InputError(f"{name} components must lie in [0, 1]")
            object.__setattr__(self, name, v)


@dataclass
class ColorDataset:
    samples: list[ColorSample]
    provenance: str = ""

    def __len__(self) -> int:
        return len(self.samples)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        s = np.stack([x.surface for x in self.samples])
        p = np.stack([x.projected for x in self.samples])
        o = np.stack([x.observed for x in self.samples])
        return s, p, o


def read_color_dataset(path) -> ColorDataset:
    """One sample per line: ``Sr Sg Sb Pr Pg Pb Or Og Ob`` as decimal reals."""
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such dataset file: {p}")
    samples = []
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        if len(parts) != 9:
            raise InputError(f"{p}:{lineno}: expected 9 numbers, got {len(parts)}")
        try:
            vals = [float(v) for v in parts]
        except ValueError:
            raise InputError(f"{p}:{lineno}: not a number") from None
        samples.append(ColorSample(vals[0:3], vals[3:6], vals[6:9]))
    return ColorDataset(samples, provenance=str(p))


def write_color_dataset(data: ColorDataset, path) -> None:
    lines = []
    for s in data.samples:
        vals = np.concatenate([s.surface, s.projected, s.observed])
        lines.append(" ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(eq=False)
class ColorModel:
    """6 -> hidden -> hidden -> 3 regressor with rectifier hidden activations."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    hidden: int = 32
    seed: int = 0

    @classmethod
    def initialize(cls, hidden: int = 32, seed: int = 0) -> "ColorModel":
        rng = np.random.default_rng(seed)
        def he(fan_in, fan_out):
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        return cls(
            w1=he(6, hidden), b1=np.zeros(hidden),
            w2=he(hidden, hidden), b2=np.zeros(hidden),
            w3=he(hidden, 3), b3=np.zeros(3),
            hidden=hidden, seed=seed,
        )

    def params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def replace_params(self, params: list[np.ndarray]) -> None:
        self.w1, self.b1, self.w2, self.b2, self.w3, self.b3 = params

    def forward(self, surface: np.ndarray, projected: np.ndarray, clamp=True) -> np.ndarray:
        """Batched forward pass on (K, 3) arrays; clamped unless training."""
        x = np.concatenate([surface, projected], axis=1)
        h1 = np.maximum(x @ self.w1 + self.b1, 0.0)
        h2 = np.maximum(h1 @ self.w2 + self.b2, 0.0)
        out = h2 @ self.w3 + self.b3
        return np.clip(out, 0.0, 1.0) if clamp else out

    def forward_var(self, tape: de.Tape, surface, projected: de.Var, clamp=True) -> de.Var:
        """Differentiable forward pass; ``surface`` may be a constant array."""
        s = surface if isinstance(surface, de.Var) else tape.constant(surface)
        x = de.concat_cols(s, projected)
        h1 = de.relu(de.matmul(x, self.w1) + self.b1)
        h2 = de.relu(de.matmul(h1, self.w2) + self.b2)
        out = de.matmul(h2, self.w3) + self.b3
        return de.clamp(out, 0.0, 1.0) if clamp else out


def predict_color(model: ColorModel, surface, projected) -> np.ndarray:
    """Observed on-surface color for one (surface, projected) pair, in [0, 1]."""
    s = np.asarray(surface, dtype=np.float64).reshape(1, 3)
    p = np.asarray(projected, dtype=np.float64).reshape(1, 3)
    for name, v in (("surface", s), ("projected", p)):
        if v.min() < 0.0 or v.max() > 1.0:
            raise InputError(f"{name} components must lie in [0, 1]")
    return model.forward(s, p)[0]


def additive_law_model(gain: float = 0.5, hidden: int = 32) -> ColorModel:
    """Hand-built weights encoding O = clamp(S + gain * P) exactly.

    The first six hidden units pass the (nonnegative) inputs through both
    rectifier layers unchanged; the output layer forms the affine law.  Used
    as an analytic oracle in tests and diagnostics.
    """
    m = ColorModel(
        w1=np.zeros((6, hidden)), b1=np.zeros(hidden),
        w2=np.zeros((hidden, hidden)), b2=np.zeros(hidden),
        w3=np.zeros((hidden, 3)), b3=np.zeros(3),
        hidden=hidden, seed=-1,
    )
    m.w1[:6, :6] = np.eye(6)
    m.w2[:6, :6] = np.eye(6)
    m.w3[0:3, 0:3] = np.eye(3)
    m.w3[3:6, 0:3] = gain * np.eye(3)
    return m


@dataclass
class ColorTrainConfig:
    epochs: int = 2000
    step_size: float = 0.01
    batch_size: int = 128
    seed: int = 0
    hidden: int = 32

    def validate(self):
        if self.epochs < 0 or self.step_size <= 0 or self.batch_size <= 0:
            raise InputError("color training config values must be positive")


def train_color_model(
    data: ColorDataset, config: ColorTrainConfig, on_epoch=None
) -> tuple[ColorModel, float]:
    """Fit the regressor by minimizing mean per-sample L1 error.

    Returns the trained model and the final mean L1 loss over the training
    set.  Deterministic given (data, config): initialization and the per-epoch
    shuffle both come from ``config.seed``.  ``on_epoch(epoch, mean_loss)`` is
    called after every epoch when given (used to record training curves).
    """
    config.validate()
    if len(data) == 0:
        raise InputError("cannot train a color model on an empty dataset")
    s, p, o = data.arrays()
    x_all = np.concatenate([s, p], axis=1)
    n = len(data)

    model = ColorModel.initialize(hidden=config.hidden, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    opt = de.Adam(lr=config.step_size)

    for epoch in range(config.epochs):
        # cosine decay: L1 gradients have constant magnitude, so the residual
        # floor tracks the final step size
        opt.lr = config.step_size * 0.5 * (1.0 + np.cos(np.pi * epoch / max(1, config.epochs)))
        order = rng.permutation(n)
        epoch_sum = 0.0
        for start in range(0, n, config.batch_size):
            pick = order[start : start + config.batch_size]
            xb, ob = x_all[pick], o[pick]
            tape = de.Tape()
            params = [tape.input(q) for q in model.params()]
            h1 = de.relu(de.matmul(tape.constant(xb), params[0]) + params[1])
            h2 = de.relu(de.matmul(h1, params[2]) + params[3])
            pred = de.matmul(h2, params[4]) + params[5]
            loss = de.sum_all(de.absolute(pred - ob))
            tape.finalize(de.mul(loss, 1.0 / len(pick)))
            if not np.isfinite(loss.value):
                raise NumericalError(
                    f"color training diverged at epoch {epoch}: loss={loss.value}"
                )
            epoch_sum += float(loss.value)
            grad = de.backward(tape)
            model.replace_params(opt.step(model.params(), [grad.of(v) for v in params]))
        if on_epoch is not None:
            on_epoch(epoch, epoch_sum / n)

    final = mean_l1(model, data)
    if not np.isfinite(final):
        raise NumericalError(f"color training produced non-finite final loss: {final}")
    return model, final


def mean_l1(model: ColorModel, data: ColorDataset, clamp=False) -> float:
    """Mean over samples of the L1 distance between prediction and observation."""
    s, p, o = data.arrays()
    pred = model.forward(s, p, clamp=clamp)
    return float(np.abs(pred - o).sum(axis=1).mean())


def best_constant_l1(data: ColorDataset) -> float:
    """L1 of the best constant predictor (per-channel median), the baseline."""
    _, _, o = data.arrays()
    med = np.median(o, axis=0)
    return float(np.abs(o - med).sum(axis=1).mean())


def apply_color_map(
    model: ColorModel,
    surface_img: ImageBuffer,
    projected_img: ImageBuffer,
    mask: ImageBuffer,
) -> ImageBuffer:
    """Per-pixel prediction where mask > 0, zero elsewhere.

    This is the vectorized overlay term of the projection equation; the mask
    gate keeps untouched pixels exactly zero so blending stays local.
    """
    if not (surface_img.data.shape == projected_img.data.shape == mask.data.shape):
        raise InputError("surface, projected, and mask images must share dimensions")
    h, w = surface_img.height, surface_img.width
    gate = np.flatnonzero(mask.data[:, :, 0].ravel() > 0.0)
    out = np.zeros((h * w, 3), dtype=np.float64)
    if gate.size:
        s = surface_img.data.reshape(-1, 3)[gate]
        p = projected_img.data.reshape(-1, 3)[gate]
        out[gate] = model.forward(s, p)
    return ImageBuffer(out.reshape(h, w, 3))


# ---------------------------------------------------------------------------
# model file format: text header then parameters, diffable across runs


def save_color_model(model: ColorModel, path) -> None:
    lines = [
        "colormodel v1",
        f"layers 6 {model.hidden} {model.hidden} 3",
        f"seed {model.seed}",
    ]
    for name, arr in zip(("w1", "b1", "w2", "b2", "w3", "b3"), model.params()):
        shape = " ".join(str(d) for d in arr.shape)
        lines.append(f"param {name} {shape}")
        lines.append(" ".join(repr(float(v)) for v in arr.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_color_model(path) -> ColorModel:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such color model file: {p}")
    lines = p.read_text().splitlines()
    if not lines or lines[0] != "colormodel v1":
        raise InputError(f"{p}: not a color model file")
    hidden = int(lines[1].split()[2])
    seed = int(lines[2].split()[1])
    arrays = {}
    i = 3
    while i < len(lines):
        head = lines[i].split()
        if head[0] != "param":
            raise InputError(f"{p}: malformed parameter block at line {i + 1}")
        name = head[1]
        shape = tuple(int(v) for v in head[2:])
        vals = np.array([float(v) for v in lines[i + 1].split()], dtype=np.float64)
        arrays[name] = vals.reshape(shape)
        i += 2
    return ColorModel(
        w1=arrays["w1"], b1=arrays["b1"], w2=arrays["w2"], b2=arrays["b2"],
        w3=arrays["w3"], b3=arrays["b3"], hidden=hidden, seed=seed,
    )


# ---------------------------------------------------------------------------
# synthetic capture laws


@dataclass(frozen=True)
class CaptureLaw:
    """Affine stand-in for a physical capture condition: O = clamp(s*S + p*P + c)."""

    name: str
    surface_coef: float
    projector_coef: float
    offset: float

    def apply(self, surface: np.ndarray, projected: np.ndarray) -> np.ndarray:
        out = (
            self.surface_coef * np.asarray(surface)
            + self.projector_coef * np.asarray(projected)
            + self.offset
        )
        return np.clip(out, 0.0, 1.0)


CAPTURE_LAWS = {
    "default": CaptureLaw("default", 0.3, 0.6, 0.05),
    # stronger ambient light washes out the projector's contribution
    "ambient-low": CaptureLaw("ambient-low", 0.45, 0.55, 0.02),
    "ambient-mid": CaptureLaw("ambient-mid", 0.67, 0.30, 0.04),
    "ambient-high": CaptureLaw("ambient-high", 0.71, 0.26, 0.03),
}


def get_capture_law(name: str) -> CaptureLaw:
    law = CAPTURE_LAWS.get(name)
    if law is None:
        raise InputError(
            f"unknown capture law {name!r}; known: {', '.join(sorted(CAPTURE_LAWS))}"
        )
    return law


def synthesize_random_dataset(law: CaptureLaw, n: int, seed: int) -> ColorDataset:
    """Uniform random (S, P) pairs pushed through the law."""
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.0, 1.0, size=(n, 3))
    p = rng.uniform(0.0, 1.0, size=(n, 3))
    o = law.apply(s, p)
    samples = [ColorSample(s[i], p[i], o[i]) for i in range(n)]
    return ColorDataset(samples, provenance=f"synthetic law={law.name} seed={seed} n={n}")


def synthesize_grid_dataset(
    law: CaptureLaw, surfaces: np.ndarray, steps: int = 6
) -> ColorDataset:
    """Simulated capture sweep: per surface color, a steps^3 grid of projector colors."""
    levels = np.linspace(0.0, 1.0, steps)
    rr, gg, bb = np.meshgrid(levels, levels, levels, indexing="ij")
    grid = np.stack([rr.ravel(), gg.ravel(), bb.ravel()], axis=1)
    samples = []
    for s in np.asarray(surfaces, dtype=np.float64):
        o = law.apply(s[None, :], grid)
        samples.extend(ColorSample(s, grid[i], o[i]) for i in range(len(grid)))
    return ColorDataset(samples, provenance=f"grid sweep law={law.name} steps={steps}")
