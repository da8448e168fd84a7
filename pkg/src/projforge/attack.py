"""Adversarial patch optimizer.

The optimization variable is an unconstrained n x n x 3 latent grid.  The
projector image is derived from it by the squashing map tanh(v)/2 + 0.5,
which keeps every value strictly inside (0, 1) without clipping, followed by
block upsampling so each grid cell fills a uniform-color pixel block (coarse
cells project more reliably across viewing distances).

Each step samples (view, background, transform) tuples, renders the attacked
scene, and minimizes

    detection loss + lambda * perturbation p-norm + tv_weight * total variation

with the adaptive-moment method, averaging losses and gradients over the
sampled tuples as a Monte Carlo estimate of the expectation over conditions.
The p-norm compares attacked and benign object over the object footprint,
normalized by the footprint pixel count; the total variation applies to the
squashed projector image.  Sampling is driven by one seeded stream over
canonically ordered views/backgrounds/transforms, so reruns (and permuted
input lists) are bitwise identical.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffengine as de
from .compositor import SceneView, TransformParams, render_frame_np, render_frame_var
from .detector import ToyDetector, detection_loss_var
from .errors import InputError, NumericalError
from .imagecore import ImageBuffer, save_image


def latent_to_delta(latent: np.ndarray, n: int, size: tuple[int, int]) -> ImageBuffer:
    """Squash the latent grid into (0, 1) and upsample cells to pixel blocks."""
    latent = np.asarray(latent, dtype=np.float64)
    if latent.shape != (n, n, 3):
        raise InputError(f"latent must be {n}x{n}x3, got {latent.shape}")
    h, w = size
    if h % n or w % n:
        raise InputError(f"patch size {size} not divisible by granularity {n}")
    squashed = np.tanh(latent) / 2.0 + 0.5
    return ImageBuffer(np.repeat(np.repeat(squashed, h // n, axis=0), w // n, axis=1))


def total_variation(img: ImageBuffer) -> float:
    """L1 difference over adjacent pixel pairs, divided by the pixel count."""
    d = img.data
    npix = d.shape[0] * d.shape[1]
    dx = np.abs(d[:, 1:, :] - d[:, :-1, :]).sum()
    dy = np.abs(d[1:, :, :] - d[:-1, :, :]).sum()
    return float((dx + dy) / npix)


@dataclass
class PatchParams:
    """The unconstrained latent grid and its derived projector image geometry."""

    latent: np.ndarray
    n: int
    height: int
    width: int

    def __post_init__(self):
        self.latent = np.asarray(self.latent, dtype=np.float64)
        if self.latent.shape != (self.n, self.n, 3):
            raise InputError(f"latent must be {self.n}x{self.n}x3")
        if self.height % self.n or self.width % self.n:
            raise InputError("patch pixel size must be divisible by the cell count")

    @classmethod
    def initial(cls, n: int, height: int, width: int) -> "PatchParams":
        """All-zero latent: a mid-gray projection, symmetric and unsaturated."""
        return cls(latent=np.zeros((n, n, 3)), n=n, height=height, width=width)

    def delta(self) -> ImageBuffer:
        return latent_to_delta(self.latent, self.n, (self.height, self.width))

    def shape_image(self) -> ImageBuffer:
        """The all-ones footprint of a full rectangular patch."""
        return ImageBuffer.full(self.height, self.width, 1.0)


@dataclass(frozen=True)
class TransformSpec:
    """Ranges for one linear-transform family; identity when left at defaults."""

    scale: tuple[float, float] = (1.0, 1.0)
    translate_frac: float = 0.0  # +- fraction of the background size
    rotate_deg: tuple[float, float] = (0.0, 0.0)
    brightness: tuple[float, float] = (0.0, 0.0)
    noise_sigma: float = 0.0

    def sample(self, rng: np.random.Generator, bg_shape) -> TransformParams:
        h, w = bg_shape
        scale = rng.uniform(*self.scale)
        rot = rng.uniform(*self.rotate_deg)
        dx = rng.uniform(-self.translate_frac, self.translate_frac) * w
        dy = rng.uniform(-self.translate_frac, self.translate_frac) * h
        bright = rng.uniform(*self.brightness)
        noise = None
        if self.noise_sigma > 0.0:
            noise = self.noise_sigma * rng.standard_normal((h, w, 3))
        return TransformParams(
            scale=scale, rotate_deg=rot, dx=dx, dy=dy, brightness=bright, noise=noise
        )


DEFAULT_TRANSFORM = TransformSpec(
    scale=(0.8, 1.2), translate_frac=0.10, rotate_deg=(-10.0, 10.0),
    brightness=(-0.1, 0.1), noise_sigma=0.02,
)


@dataclass
class EotConfig:
    """The sampled condition sets: views x_q, backgrounds b_i, transforms m_j."""

    views: list[SceneView]
    backgrounds: list[ImageBuffer]
    transforms: list[TransformSpec] = field(default_factory=lambda: [TransformSpec()])
    samples_per_step: int = 1

    def validate(self):
        if not self.views or not self.backgrounds or not self.transforms:
            raise InputError("EOT needs at least one view, background, and transform")
        if self.samples_per_step < 1:
            raise InputError("samples_per_step must be at least 1")
        shapes = {bg.data.shape for bg in self.backgrounds}
        if len(shapes) != 1:
            raise InputError("all EOT backgrounds must share one shape")


@dataclass
class AttackConfig:
    lam: float = 0.01  # weight of the perturbation p-norm
    p: float = 2.0
    tv_weight: float = 1.0
    step_size: float = 0.1
    iterations: int = 500
    seed: int = 7
    granularity: int = 10
    target_class: str = "car"
    checkpoint_every: int = 100
    eot: EotConfig | None = None

    def validate(self):
        if self.lam < 0.0:
            raise InputError("lambda must be nonnegative")
        if self.p < 1.0:
            raise InputError("p-norm order must be at least 1")
        if self.tv_weight < 0.0:
            raise InputError("tv_weight must be nonnegative")
        if self.iterations < 0:
            raise InputError("iterations must be nonnegative")
        if self.eot is None:
            raise InputError("attack config has no EOT sets")
        self.eot.validate()


@dataclass(frozen=True)
class StepLoss:
    detection: float
    pnorm: float
    tv: float

    @property
    def total(self) -> float:
        return self.detection + self.pnorm + self.tv


def attack_step(
    patch: PatchParams,
    sample: tuple[SceneView, ImageBuffer, TransformParams],
    det: ToyDetector,
    cfg: AttackConfig,
) -> tuple[StepLoss, np.ndarray]:
    """One rendered sample: loss terms and the exact latent gradient.

    The returned pnorm/tv components already carry their configured weights,
    so ``StepLoss.total`` is the optimized objective.
    """
    view, background, params = sample
    tape = de.Tape()
    latent = tape.input(patch.latent)
    cell_h = patch.height // patch.n
    cell_w = patch.width // patch.n
    delta = de.block_upsample(
        de.mul(de.tanh(latent), 0.5) + 0.5, cell_h, cell_w
    )
    scene, attacked_obj = render_frame_var(tape, view, background, params, delta)
    j = detection_loss_var(tape, det, scene, cfg.target_class)

    total = j
    pnorm_val = 0.0
    if cfg.lam > 0.0:
        obj_mask = view.object_mask.data
        region = np.flatnonzero(obj_mask[:, :, 0].ravel() > 0.0)
        diff = de.mul(attacked_obj - view.object_img.data, obj_mask)
        pn = de.pnorm(diff, cfg.p, normalize_count=max(1, 3 * region.size))
        weighted_pn = de.mul(pn, cfg.lam)
        total = total + weighted_pn
        pnorm_val = float(weighted_pn.value)
    tv_val = 0.0
    if cfg.tv_weight > 0.0:
        tv = de.mul(de.total_variation_op(delta), cfg.tv_weight)
        total = total + tv
        tv_val = float(tv.value)

    tape.finalize(total)
    grad = de.backward(tape)
    return StepLoss(float(j.value), pnorm_val, tv_val), grad.of(latent)


@dataclass
class TraceRow:
    iteration: int
    detection: float
    pnorm: float
    tv: float
    total: float


@dataclass
class AttackResult:
    patch: PatchParams
    trace: list[TraceRow]
    checkpoints: list[tuple[int, ImageBuffer, ImageBuffer]]  # (iter, patch, preview)


def _canonical_eot(eot: EotConfig) -> EotConfig:
    """Sort the condition sets so sampling ignores input list order."""
    views = sorted(eot.views, key=lambda v: v.label)
    backgrounds = sorted(
        eot.backgrounds, key=lambda b: hashlib.sha256(b.data.tobytes()).hexdigest()
    )
    transforms = sorted(eot.transforms, key=repr)
    return EotConfig(
        views=views, backgrounds=backgrounds, transforms=transforms,
        samples_per_step=eot.samples_per_step,
    )


def _render_preview(view: SceneView, background: ImageBuffer, delta: ImageBuffer) -> ImageBuffer:
    """Side by side: the patch warped into object coordinates, then the
    patched object placed on a background (the qualitative progress artifacts)."""
    from .compositor import prepare_projection

    h, w = view.object_img.height, view.object_img.width
    prep = prepare_projection(view.operands, h, w)
    warped = np.clip(prep.warp.apply(delta.data), 0.0, 1.0)
    frame = render_frame_np(view, background, TransformParams.identity(), delta=delta)
    canvas = np.zeros((max(h, background.height), w + background.width, 3))
    canvas[:h, :w] = warped
    canvas[: background.height, w:] = frame.data
    return ImageBuffer.from_array(canvas, clip=True)


def run_attack(
    initial: PatchParams,
    det: ToyDetector,
    cfg: AttackConfig,
    progress=None,
) -> AttackResult:
    """Optimize the latent over the sampled condition sets.

    Deterministic for a fixed (initial, detector, config): one seeded stream
    drives every draw, and per-step gradients are averaged in sample order.
    A non-finite loss aborts with the last finite state attached.
    """
    cfg.validate()
    eot = _canonical_eot(cfg.eot)
    bg_shape = (eot.backgrounds[0].height, eot.backgrounds[0].width)
    rng = np.random.default_rng(cfg.seed)
    opt = de.Adam(lr=cfg.step_size)

    patch = replace(initial, latent=initial.latent.copy())
    trace: list[TraceRow] = []
    checkpoints: list[tuple[int, ImageBuffer, ImageBuffer]] = []

    def checkpoint(iteration):
        delta = patch.delta()
        preview = _render_preview(eot.views[0], eot.backgrounds[0], delta)
        checkpoints.append((iteration, delta, preview))

    for it in range(cfg.iterations):
        losses = []
        grads = []
        for _ in range(eot.samples_per_step):
            view = eot.views[int(rng.integers(len(eot.views)))]
            bg = eot.backgrounds[int(rng.integers(len(eot.backgrounds)))]
            spec = eot.transforms[int(rng.integers(len(eot.transforms)))]
            params = spec.sample(rng, bg_shape)
            loss, grad = attack_step(patch, (view, bg, params), det, cfg)
            losses.append(loss)
            grads.append(grad)
        mean_grad = np.mean(grads, axis=0)
        row = TraceRow(
            iteration=it,
            detection=float(np.mean([l.detection for l in losses])),
            pnorm=float(np.mean([l.pnorm for l in losses])),
            tv=float(np.mean([l.tv for l in losses])),
            total=float(np.mean([l.total for l in losses])),
        )
        if not np.isfinite(row.total):
            raise NumericalError(
                f"attack loss became non-finite at iteration {it}; "
                f"last good iteration {it - 1}"
            )
        trace.append(row)
        (patch.latent,) = opt.step([patch.latent], [mean_grad])
        if progress is not None:
            progress(row)
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            checkpoint(it + 1)

    if not checkpoints or checkpoints[-1][0] != cfg.iterations:
        checkpoint(cfg.iterations)
    return AttackResult(patch=patch, trace=trace, checkpoints=checkpoints)


def write_run_dir(result: AttackResult, resolved_config: dict, out_dir) -> None:
    """Attack run directory: config.json, trace.csv, final patch, checkpoints."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(
        json.dumps(resolved_config, indent=2, sort_keys=True) + "\n"
    )
    with open(d / "trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "detection", "pnorm", "tv", "total"])
        for row in result.trace:
            writer.writerow(
                [row.iteration]
                + [f"{v:.10g}" for v in (row.detection, row.pnorm, row.tv, row.total)]
            )
    save_image(result.patch.delta(), d / "patch_final.ppm")
    for it, delta, preview in result.checkpoints:
        save_image(delta, d / f"patch_iter_{it:05d}.ppm")
        save_image(preview, d / f"preview_iter_{it:05d}.ppm")
