"""Object-misdetection-rate metric and the simulated condition sweep.

OMDR is the fraction of frames in which no target-class detection reaches the
threshold.  The sweep mirrors the physical experiment grid in simulation:
distance becomes uniform object scaling, viewing angle becomes a per-view
scene bundle with its own fitted geometric model, and ambient light becomes a
swap of the color mapping model (stronger ambient leaves the projector less
color range to work with).  Every grid cell renders a seeded jittered frame
sequence twice, with and without the patch, and reports both rates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attack import TransformSpec
from .colormap import ColorModel
from .compositor import SceneView, render_frame_np
from .detector import DetectorThreshold, ToyDetector, detect
from .errors import InputError
from .imagecore import ImageBuffer

ConditionTag = tuple[str, str, str]  # (distance, angle, ambient)


@dataclass
class FrameSet:
    """Ordered frames with expected-presence labels and per-frame condition tags."""

    frames: list[ImageBuffer]
    labels: list[bool]
    tags: list[ConditionTag] = field(default_factory=list)

    def __post_init__(self):
        if not self.frames:
            raise InputError("frame set must be nonempty")
        if len(self.labels) != len(self.frames):
            raise InputError("labels length must equal frames length")
        if not self.tags:
            self.tags = [("", "", "")] * len(self.frames)
        if len(self.tags) != len(self.frames):
            raise InputError("tags length must equal frames length")


@dataclass(frozen=True)
class OmdrReport:
    total: int
    misdetected: int
    omdr: float
    breakdown: dict[ConditionTag, tuple[int, int]]  # tag -> (misdetected, total)


def compute_omdr(frames: FrameSet, det: ToyDetector, thr: DetectorThreshold) -> OmdrReport:
    """Count frames whose expected object produces no qualifying detection.

    A frame is misdetected iff it is labeled target-present and no reported
    detection of the target class reaches the threshold.  The rate is the
    exact ratio misdetected / total over all frames.
    """
    total = len(frames.frames)
    misdetected = 0
    breakdown: dict[ConditionTag, list[int]] = {}
    for img, present, tag in zip(frames.frames, frames.labels, frames.tags):
        cell = breakdown.setdefault(tag, [0, 0])
        cell[1] += 1
        if not present:
            continue
        dets = detect(det, img, thr)
        hit = any(d.score(thr.target_class) >= thr.threshold for d in dets)
        if not hit:
            misdetected += 1
            cell[0] += 1
    return OmdrReport(
        total=total,
        misdetected=misdetected,
        omdr=misdetected / total,
        breakdown={k: (v[0], v[1]) for k, v in breakdown.items()},
    )


@dataclass
class SweepSpec:
    """Grid definition: distance labels with their scale factors, frame count,
    per-frame jitter, and the seed for the whole sweep."""

    distances: list[tuple[str, float]]
    frames_per_cell: int = 20
    seed: int = 99
    jitter: TransformSpec = field(
        default_factory=lambda: TransformSpec(
            scale=(0.98, 1.02), translate_frac=0.03, rotate_deg=(-3.0, 3.0),
            brightness=(-0.04, 0.04), noise_sigma=0.008,
        )
    )


@dataclass(frozen=True)
class SweepCell:
    distance: str
    angle: str
    ambient: str
    attack: OmdrReport
    benign: OmdrReport


@dataclass
class SweepGrid:
    cells: list[SweepCell]

    def mean_attack_omdr(self, ambient: str | None = None) -> float:
        rows = [c for c in self.cells if ambient is None or c.ambient == ambient]
        return float(np.mean([c.attack.omdr for c in rows]))

    def mean_benign_omdr(self, ambient: str | None = None) -> float:
        rows = [c for c in self.cells if ambient is None or c.ambient == ambient]
        return float(np.mean([c.benign.omdr for c in rows]))


def render_condition_frames(
    view: SceneView,
    backgrounds: list[ImageBuffer],
    scale: float,
    spec: SweepSpec,
    seed: int,
    delta: ImageBuffer | None,
    color: ColorModel | None,
    tag: ConditionTag,
) -> FrameSet:
    """Seeded jittered frame sequence for one grid cell."""
    rng = np.random.default_rng(seed)
    bg_shape = (backgrounds[0].height, backgrounds[0].width)
    frames = []
    for i in range(spec.frames_per_cell):
        bg = backgrounds[i % len(backgrounds)]
        params = spec.jitter.sample(rng, bg_shape)
        params = replace(params, scale=params.scale * scale)
        frames.append(render_frame_np(view, bg, params, delta=delta, color=color))
    return FrameSet(frames=frames, labels=[True] * len(frames), tags=[tag] * len(frames))


def run_sweep(
    views: list[SceneView],
    backgrounds: list[ImageBuffer],
    delta: ImageBuffer,
    det: ToyDetector,
    ambients: list[tuple[str, ColorModel]],
    thr: DetectorThreshold,
    spec: SweepSpec,
) -> SweepGrid:
    """OMDR grid over (distance, angle, ambient), with and without the patch.

    The benign column renders the plain object (no projection at all), so the
    ambient color model only affects the attacked frames.  Frame jitter is
    derived per cell from the sweep seed, identically for both columns.
    """
    if not views:
        raise InputError("sweep needs at least one view bundle")
    if not ambients:
        raise InputError("sweep needs at least one ambient color model")
    cells = []
    for d_idx, (d_label, d_scale) in enumerate(spec.distances):
        for v_idx, view in enumerate(views):
            for a_idx, (a_label, color) in enumerate(ambients):
                tag = (d_label, view.label, a_label)
                cell_seed = spec.seed + 1000 * d_idx + 100 * v_idx + 10 * a_idx
                attacked = render_condition_frames(
                    view, backgrounds, d_scale, spec, cell_seed, delta, color, tag
                )
                benign = render_condition_frames(
                    view, backgrounds, d_scale, spec, cell_seed, None, None, tag
                )
                cells.append(
                    SweepCell(
                        distance=d_label, angle=view.label, ambient=a_label,
                        attack=compute_omdr(attacked, det, thr),
                        benign=compute_omdr(benign, det, thr),
                    )
                )
    return SweepGrid(cells=cells)


def emit_report(grid: SweepGrid, out_dir) -> None:
    """Write sweep.csv plus one annotated SVG heatmap per ambient condition."""
    if not grid.cells:
        raise InputError("cannot emit a report for an empty sweep grid")
    d = Path(out_dir)
    if not d.is_dir():
        raise InputError(f"output directory does not exist: {d}")
    rows = sorted(grid.cells, key=lambda c: (c.distance, c.angle, c.ambient))
    with open(d / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["distance", "angle", "ambient", "omdr_attack", "omdr_benign"])
        for c in rows:
            writer.writerow(
                [c.distance, c.angle, c.ambient,
                 f"{c.attack.omdr:.4f}", f"{c.benign.omdr:.4f}"]
            )
    for ambient in sorted({c.ambient for c in grid.cells}):
        _write_heatmap(
            [c for c in rows if c.ambient == ambient],
            d / f"heatmap_{ambient}.svg",
            title=f"attack OMDR, ambient={ambient}",
        )


_CELL = 64
_MARGIN = 90


def _write_heatmap(cells: list[SweepCell], path: Path, title: str) -> None:
    distances = sorted({c.distance for c in cells})
    angles = sorted({c.angle for c in cells})
    width = _MARGIN + _CELL * len(angles) + 20
    height = _MARGIN + _CELL * len(distances) + 20
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{_MARGIN}" y="24" font-size="14" font-family="monospace">{title}</text>',
    ]
    lookup = {(c.distance, c.angle): c.attack.omdr for c in cells}
    for r, dist in enumerate(distances):
        y = _MARGIN + r * _CELL
        parts.append(
            f'<text x="8" y="{y + _CELL // 2 + 4}" font-size="11" '
            f'font-family="monospace">{dist}</text>'
        )
        for q, ang in enumerate(angles):
            x = _MARGIN + q * _CELL
            v = lookup[(dist, ang)]
            red = int(round(255 * v))
            fill = f"rgb({red},{int(round(80 * (1 - v)))},{int(round(255 * (1 - v)))})"
            parts.append(
                f'<rect x="{x}" y="{y}" width="{_CELL}" height="{_CELL}" '
                f'fill="{fill}" stroke="black"/>'
            )
            tcol = "white" if v > 0.45 else "black"
            parts.append(
                f'<text x="{x + 10}" y="{y + _CELL // 2 + 4}" font-size="12" '
                f'fill="{tcol}" font-family="monospace">{v:.2f}</text>'
            )
    for q, ang in enumerate(angles):
        x = _MARGIN + q * _CELL
        parts.append(
            f'<text x="{x + 6}" y="{_MARGIN - 10}" font-size="11" '
            f'font-family="monospace">{ang}</text>'
        )
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")
