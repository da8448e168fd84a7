"""Deterministic synthetic desk-scale world used by tests, diagnostics, and demos.

Everything here is procedurally drawn with seeded generators: a stylized car
and traffic cone on smooth-noise backgrounds, five viewing-angle variants of
the car (horizontal shear plus a width squeeze), per-view checkerboard-style
control point grids with a gentle surface bulge, and synthetic capture-law
datasets for the ambient color models.  The trained detector weights and the
ambient color models ship as versioned files under ``fixtures_data/``;
``python -m projforge.fixtures`` regenerates them.
"""

from __future__ import annotations

import argparse
import importlib.resources
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .colormap import (
    ColorModel,
    ColorTrainConfig,
    get_capture_law,
    load_color_model,
    mean_l1,
    save_color_model,
    synthesize_grid_dataset,
    train_color_model,
)
from .compositor import (
    ProjectionOperands,
    SceneView,
    TransformParams,
    object_to_background_warp,
    save_scene_bundle,
)
from .detector import (
    DetectorThreshold,
    DetectorTrainConfig,
    ToyDetector,
    benign_detection_rate,
    load_detector,
    load_scene_dir,
    save_detector,
    train_toy_detector,
)
from .geom_tps import ControlPointSet, fit_tps, write_control_points
from .imagecore import ImageBuffer, Point2, save_image

OBJ_H, OBJ_W = 40, 56
BG_H = BG_W = 64
PLACEMENT = (12, 4)
PATCH_SIZE = (40, 40)
GRANULARITY = 10

# (label, horizontal shear, width squeeze) per simulated viewing angle
ANGLE_VIEWS = (
    ("-20", -0.20, 0.93),
    ("-10", -0.10, 0.97),
    ("+00", 0.00, 1.00),
    ("+10", 0.10, 0.97),
    ("+20", 0.20, 0.93),
)

AMBIENT_NAMES = ("low", "mid", "high")
DETECTOR_SEED = 11
DETECTOR_FILE = "detector_v1.txt"


def _grids():
    ys, xs = np.mgrid[0:OBJ_H, 0:OBJ_W]
    return xs.astype(np.float64), ys.astype(np.float64)


def _view_coords(shear: float, width_scale: float):
    """Unsheared body coordinates (u, v) for every canvas pixel."""
    xs, ys = _grids()
    cx, cy = (OBJ_W - 1) / 2.0, (OBJ_H - 1) / 2.0
    u = cx + ((xs - cx) - shear * (ys - cy)) / width_scale
    return u, ys


def _body_point(u: float, v: float, shear: float, width_scale: float) -> tuple[float, float]:
    """Forward map of one body-coordinate point into the sheared view."""
    cx, cy = (OBJ_W - 1) / 2.0, (OBJ_H - 1) / 2.0
    x = cx + (u - cx) * width_scale + shear * (v - cy)
    return x, v


def draw_car(
    shear: float = 0.0, width_scale: float = 1.0, rng: np.random.Generator | None = None
) -> tuple[ImageBuffer, ImageBuffer]:
    """Stylized car on a transparent canvas; returns (image, footprint mask)."""
    u, v = _view_coords(shear, width_scale)
    img = np.zeros((OBJ_H, OBJ_W, 3))
    mask = np.zeros((OBJ_H, OBJ_W), dtype=bool)

    def jitter(base, amount=0.05):
        c = np.asarray(base, dtype=np.float64)
        if rng is not None:
            c = c + rng.uniform(-amount, amount, size=3)
        return np.clip(c, 0.02, 0.98)

    body_c = jitter([0.72, 0.10, 0.14], 0.07)
    cabin_c = np.clip(body_c * 0.82, 0.02, 0.98)
    window_c = jitter([0.62, 0.75, 0.86], 0.04)
    wheel_c = np.array([0.07, 0.07, 0.09])
    hub_c = np.array([0.38, 0.38, 0.40])

    body = (u >= 6) & (u <= 50) & (v >= 14) & (v <= 30)
    cabin = (u >= 16) & (u <= 40) & (v >= 7) & (v < 14)
    win_l = (u >= 18) & (u <= 27) & (v >= 8) & (v <= 13)
    win_r = (u >= 29) & (u <= 38) & (v >= 8) & (v <= 13)
    head = (u >= 46) & (u <= 50) & (v >= 16) & (v <= 20)
    tail = (u >= 6) & (u <= 9) & (v >= 16) & (v <= 20)
    wheel_f = (u - 40) ** 2 + (v - 30) ** 2 <= 25
    wheel_b = (u - 16) ** 2 + (v - 30) ** 2 <= 25
    hub_f = (u - 40) ** 2 + (v - 30) ** 2 <= 4
    hub_b = (u - 16) ** 2 + (v - 30) ** 2 <= 4

    img[body] = body_c
    img[cabin] = cabin_c
    img[win_l | win_r] = window_c
    img[head] = [0.95, 0.90, 0.55]
    img[tail] = [0.55, 0.04, 0.04]
    img[wheel_f | wheel_b] = wheel_c
    img[hub_f | hub_b] = hub_c
    mask |= body | cabin | wheel_f | wheel_b

    m3 = np.repeat(mask[:, :, None].astype(np.float64), 3, axis=2)
    return ImageBuffer(img * m3), ImageBuffer(m3)


def draw_cone(rng: np.random.Generator | None = None) -> tuple[ImageBuffer, ImageBuffer]:
    u, v = _view_coords(0.0, 1.0)
    img = np.zeros((OBJ_H, OBJ_W, 3))
    cone_c = np.array([0.90, 0.45, 0.08])
    if rng is not None:
        cone_c = np.clip(cone_c + rng.uniform(-0.05, 0.05, 3), 0.02, 0.98)
    tri = (np.abs(u - 28) <= (v - 6) * 0.42 + 1.0) & (v >= 6) & (v <= 32)
    base = (np.abs(u - 28) <= 13) & (v > 32) & (v <= 35)
    band = tri & (v >= 17) & (v <= 22)
    shape = tri | base
    img[shape] = cone_c
    img[band] = [0.93, 0.93, 0.93]
    m3 = np.repeat(shape[:, :, None].astype(np.float64), 3, axis=2)
    return ImageBuffer(img * m3), ImageBuffer(m3)


def _bilinear_resize(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    ch, cw = arr.shape[0], arr.shape[1]
    ys = np.linspace(0.0, ch - 1.0, h)
    xs = np.linspace(0.0, cw - 1.0, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, ch - 1)
    x1 = np.minimum(x0 + 1, cw - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    a = arr[y0][:, x0]
    b = arr[y0][:, x1]
    c = arr[y1][:, x0]
    d = arr[y1][:, x1]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


_BG_BASES = (
    (0.56, 0.55, 0.52),
    (0.46, 0.53, 0.43),
    (0.55, 0.50, 0.42),
    (0.49, 0.50, 0.56),
)


def make_background(seed: int, h: int = BG_H, w: int = BG_W) -> ImageBuffer:
    """Muted smooth-noise backdrop with a faint horizon gradient."""
    rng = np.random.default_rng(seed)
    base = np.asarray(_BG_BASES[int(rng.integers(len(_BG_BASES)))])
    coarse = rng.uniform(-1.0, 1.0, size=(6, 6, 3))
    tex = _bilinear_resize(coarse, h, w) * 0.10
    grad = np.linspace(0.05, -0.05, h)[:, None, None]
    return ImageBuffer.from_array(base + tex + grad, clip=True)


def surface_palette() -> np.ndarray:
    """Representative surface colors for capture-law sweeps."""
    colors = [
        [0.72, 0.10, 0.14],  # car body
        [0.59, 0.08, 0.11],  # cabin
        [0.62, 0.75, 0.86],  # windows
        [0.07, 0.07, 0.09],  # wheels
        [0.90, 0.45, 0.08],  # cone
        [0.93, 0.93, 0.93],  # cone band
        [0.95, 0.90, 0.55],  # headlight
    ]
    colors.extend(_BG_BASES)
    colors.append([0.0, 0.0, 0.0])
    return np.asarray(colors, dtype=np.float64)


def checkerboard_controls(shear: float = 0.0, width_scale: float = 1.0) -> ControlPointSet:
    """Checkerboard-style control grid: patch plane onto the car body region.

    A 5 x 4 grid of patch-plane intersections maps onto the quad covering the
    car's body and cabin, with a gentle sinusoidal bulge standing in for the
    curvature of the surface; the view's shear applies on top.
    """
    src, tgt = [], []
    for ti in range(4):
        for si in range(5):
            s = si / 4.0
            t = ti / 3.0
            sx = 4.0 + 32.0 * s
            sy = 4.0 + 32.0 * t
            u = 10.0 + 36.0 * s
            v = 8.0 + 22.0 * t
            v = v + 1.6 * np.sin(np.pi * s) * (1.0 - 0.35 * t)
            u = u + 0.9 * np.sin(np.pi * t)
            x, y = _body_point(u, v, shear, width_scale)
            src.append(Point2(sx, sy))
            tgt.append(Point2(float(x), float(y)))
    return ControlPointSet(src, tgt)


def square_controls(displace: tuple[float, float] | None = None) -> ControlPointSet:
    """Unit test fixture: corners of a square, optionally one corner displaced."""
    pts = [Point2(0.0, 0.0), Point2(30.0, 0.0), Point2(30.0, 30.0), Point2(0.0, 30.0)]
    tgt = list(pts)
    if displace is not None:
        tgt[2] = Point2(pts[2].x + displace[0], pts[2].y + displace[1])
    return ControlPointSet(pts, tgt)


def affine_controls(angle_deg: float = 30.0, shift=(7.0, -3.0)) -> ControlPointSet:
    """Control pairs related by a rotation plus translation (pure affine warp)."""
    theta = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    src = np.array(
        [[0.0, 0.0], [28.0, 2.0], [25.0, 27.0], [3.0, 24.0], [14.0, 11.0], [20.0, 18.0]]
    )
    tgt = src @ rot.T + np.asarray(shift)
    return ControlPointSet(
        [Point2(*p) for p in src], [Point2(float(a), float(b)) for a, b in tgt]
    )


# ---------------------------------------------------------------------------
# labeled scenes for detector training


@dataclass
class WorldConfig:
    scale_range: tuple[float, float] = (0.55, 1.20)
    rotate_range: tuple[float, float] = (-10.0, 10.0)
    brightness_range: tuple[float, float] = (-0.1, 0.1)
    noise_sigma: float = 0.02
    # fraction of car scenes rendered with a benign dim projection, so the
    # detector (like the pretrained models it stands in for) keeps detecting
    # a car that merely has neutral light on it; the range stays near gray so
    # saturated projections remain out of distribution
    projection_fraction: float = 0.35
    projection_lo: float = 0.35
    projection_hi: float = 0.65


@dataclass(eq=False)
class ProjectionAug:
    """Benign-projection augmentation: flat-color patches through each view's
    geometry and the given capture condition."""

    color: ColorModel
    views: dict[str, "object"] | None = None  # label -> ProjectionOperands

    def operands_for(self, label: str, shear: float, wscale: float):
        if self.views is None:
            self.views = {}
        ops = self.views.get(label)
        if ops is None:
            tps = fit_tps(checkerboard_controls(shear, wscale))
            shape = ImageBuffer.full(PATCH_SIZE[0], PATCH_SIZE[1], 1.0)
            ops = ProjectionOperands(tps=tps, color=self.color, patch_shape=shape)
            self.views[label] = ops
        return ops


def _render_labeled(
    obj: ImageBuffer, mask: ImageBuffer, label: str | None,
    bg: ImageBuffer, params: TransformParams,
) -> tuple[ImageBuffer, list]:
    wop = object_to_background_warp(
        obj.height, obj.width, bg.height, bg.width, PLACEMENT, params
    )
    m = wop.apply(mask.data)
    o = wop.apply(obj.data)
    scene = (1.0 - m) * bg.data + m * o + params.brightness * m
    if params.noise is not None:
        scene = scene + params.noise
    boxes = []
    if label is not None:
        solid = m[:, :, 0] > 0.5
        if solid.any():
            rows = np.flatnonzero(solid.any(axis=1))
            cols = np.flatnonzero(solid.any(axis=0))
            boxes.append(
                (label, (float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1)))
            )
    return ImageBuffer.from_array(scene, clip=True), boxes


def make_detector_dataset(
    out_dir,
    n: int,
    seed: int,
    config: WorldConfig | None = None,
    projection: ProjectionAug | None = None,
) -> Path:
    """Seeded labeled scenes: cars over random backgrounds, plus cones and
    empty negatives, with the jitter families the pipeline evaluates under.
    With ``projection`` given, part of the car scenes carry a benign
    flat-color projection."""
    from .compositor import project_patch_np

    config = config or WorldConfig()
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n):
        bg = make_background(int(rng.integers(1, 2**31)))
        kind = rng.uniform()
        if kind < 0.70:
            view_label, shear, wscale = _pick_view(rng)
            label, (obj, mask) = "car", draw_car(shear, wscale, rng=rng)
            if projection is not None and rng.uniform() < config.projection_fraction:
                flat = rng.uniform(config.projection_lo, config.projection_hi, size=3)
                cells = np.clip(
                    flat[None, None, :]
                    + rng.uniform(-0.08, 0.08, size=(GRANULARITY, GRANULARITY, 3)),
                    0.0, 1.0,
                )
                delta = np.repeat(
                    np.repeat(cells, PATCH_SIZE[0] // GRANULARITY, axis=0),
                    PATCH_SIZE[1] // GRANULARITY, axis=1,
                )
                ops = projection.operands_for(view_label, shear, wscale)
                obj = ImageBuffer(project_patch_np(ops, obj.data, delta))
        elif kind < 0.85:
            label, (obj, mask) = "cone", draw_cone(rng=rng)
        else:
            label, obj, mask = None, None, None
        lo, hi = config.scale_range
        mid = min(hi, lo + 0.2)
        # extra mass on small objects; far-distance cells are the hard cases
        scale = rng.uniform(lo, mid) if rng.uniform() < 0.4 else rng.uniform(mid, hi)
        params = TransformParams(
            scale=float(scale),
            rotate_deg=float(rng.uniform(*config.rotate_range)),
            dx=float(rng.uniform(-4.0, 4.0)),
            dy=float(rng.uniform(-4.0, 4.0)),
            brightness=float(rng.uniform(*config.brightness_range)),
            noise=config.noise_sigma * rng.standard_normal((bg.height, bg.width, 3)),
        )
        if label is None:
            scene, boxes = ImageBuffer.from_array(
                bg.data + params.noise, clip=True
            ), []
        else:
            scene, boxes = _render_labeled(obj, mask, label, bg, params)
        save_image(scene, d / f"scene_{i:04d}.ppm")
        lines = [f"{lb} {b[0]!r} {b[1]!r} {b[2]!r} {b[3]!r}" for lb, b in boxes]
        (d / f"scene_{i:04d}.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
    return d


def _pick_view(rng: np.random.Generator):
    return ANGLE_VIEWS[int(rng.integers(len(ANGLE_VIEWS)))]


# ---------------------------------------------------------------------------
# shipped fixture data


def shipped_path(name: str) -> Path:
    return Path(importlib.resources.files("projforge") / "fixtures_data" / name)


def load_shipped_detector() -> ToyDetector:
    return load_detector(shipped_path(DETECTOR_FILE))


def load_ambient_models() -> dict[str, ColorModel]:
    return {name: load_color_model(shipped_path(f"color_{name}.txt")) for name in AMBIENT_NAMES}


def train_ambient_model(name: str, seed: int | None = None) -> tuple[ColorModel, float]:
    """Train one ambient-condition color model on its simulated capture sweep."""
    law = get_capture_law(f"ambient-{name}")
    seed = {"low": 101, "mid": 102, "high": 103}[name] if seed is None else seed
    data = synthesize_grid_dataset(law, surface_palette(), steps=6)
    cfg = ColorTrainConfig(epochs=600, step_size=0.01, batch_size=256, seed=seed)
    model, _ = train_color_model(data, cfg)
    return model, mean_l1(model, data, clamp=True)


def make_view(label: str, shear: float, width_scale: float, color: ColorModel) -> SceneView:
    obj, mask = draw_car(shear, width_scale)
    tps = fit_tps(checkerboard_controls(shear, width_scale))
    shape = ImageBuffer.full(PATCH_SIZE[0], PATCH_SIZE[1], 1.0)
    return SceneView(
        label=label,
        object_img=obj,
        object_mask=mask,
        operands=ProjectionOperands(tps=tps, color=color, patch_shape=shape),
        placement=PLACEMENT,
    )


@dataclass
class World:
    """Everything the end-to-end tests and the CLI demos need, in memory."""

    views: list[SceneView]
    backgrounds: list[ImageBuffer]
    detector: ToyDetector
    ambients: dict[str, ColorModel]
    bundle_dirs: dict[str, Path]


def build_world(root, detector: ToyDetector | None = None) -> World:
    """Materialize scene bundles under ``root`` and load the shipped models.

    The attacked condition is trained and (by default) evaluated under the
    low-ambient color model, the condition where the projector has the widest
    color range; the sweep swaps in the other ambient models.
    """
    root = Path(root)
    detector = detector or load_shipped_detector()
    ambients = load_ambient_models()
    color_low = ambients["low"]
    backgrounds = [make_background(s) for s in (501, 502, 503)]

    views = []
    bundle_dirs = {}
    for label, shear, wscale in ANGLE_VIEWS:
        view = make_view(label, shear, wscale, color_low)
        views.append(view)
        bdir = root / "bundles" / f"angle_{label}"
        save_scene_bundle(
            bdir,
            label=label,
            object_img=view.object_img,
            object_mask=view.object_mask,
            backgrounds=backgrounds,
            controls=checkerboard_controls(shear, wscale),
            color=color_low,
            placement=PLACEMENT,
            patch_size=PATCH_SIZE,
        )
        bundle_dirs[label] = bdir
    return World(
        views=views,
        backgrounds=backgrounds,
        detector=detector,
        ambients=ambients,
        bundle_dirs=bundle_dirs,
    )


def benign_fixture_scene(world: World) -> ImageBuffer:
    """The canonical benign render: center view, first background, no jitter."""
    view = next(v for v in world.views if v.label == "+00")
    from .compositor import render_frame_np

    return render_frame_np(view, world.backgrounds[0], TransformParams.identity())


def build_shipped_fixtures(out_dir, quiet: bool = False) -> dict:
    """Regenerate the versioned fixture files (detector weights, controls,
    ambient color models).  Deterministic; returns the validation numbers."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = {}

    def say(msg):
        if not quiet:
            print(msg)

    write_control_points(checkerboard_controls(), out / "checker_controls.txt")
    say("wrote checker_controls.txt")

    for name in AMBIENT_NAMES:
        model, l1 = train_ambient_model(name)
        save_color_model(model, out / f"color_{name}.txt")
        report[f"color_{name}_l1"] = l1
        say(f"wrote color_{name}.txt (fit L1 {l1:.4f})")

    low = load_color_model(out / "color_low.txt")
    with tempfile.TemporaryDirectory() as tmp:
        aug = ProjectionAug(color=low)
        train_dir = make_detector_dataset(Path(tmp) / "train", n=200, seed=1000, projection=aug)
        held_dir = make_detector_dataset(Path(tmp) / "held", n=60, seed=2000)
        det = train_toy_detector(train_dir, DetectorTrainConfig(seed=DETECTOR_SEED))
        rate = benign_detection_rate(det, load_scene_dir(held_dir), DetectorThreshold())
        report["benign_detection_rate"] = rate
        say(f"trained detector: held-out benign detection rate {rate:.3f}")
        if rate < 0.95:
            raise SystemExit(f"detector fixture failed validation: rate {rate:.3f} < 0.95")
        save_detector(det, out / DETECTOR_FILE)
        say(f"wrote {DETECTOR_FILE}")
    return report


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="rebuild shipped fixture data")
    parser.add_argument("--out", default=None, help="output directory (default: package data)")
    args = parser.parse_args(argv)
    out = args.out or Path(__file__).parent / "fixtures_data"
    build_shipped_fixtures(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
