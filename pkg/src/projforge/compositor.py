"""Assemble the simulated attacked scene.

The projection equation blends the benign object with a color-mapped overlay:
warp the patch footprint into object coordinates to get the mask M, warp the
projector image the same way, then form (1 - M) * x + colormap(M * x, warped
patch) where the mask is nonzero.  The blended sum is clamped to [0, 1]; a
fractional mask at warped edges can otherwise push a pixel slightly past the
valid range.  Pixels with M = 0 are bitwise unchanged from x.

Scene composition places an attacked object onto a background through an
affine pull warp (scale, rotation, subpixel translation), which doubles as
the linear-transform family of the robustness training loop.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffengine as de
from .colormap import ColorModel, load_color_model, save_color_model
from .errors import InputError
from .geom_tps import (
    TpsModel,
    WarpOperator,
    build_pull_warp,
    fit_tps,
    read_control_points,
    warp_operator_for,
    write_control_points,
)
from .imagecore import ImageBuffer, load_image, save_image


@dataclass(frozen=True, eq=False)
class SceneSpec:
    """A benign scene: object image x, its footprint mask, and a background."""

    object_img: ImageBuffer
    object_mask: ImageBuffer
    background: ImageBuffer
    placement: tuple[int, int]  # (row, col) of the object's top-left corner

    def __post_init__(self):
        if self.object_img.data.shape != self.object_mask.data.shape:
            raise InputError("object image and mask must share dimensions")
        r, c = self.placement
        if (
            r < 0
            or c < 0
            or r + self.object_img.height > self.background.height
            or c + self.object_img.width > self.background.width
        ):
            raise InputError(
                f"placement {self.placement} puts the object outside the background"
            )


@dataclass(eq=False)
class ProjectionOperands:
    """Everything needed to project a patch onto one object view."""

    tps: TpsModel
    color: ColorModel
    patch_shape: ImageBuffer
    _prepared: dict = field(default_factory=dict, repr=False)

    def with_color(self, color: ColorModel) -> "ProjectionOperands":
        """Same geometry, different capture condition; warp cache is shared."""
        return ProjectionOperands(
            tps=self.tps, color=color, patch_shape=self.patch_shape,
            _prepared=self._prepared,
        )


@dataclass(frozen=True, eq=False)
class PreparedProjection:
    mask: np.ndarray  # (h, w, 3) warped footprint, values in [0, 1]
    warp: WarpOperator  # patch plane -> object image
    gate: np.ndarray  # flat pixel indices where mask > 0


def prepare_projection(ops: ProjectionOperands, out_h: int, out_w: int) -> PreparedProjection:
    key = (out_h, out_w)
    hit = ops._prepared.get(key)
    if hit is not None:
        return hit
    wop = warp_operator_for(
        ops.tps, ops.patch_shape.height, ops.patch_shape.width, out_h, out_w
    )
    mask = np.clip(wop.apply(ops.patch_shape.data), 0.0, 1.0)
    gate = np.flatnonzero(mask[:, :, 0].ravel() > 0.0)
    prep = PreparedProjection(mask=mask, warp=wop, gate=gate)
    ops._prepared[key] = prep
    return prep


@dataclass
class ProjectionGraph:
    """Recorded computation of one projection, ready for a backward pass."""

    tape: de.Tape
    delta: de.Var
    output: de.Var


def project_patch_np(ops: ProjectionOperands, x: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Pure-array projection of the patch onto the object image."""
    h, w = x.shape[0], x.shape[1]
    prep = prepare_projection(ops, h, w)
    m = prep.mask
    out = (1.0 - m) * x
    if prep.gate.size:
        delta_g = prep.warp.apply(delta)
        surface = (m * x).reshape(-1, 3)[prep.gate]
        pred = ops.color.forward(surface, delta_g.reshape(-1, 3)[prep.gate])
        flat = out.reshape(-1, 3)
        flat[prep.gate] += pred
    return np.clip(out, 0.0, 1.0)


def project_patch_var(
    tape: de.Tape, ops: ProjectionOperands, x: np.ndarray, delta: de.Var
) -> de.Var:
    """Tape twin of :func:`project_patch_np`; gradients flow to ``delta``.

    The mask and the warp operator are fixed by the patch shape and the TPS,
    so only the color network sees the variable; the gate and the blend are
    constant linear structure.
    """
    h, w = x.shape[0], x.shape[1]
    prep = prepare_projection(ops, h, w)
    m = prep.mask
    base = tape.constant((1.0 - m) * x)
    if prep.gate.size == 0:
        return de.clamp(base + tape.constant(np.zeros_like(x)), 0.0, 1.0)
    delta_g = de.sparse_warp(delta, prep.warp)
    proj_rows = de.gather_rows(de.reshape(delta_g, (h * w, 3)), prep.gate)
    surface = (m * x).reshape(-1, 3)[prep.gate]
    pred = ops.color.forward_var(tape, surface, proj_rows)
    overlay = de.reshape(de.scatter_rows(pred, prep.gate, h * w), (h, w, 3))
    return de.clamp(overlay + base, 0.0, 1.0)


def project_patch(
    ops: ProjectionOperands, x: ImageBuffer, delta: ImageBuffer
) -> tuple[ImageBuffer, ProjectionGraph]:
    """Project ``delta`` onto object image ``x``; also return the recorded graph."""
    if delta.data.shape != ops.patch_shape.data.shape:
        raise InputError("delta dimensions must equal the patch shape dimensions")
    tape = de.Tape()
    dvar = tape.input(delta.data)
    out = project_patch_var(tape, ops, x.data, dvar)
    return ImageBuffer(out.value), ProjectionGraph(tape=tape, delta=dvar, output=out)


def compose_scene(scene: SceneSpec, attacked_object: ImageBuffer) -> ImageBuffer:
    """Alpha-blend the attacked object over the background at its placement."""
    if attacked_object.data.shape != scene.object_img.data.shape:
        raise InputError("attacked object must match the benign object dimensions")
    r, c = scene.placement
    h, w = attacked_object.height, attacked_object.width
    out = scene.background.data.copy()
    m = scene.object_mask.data
    region = out[r : r + h, c : c + w]
    out[r : r + h, c : c + w] = (1.0 - m) * region + m * attacked_object.data
    return ImageBuffer.from_array(out, clip=True)


# ---------------------------------------------------------------------------
# linear scene transforms (the EOT family) and full frame rendering


@dataclass(frozen=True)
class TransformParams:
    """One sampled linear transform of the placed object."""

    scale: float = 1.0
    rotate_deg: float = 0.0
    dx: float = 0.0  # extra translation in background pixels
    dy: float = 0.0
    brightness: float = 0.0
    noise: np.ndarray | None = None  # additive scene noise, background-shaped

    @classmethod
    def identity(cls) -> "TransformParams":
        return cls()


def object_to_background_warp(
    obj_h: int, obj_w: int, bg_h: int, bg_w: int,
    placement: tuple[int, int], params: TransformParams,
) -> WarpOperator:
    """Pull warp realizing scale/rotation/translation of the object into the
    background canvas.  The identity transform reduces to exact one-hot rows,
    so an untransformed composite matches integer placement bitwise."""
    r0, c0 = placement
    cx_obj = (obj_w - 1) / 2.0
    cy_obj = (obj_h - 1) / 2.0
    cx_bg = c0 + cx_obj + params.dx
    cy_bg = r0 + cy_obj + params.dy

    xs, ys = np.meshgrid(np.arange(bg_w, dtype=np.float64), np.arange(bg_h, dtype=np.float64))
    qx = xs.ravel() - cx_bg
    qy = ys.ravel() - cy_bg
    if params.rotate_deg == 0.0 and params.scale == 1.0:
        px = qx + cx_obj
        py = qy + cy_obj
    else:
        theta = np.deg2rad(params.rotate_deg)
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        inv_s = 1.0 / params.scale
        px = inv_s * (cos_t * qx + sin_t * qy) + cx_obj
        py = inv_s * (-sin_t * qx + cos_t * qy) + cy_obj
    pts = np.stack([px, py], axis=1)
    return build_pull_warp(pts, obj_h, obj_w, bg_h, bg_w)


def render_frame_np(
    view: "SceneView",
    background: ImageBuffer,
    params: TransformParams,
    delta: ImageBuffer | None = None,
    color: ColorModel | None = None,
) -> ImageBuffer:
    """Render one frame: optionally project a patch, then place, light, and blur.

    ``delta=None`` renders the benign object.  ``color`` overrides the view's
    capture condition (the ambient sweep swaps it per grid cell).
    """
    ops = view.operands if color is None else view.operands.with_color(color)
    if delta is None:
        obj = view.object_img.data
    else:
        obj = project_patch_np(ops, view.object_img.data, delta.data)
    wop = object_to_background_warp(
        view.object_img.height, view.object_img.width,
        background.height, background.width, view.placement, params,
    )
    obj_w = wop.apply(obj)
    m_w = wop.apply(view.object_mask.data)
    scene = (1.0 - m_w) * background.data + m_w * obj_w + params.brightness * m_w
    if params.noise is not None:
        scene = scene + params.noise
    return ImageBuffer.from_array(scene, clip=True)


def render_frame_var(
    tape: de.Tape,
    view: "SceneView",
    background: ImageBuffer,
    params: TransformParams,
    delta: de.Var,
    color: ColorModel | None = None,
) -> tuple[de.Var, de.Var]:
    """Tape twin of :func:`render_frame_np` for an attacked frame.

    Returns (scene, attacked_object); the latter feeds the perturbation-size
    penalty, which is measured in object coordinates before any transform.
    """
    ops = view.operands if color is None else view.operands.with_color(color)
    obj = project_patch_var(tape, ops, view.object_img.data, delta)
    wop = object_to_background_warp(
        view.object_img.height, view.object_img.width,
        background.height, background.width, view.placement, params,
    )
    obj_w = de.sparse_warp(obj, wop)
    m_w = wop.apply(view.object_mask.data)
    base = tape.constant((1.0 - m_w) * background.data + params.brightness * m_w)
    scene = de.mul(obj_w, m_w) + base
    if params.noise is not None:
        scene = scene + tape.constant(params.noise)
    return de.clamp(scene, 0.0, 1.0), obj


# ---------------------------------------------------------------------------
# scene bundle directory format


@dataclass(eq=False)
class SceneView:
    """One captured viewing condition: object image, mask, geometry, colors."""

    label: str
    object_img: ImageBuffer
    object_mask: ImageBuffer
    operands: ProjectionOperands
    placement: tuple[int, int]


@dataclass(eq=False)
class SceneBundle:
    view: SceneView
    backgrounds: list[ImageBuffer]
    patch_size: tuple[int, int]


def load_scene_bundle(bundle_dir, regularization: float = 0.0) -> SceneBundle:
    """Load a scene bundle directory (see save_scene_bundle for the layout)."""
    d = Path(bundle_dir)
    if not d.is_dir():
        raise InputError(f"no such scene bundle directory: {d}")
    meta_path = d / "scene.json"
    if not meta_path.is_file():
        raise InputError(f"scene bundle is missing scene.json: {d}")
    meta = json.loads(meta_path.read_text())
    for key in ("placement", "patch_size", "view"):
        if key not in meta:
            raise InputError(f"{meta_path}: missing key {key!r}")

    controls_path = d / "controls.txt"
    if not controls_path.is_file():
        raise InputError(f"scene bundle is missing controls.txt: {d}")
    color_path = d / "color_model.txt"
    if not color_path.is_file():
        raise InputError(f"scene bundle is missing color_model.txt: {d}")

    tps = fit_tps(read_control_points(controls_path), regularization)
    color = load_color_model(color_path)
    patch_h, patch_w = (int(v) for v in meta["patch_size"])
    shape = ImageBuffer.full(patch_h, patch_w, 1.0)
    view = SceneView(
        label=str(meta["view"]),
        object_img=load_image(d / "object.ppm"),
        object_mask=load_image(d / "object_mask.ppm"),
        operands=ProjectionOperands(tps=tps, color=color, patch_shape=shape),
        placement=tuple(int(v) for v in meta["placement"]),
    )
    backgrounds = [load_image(p) for p in sorted(d.glob("background_*.ppm"))]
    if not backgrounds:
        raise InputError(f"scene bundle has no background_*.ppm files: {d}")
    return SceneBundle(view=view, backgrounds=backgrounds, patch_size=(patch_h, patch_w))


def save_scene_bundle(
    bundle_dir,
    label: str,
    object_img: ImageBuffer,
    object_mask: ImageBuffer,
    backgrounds: list[ImageBuffer],
    controls,
    color: ColorModel,
    placement: tuple[int, int],
    patch_size: tuple[int, int],
) -> None:
    d = Path(bundle_dir)
    d.mkdir(parents=True, exist_ok=True)
    save_image(object_img, d / "object.ppm")
    save_image(object_mask, d / "object_mask.ppm")
    for i, bg in enumerate(backgrounds):
        save_image(bg, d / f"background_{i:03d}.ppm")
    write_control_points(controls, d / "controls.txt")
    save_color_model(color, d / "color_model.txt")
    meta = {
        "view": label,
        "placement": [int(placement[0]), int(placement[1])],
        "patch_size": [int(patch_size[0]), int(patch_size[1])],
    }
    (d / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
