"""Thin-plate-spline fit and image warping between patch plane and surface image.

A TPS is an affine map plus radial terms w_i * phi(|p - c_i|) anchored at the
source control points, with phi(r) = r^2 * log(r) (natural log, phi(0) = 0).
Fitting solves the standard (N+3) x (N+3) system per output coordinate; with
zero regularization the model interpolates the control pairs exactly.

Warping is backward (pull): each output pixel center is mapped through a
reverse-fitted TPS into the source image and bilinearly sampled.  The sampling
weights are collected into a :class:`WarpOperator`, a sparse linear map with
four entries per output pixel, so downstream differentiation can treat a warp
as a fixed linear operator.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ControlsParseError, DegenerateControlsError, InputError, NumericalError
from .imagecore import ImageBuffer, Point2


def tps_kernel(r: float) -> float:
    """Radial basis phi(r) = r^2 * log(r), with the limit value 0 at r = 0."""
    if r < 0.0:
        raise InputError(f"kernel distance must be nonnegative, got {r}")
    if r == 0.0:
        return 0.0
    return r * r * float(np.log(r))


def _kernel_matrix(dist: np.ndarray) -> np.ndarray:
    out = np.zeros_like(dist)
    nz = dist > 0.0
    out[nz] = dist[nz] ** 2 * np.log(dist[nz])
    return out


@dataclass(frozen=True)
class ControlPointSet:
    """Paired control points: patch-plane sources and captured-image targets."""

    source: list[Point2]
    target: list[Point2]

    def __post_init__(self):
        if len(self.source) != len(self.target):
            raise InputError(
                f"control point counts differ: {len(self.source)} vs {len(self.target)}"
            )
        if len(self.source) < 4:
            raise InputError(f"need at least 4 control points, got {len(self.source)}")
        src = self.source_array()
        d2 = ((src[:, None, :] - src[None, :, :]) ** 2).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        if d2.min() <= 1e-18:
            i, j = np.unravel_index(int(d2.argmin()), d2.shape)
            raise DegenerateControlsError(f"source points {i} and {j} coincide")
        sv = np.linalg.svd(src - src.mean(axis=0), compute_uv=False)
        if sv[1] <= 1e-9 * max(sv[0], 1.0):
            raise DegenerateControlsError("source points are collinear")

    def __len__(self) -> int:
        return len(self.source)

    def source_array(self) -> np.ndarray:
        return np.array([[p.x, p.y] for p in self.source], dtype=np.float64)

    def target_array(self) -> np.ndarray:
        return np.array([[p.x, p.y] for p in self.target], dtype=np.float64)

    def swapped(self) -> "ControlPointSet":
        return ControlPointSet(source=list(self.target), target=list(self.source))


def read_control_points(path) -> ControlPointSet:
    """Parse a controls file: one ``sx sy tx ty`` line per pair, ``#`` comments."""
    p = Path(path)
    if not p.is_file():
        raise ControlsParseError(f"no such controls file: {p}")
    source, target = [], []
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        if len(parts) != 4:
            raise ControlsParseError(f"{p}:{lineno}: expected 4 numbers, got {len(parts)}")
        try:
            sx, sy, tx, ty = (float(v) for v in parts)
        except ValueError:
            raise ControlsParseError(f"{p}:{lineno}: not a number: {text!r}") from None
        source.append(Point2(sx, sy))
        target.append(Point2(tx, ty))
    try:
        return ControlPointSet(source, target)
    except InputError as exc:
        raise ControlsParseError(f"{p}: {exc}") from exc


def write_control_points(cps: ControlPointSet, path) -> None:
    lines = [
        f"{s.x!r} {s.y!r} {t.x!r} {t.y!r}" for s, t in zip(cps.source, cps.target)
    ]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True, eq=False)
class TpsModel:
    """Fitted TPS: affine coefficients, radial weights, and their anchors.

    ``affine`` is (2, 3): row k holds (a0, ax, ay) for output coordinate k.
    ``weights`` is (2, N).  ``reverse`` is an independently fitted TPS with
    source and target swapped, used for pull warping.
    """

    affine: np.ndarray
    weights: np.ndarray
    controls: np.ndarray
    regularization: float
    reverse: "TpsModel | None" = None


def fit_tps(
    cps: ControlPointSet, regularization: float = 0.0, fit_reverse: bool = True
) -> TpsModel:
    """Solve the TPS system [[K + lambda*I, P], [P^T, 0]] for both coordinates."""
    if regularization < 0.0:
        raise InputError(f"regularization must be nonnegative, got {regularization}")
    src = cps.source_array()
    tgt = cps.target_array()
    n = len(cps)

    dist = np.sqrt(((src[:, None, :] - src[None, :, :]) ** 2).sum(axis=2))
    k = _kernel_matrix(dist) + regularization * np.eye(n)
    p = np.hstack([np.ones((n, 1)), src])
    lhs = np.zeros((n + 3, n + 3))
    lhs[:n, :n] = k
    lhs[:n, n:] = p
    lhs[n:, :n] = p.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = tgt
    try:
        sol = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise DegenerateControlsError(f"singular TPS system: {exc}") from exc

    weights = sol[:n].T  # (2, N)
    affine = sol[n:].T  # (2, 3) as (a0, ax, ay)

    # orthogonality side conditions; badly violated means the solve went wrong
    scale = max(1.0, float(np.abs(src).max()))
    moments = np.abs(weights @ p)  # (2, 3): sums of w, w*x, w*y
    if moments.max() > 1e-6 * scale:
        raise NumericalError(
            f"TPS side conditions violated (max moment {moments.max():.3e}); "
            "control points are near-degenerate"
        )

    rev = fit_tps(cps.swapped(), regularization, fit_reverse=False) if fit_reverse else None
    return TpsModel(
        affine=affine,
        weights=weights,
        controls=src,
        regularization=regularization,
        reverse=rev,
    )


def apply_tps_points(model: TpsModel, pts: np.ndarray) -> np.ndarray:
    """Vectorized Eq. f(x,y) + sum_i w_i * phi(r_i) for an (M, 2) point array."""
    pts = np.asarray(pts, dtype=np.float64)
    dist = np.sqrt(((pts[:, None, :] - model.controls[None, :, :]) ** 2).sum(axis=2))
    phi = _kernel_matrix(dist)  # (M, N)
    affine_part = model.affine[:, 0][None, :] + pts @ model.affine[:, 1:].T
    return affine_part + phi @ model.weights.T


def apply_tps(model: TpsModel, p: Point2) -> Point2:
    out = apply_tps_points(model, np.array([[p.x, p.y]]))[0]
    return Point2(float(out[0]), float(out[1]))


@dataclass(frozen=True, eq=False)
class WarpOperator:
    """Sparse pull-warp: four source indices and bilinear weights per output pixel.

    Rows follow output pixels in row-major order.  Out-of-grid neighbors are
    dropped (index clamped to 0 with weight 0), so each row sums to 1 for
    fully in-bounds pulls and to less than 1 near or past the border; the
    missing mass is the zero fill.
    """

    indices: np.ndarray  # (L, 4) intp into flattened source
    weights: np.ndarray  # (L, 4)
    src_shape: tuple[int, int]
    out_shape: tuple[int, int]

    def apply(self, arr: np.ndarray) -> np.ndarray:
        h, w = self.src_shape
        oh, ow = self.out_shape
        flat = np.asarray(arr, dtype=np.float64).reshape(h * w, -1)
        out = (flat[self.indices] * self.weights[:, :, None]).sum(axis=1)
        return out.reshape(oh, ow, flat.shape[1])

    def row_sums(self) -> np.ndarray:
        return self.weights.sum(axis=1).reshape(self.out_shape)

    def dump(self, path) -> None:
        """Debug dump: little-endian rows of (row index, 4 columns, 4 weights)."""
        with open(path, "wb") as fh:
            for i in range(self.indices.shape[0]):
                fh.write(
                    struct.pack(
                        "<q4q4d",
                        i,
                        *(int(c) for c in self.indices[i]),
                        *(float(v) for v in self.weights[i]),
                    )
                )


def build_pull_warp(
    src_points: np.ndarray, src_h: int, src_w: int, out_h: int, out_w: int
) -> WarpOperator:
    """Bilinear pull operator for precomputed source coordinates.

    ``src_points`` is (out_h * out_w, 2) in row-major output order, columns
    (x, y).  Weights follow :func:`projforge.imagecore.sample_bilinear` with a
    zero fill: neighbors off the grid keep index 0 and weight 0.
    """
    pts = np.asarray(src_points, dtype=np.float64)
    x0 = np.floor(pts[:, 0])
    y0 = np.floor(pts[:, 1])
    fx = pts[:, 0] - x0
    fy = pts[:, 1] - y0

    nx = np.stack([x0, x0 + 1, x0, x0 + 1], axis=1)
    ny = np.stack([y0, y0, y0 + 1, y0 + 1], axis=1)
    wts = np.stack(
        [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1
    )
    valid = (nx >= 0) & (nx < src_w) & (ny >= 0) & (ny < src_h)
    wts = np.where(valid, wts, 0.0)
    idx = np.where(valid, (ny * src_w + nx), 0.0).astype(np.intp)
    return WarpOperator(
        indices=idx, weights=wts, src_shape=(src_h, src_w), out_shape=(out_h, out_w)
    )


def save_tps_model(model: TpsModel, path) -> None:
    """Text dump of the fitted coefficients (forward and reverse), diffable."""

    def block(m: TpsModel, prefix: str) -> list[str]:
        lines = [f"{prefix}controls {m.controls.shape[0]}"]
        for row in m.controls:
            lines.append(" ".join(repr(float(v)) for v in row))
        lines.append(f"{prefix}affine")
        for row in m.affine:
            lines.append(" ".join(repr(float(v)) for v in row))
        lines.append(f"{prefix}weights")
        for row in m.weights:
            lines.append(" ".join(repr(float(v)) for v in row))
        return lines

    lines = ["tpsmodel v1", f"regularization {model.regularization!r}"]
    lines += block(model, "")
    if model.reverse is not None:
        lines += block(model.reverse, "reverse_")
    Path(path).write_text("\n".join(lines) + "\n")


def load_tps_model(path) -> TpsModel:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such TPS model file: {p}")
    lines = p.read_text().splitlines()
    if not lines or lines[0] != "tpsmodel v1":
        raise InputError(f"{p}: not a TPS model file")
    reg = float(lines[1].split()[1])

    def parse_block(i: int, prefix: str):
        head = lines[i].split()
        if head[0] != f"{prefix}controls":
            raise InputError(f"{p}: expected {prefix}controls at line {i + 1}")
        n = int(head[1])
        controls = np.array(
            [[float(v) for v in lines[i + 1 + k].split()] for k in range(n)]
        )
        i += 1 + n
        if lines[i] != f"{prefix}affine":
            raise InputError(f"{p}: expected {prefix}affine at line {i + 1}")
        affine = np.array([[float(v) for v in lines[i + 1 + k].split()] for k in range(2)])
        i += 3
        if lines[i] != f"{prefix}weights":
            raise InputError(f"{p}: expected {prefix}weights at line {i + 1}")
        weights = np.array([[float(v) for v in lines[i + 1 + k].split()] for k in range(2)])
        i += 3
        return controls, affine, weights, i

    controls, affine, weights, i = parse_block(2, "")
    reverse = None
    if i < len(lines) and lines[i].startswith("reverse_controls"):
        rc, ra, rw, _ = parse_block(i, "reverse_")
        reverse = TpsModel(affine=ra, weights=rw, controls=rc, regularization=reg)
    return TpsModel(
        affine=affine, weights=weights, controls=controls,
        regularization=reg, reverse=reverse,
    )


def _output_grid(out_h: int, out_w: int) -> np.ndarray:
    xs, ys = np.meshgrid(np.arange(out_w), np.arange(out_h))
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def warp_operator_for(model: TpsModel, src_h, src_w, out_h, out_w) -> WarpOperator:
    """Pull operator realizing ``model`` onto an out_h x out_w canvas."""
    if model.reverse is None:
        raise InputError("model has no fitted reverse transform; warp needs one")
    src_pts = apply_tps_points(model.reverse, _output_grid(out_h, out_w))
    return build_pull_warp(src_pts, src_h, src_w, out_h, out_w)


def warp_image(
    model: TpsModel, src: ImageBuffer, out_height: int, out_width: int
) -> tuple[ImageBuffer, WarpOperator]:
    """Warp ``src`` through the model onto an out_height x out_width canvas.

    Returns the warped image and the sparse linear operator that produced it.
    """
    op = warp_operator_for(model, src.height, src.width, out_height, out_width)
    out = op.apply(src.data)
    return ImageBuffer.from_array(np.clip(out, 0.0, 1.0)), op


def warp_mask(
    model: TpsModel, patch_shape: ImageBuffer, out_height: int, out_width: int
) -> ImageBuffer:
    """Warp the patch footprint into target-image coordinates (the blend mask)."""
    d = patch_shape.data
    if not (np.array_equal(d[:, :, 0], d[:, :, 1]) and np.array_equal(d[:, :, 0], d[:, :, 2])):
        raise InputError("patch shape must have three identical channels")
    warped, _ = warp_image(model, patch_shape, out_height, out_width)
    return warped
