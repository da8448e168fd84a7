"""Differentiable target model: a small convolutional grid detector.

Three stride-2 convolution stages with rectifier activations downsample the
input by a factor of 8; a 1x1 head predicts per-cell objectness, class
scores, and box offsets.  The detection loss sums objectness * target-class
score over all raw cells (before suppression), which keeps it differentiable;
non-maximum suppression applies only to reported detections.

The detector interface is a boundary: anything that can score an image is
pluggable behind :func:`detect` / :func:`detection_loss`.  This module is the
reference implementation at desk scale, trained from scratch on synthetic
scenes; its weights ship as a versioned fixture together with the training
seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffengine as de
from .errors import InputError, NumericalError
from .imagecore import ImageBuffer, load_image

LABELS = ("car", "cone", "other")
STRIDE = 8  # three stride-2 stages

# head channel layout: objectness, |labels| class logits, 4 box offsets
_N_HEAD = 1 + len(LABELS) + 4


@dataclass(frozen=True)
class Detection:
    """One bounding box with per-class confidences and objectness."""

    box: tuple[float, float, float, float]  # x_min, y_min, x_max, y_max
    class_scores: dict[str, float]
    objectness: float

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise InputError(f"degenerate detection box: {self.box}")

    def score(self, label: str) -> float:
        """Reported confidence: objectness times the class score."""
        return self.objectness * self.class_scores[label]


@dataclass(frozen=True)
class DetectorThreshold:
    threshold: float = 0.6
    target_class: str = "car"

    def __post_init__(self):
        if not (0.0 < self.threshold < 1.0):
            raise InputError(f"detection threshold must be in (0, 1), got {self.threshold}")


@dataclass(eq=False)
class ToyDetector:
    """Parameters of the grid detector plus its label list and training seed.

    5x5 kernels give each head cell a 29-pixel receptive field, enough to see
    most of a desk-scale car rather than just its center crop."""

    params: dict[str, np.ndarray]
    labels: tuple[str, ...] = LABELS
    seed: int = 0
    channels: tuple[int, int, int] = (8, 16, 32)
    kernel: int = 5

    @classmethod
    def initialize(cls, seed: int = 0, channels=(8, 16, 32), kernel: int = 5) -> "ToyDetector":
        rng = np.random.default_rng(seed)
        c1, c2, c3 = channels

        def conv_init(f, c, k):
            return rng.normal(0.0, np.sqrt(2.0 / (c * k * k)), size=(f, c, k, k))

        params = {
            "c1w": conv_init(c1, 3, kernel), "c1b": np.zeros(c1),
            "c2w": conv_init(c2, c1, kernel), "c2b": np.zeros(c2),
            "c3w": conv_init(c3, c2, kernel), "c3b": np.zeros(c3),
            "hw": conv_init(_N_HEAD, c3, 1), "hb": np.zeros(_N_HEAD),
        }
        return cls(params=params, seed=seed, channels=tuple(channels), kernel=kernel)

    @classmethod
    def zeros(cls, channels=(8, 16, 32), kernel: int = 5) -> "ToyDetector":
        det = cls.initialize(seed=0, channels=channels, kernel=kernel)
        det.params = {k: np.zeros_like(v) for k, v in det.params.items()}
        return det

    def param_names(self) -> list[str]:
        return ["c1w", "c1b", "c2w", "c2b", "c3w", "c3b", "hw", "hb"]

    def forward_var(self, tape: de.Tape, images: de.Var, train_params=None) -> de.Var:
        """Raw head maps for a (B, 3, H, W) batch Var: (B, head, G, G)."""
        p = train_params if train_params is not None else {
            k: tape.constant(v) for k, v in self.params.items()
        }
        pad = self.kernel // 2
        h = de.relu(de.conv2d(images, p["c1w"], p["c1b"], stride=2, pad=pad))
        h = de.relu(de.conv2d(h, p["c2w"], p["c2b"], stride=2, pad=pad))
        h = de.relu(de.conv2d(h, p["c3w"], p["c3b"], stride=2, pad=pad))
        return de.conv2d(h, p["hw"], p["hb"], stride=1, pad=0)

    def forward_np(self, image: np.ndarray) -> np.ndarray:
        """Raw head map for one H x W x 3 image: (head, G, G)."""
        tape = de.Tape()
        x = tape.constant(image.transpose(2, 0, 1)[None])
        return self.forward_var(tape, x).value[0]


def _check_dims(det: ToyDetector, img: ImageBuffer) -> None:
    if img.height % STRIDE or img.width % STRIDE:
        raise InputError(
            f"image dimensions {img.height}x{img.width} not divisible by stride {STRIDE}"
        )


def _decode_head(head: np.ndarray, img_h: int, img_w: int):
    """Raw head map -> (objectness, class score, box) arrays over flat cells."""
    n_cls = len(LABELS)
    gh, gw = head.shape[1], head.shape[2]
    obj = _sigmoid(head[0]).ravel()
    cls = _sigmoid(head[1 : 1 + n_cls]).reshape(n_cls, -1)
    toff = _sigmoid(head[1 + n_cls : 1 + n_cls + 4]).reshape(4, -1)
    jj, ii = np.meshgrid(np.arange(gw), np.arange(gh))
    cx = (jj.ravel() + toff[0]) * STRIDE
    cy = (ii.ravel() + toff[1]) * STRIDE
    bw = toff[2] * img_w
    bh = toff[3] * img_h
    boxes = np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=1)
    return obj, cls, boxes


def _sigmoid(x):
    return de._stable_sigmoid(x)


def iou(a, b) -> float:
    ix0 = max(a[0], b[0])
    iy0 = max(a[1], b[1])
    ix1 = min(a[2], b[2])
    iy1 = min(a[3], b[3])
    iw = max(0.0, ix1 - ix0)
    ih = max(0.0, iy1 - iy0)
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter) if inter > 0.0 else 0.0


def nms(entries: list[tuple[float, int]], boxes: np.ndarray, iou_thr: float = 0.5) -> list[int]:
    """Greedy suppression; entries are (score, flat cell index), highest first."""
    keep: list[int] = []
    for _, idx in sorted(entries, key=lambda e: (-e[0], e[1])):
        if all(iou(boxes[idx], boxes[k]) <= iou_thr for k in keep):
            keep.append(idx)
    return keep


def detect(
    det: ToyDetector, img: ImageBuffer, thr: DetectorThreshold | None = None
) -> list[Detection]:
    """Decoded, thresholded, class-wise suppressed detections.

    A cell is reported for its best class when objectness * class score
    reaches the threshold; suppression runs per class at IoU 0.5.  The
    differentiable loss path never uses this function.
    """
    _check_dims(det, img)
    threshold = thr.threshold if thr is not None else 0.6
    head = det.forward_np(img.data)
    obj, cls, boxes = _decode_head(head, img.height, img.width)

    results: list[Detection] = []
    best_label = cls.argmax(axis=0)
    for label_idx in range(len(LABELS)):
        scores = obj * cls[label_idx]
        entries = [
            (float(scores[i]), int(i))
            for i in np.flatnonzero((best_label == label_idx) & (scores >= threshold))
        ]
        for idx in nms(entries, boxes):
            results.append(
                Detection(
                    box=tuple(float(v) for v in boxes[idx]),
                    class_scores={
                        name: float(cls[k, idx]) for k, name in enumerate(LABELS)
                    },
                    objectness=float(obj[idx]),
                )
            )
    return results


def detection_loss_var(
    tape: de.Tape, det: ToyDetector, image: de.Var, target_class: str
) -> de.Var:
    """Sum over all raw cells of objectness * target-class score."""
    if target_class not in det.labels:
        raise InputError(f"unknown label {target_class!r}; detector knows {det.labels}")
    k = det.labels.index(target_class)
    batched = de.reshape(_transpose_hwc_to_chw(tape, image), (1, 3) + image.value.shape[:2])
    head = det.forward_var(tape, batched)
    gh, gw = head.value.shape[2], head.value.shape[3]
    flat = de.reshape(head, (_N_HEAD, gh * gw))
    obj = de.sigmoid(de.gather_rows(flat, np.array([0])))
    cls = de.sigmoid(de.gather_rows(flat, np.array([1 + k])))
    return de.sum_all(de.mul(obj, cls))


def _transpose_hwc_to_chw(tape: de.Tape, image: de.Var) -> de.Var:
    h, w, _ = image.value.shape
    value = image.value.transpose(2, 0, 1)

    def vjp(g):
        return (np.asarray(g).transpose(1, 2, 0),)

    return tape._record(value, (image,), vjp)


def detection_loss(
    det: ToyDetector, img: ImageBuffer, target_class: str = "car"
) -> tuple[float, de.Tape]:
    """Detection loss J and its tape; backward() gives the image gradient."""
    _check_dims(det, img)
    tape = de.Tape()
    image = tape.input(img.data)
    loss = detection_loss_var(tape, det, image, target_class)
    tape.finalize(loss)
    return float(loss.value), tape


# ---------------------------------------------------------------------------
# training on labeled synthetic scenes


@dataclass(frozen=True)
class LabeledScene:
    image: ImageBuffer
    boxes: list[tuple[str, tuple[float, float, float, float]]]


def load_labeled_scene(image_path) -> LabeledScene:
    """Image plus sidecar annotation: ``class x_min y_min x_max y_max`` lines."""
    p = Path(image_path)
    img = load_image(p)
    sidecar = p.with_suffix(".txt")
    boxes = []
    if sidecar.is_file():
        for lineno, line in enumerate(sidecar.read_text().splitlines(), start=1):
            text = line.strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 5:
                raise InputError(f"{sidecar}:{lineno}: expected 'class x0 y0 x1 y1'")
            label = parts[0]
            if label not in LABELS:
                raise InputError(f"{sidecar}:{lineno}: unknown class {label!r}")
            boxes.append((label, tuple(float(v) for v in parts[1:])))
    return LabeledScene(image=img, boxes=boxes)


def load_scene_dir(dataset_dir) -> list[LabeledScene]:
    d = Path(dataset_dir)
    if not d.is_dir():
        raise InputError(f"no such dataset directory: {d}")
    paths = sorted(d.glob("*.ppm"))
    if not paths:
        raise InputError(f"dataset directory contains no .ppm scenes: {d}")
    return [load_labeled_scene(p) for p in paths]


@dataclass
class DetectorTrainConfig:
    epochs: int = 90
    step_size: float = 0.008
    batch_size: int = 32
    seed: int = 11
    pos_weight: float = 16.0  # one positive cell is outnumbered 63:1
    noobj_weight: float = 0.5
    box_weight: float = 1.0


def _scene_targets(scene: LabeledScene, gh: int, gw: int):
    n_cls = len(LABELS)
    obj_t = np.zeros((1, gh, gw))
    cls_t = np.zeros((n_cls, gh, gw))
    box_t = np.zeros((4, gh, gw))
    pos = np.zeros((1, gh, gw))
    img_h, img_w = scene.image.height, scene.image.width
    for label, (x0, y0, x1, y1) in scene.boxes:
        cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
        j = min(int(cx // STRIDE), gw - 1)
        i = min(int(cy // STRIDE), gh - 1)
        obj_t[0, i, j] = 1.0
        pos[0, i, j] = 1.0
        cls_t[LABELS.index(label), i, j] = 1.0
        box_t[0, i, j] = cx / STRIDE - j
        box_t[1, i, j] = cy / STRIDE - i
        box_t[2, i, j] = (x1 - x0) / img_w
        box_t[3, i, j] = (y1 - y0) / img_h
    return obj_t, cls_t, box_t, pos


def train_toy_detector(
    dataset_dir, config: DetectorTrainConfig | None = None
) -> ToyDetector:
    """Train the grid detector on a directory of labeled scenes.

    Objectness uses binary cross entropy on every cell (down-weighted on
    empty cells), class scores use cross entropy on positive cells, and box
    offsets a squared error on positive cells.  Deterministic given the seed.
    """
    config = config or DetectorTrainConfig()
    scenes = load_scene_dir(dataset_dir)
    has_pos = any(any(b[0] == "car" for b in s.boxes) for s in scenes)
    has_neg = any(not any(b[0] == "car" for b in s.boxes) for s in scenes)
    if not (has_pos and has_neg):
        raise InputError("detector training needs car scenes and car-free scenes")

    h, w = scenes[0].image.height, scenes[0].image.width
    if h % STRIDE or w % STRIDE:
        raise InputError(f"scene dimensions {h}x{w} not divisible by stride {STRIDE}")
    gh, gw = h // STRIDE, w // STRIDE
    n = len(scenes)
    n_cls = len(LABELS)

    images = np.stack([s.image.data.transpose(2, 0, 1) for s in scenes])
    obj_t = np.zeros((n, 1, gh, gw))
    cls_t = np.zeros((n, n_cls, gh, gw))
    box_t = np.zeros((n, 4, gh, gw))
    pos = np.zeros((n, 1, gh, gw))
    for i, s in enumerate(scenes):
        obj_t[i], cls_t[i], box_t[i], pos[i] = _scene_targets(s, gh, gw)

    det = ToyDetector.initialize(seed=config.seed)
    names = det.param_names()
    rng = np.random.default_rng(config.seed)
    opt = de.Adam(lr=config.step_size)

    for epoch in range(config.epochs):
        # cosine decay keeps the endgame from oscillating around the optimum
        opt.lr = config.step_size * 0.5 * (
            1.0 + np.cos(np.pi * epoch / max(1, config.epochs))
        )
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            pick = order[start : start + config.batch_size]
            tape = de.Tape()
            pvars = {k: tape.input(det.params[k]) for k in names}
            head = det.forward_var(tape, tape.constant(images[pick]), train_params=pvars)
            loss = _detector_loss(tape, head, obj_t[pick], cls_t[pick], box_t[pick],
                                  pos[pick], config)
            tape.finalize(loss)
            if not np.isfinite(loss.value):
                raise NumericalError(f"detector training diverged at epoch {epoch}")
            grad = de.backward(tape)
            new = opt.step([det.params[k] for k in names], [grad.of(pvars[k]) for k in names])
            det.params = dict(zip(names, new))
    return det


def _detector_loss(tape, head, obj_t, cls_t, box_t, pos, config) -> de.Var:
    b = obj_t.shape[0]
    n_cls = len(LABELS)
    obj_logit = _slice_channels(tape, head, 0, 1)
    cls_logit = _slice_channels(tape, head, 1, 1 + n_cls)
    box_logit = _slice_channels(tape, head, 1 + n_cls, 1 + n_cls + 4)

    obj_w = np.where(obj_t > 0.0, config.pos_weight, config.noobj_weight)
    obj_loss = de.sum_all(de.mul(de.bce_logits(obj_logit, obj_t), obj_w))
    cls_loss = de.sum_all(de.mul(de.mul(de.bce_logits(cls_logit, cls_t), pos), config.pos_weight))
    box_err = de.sigmoid(box_logit) - box_t
    box_loss = de.sum_all(de.mul(de.mul(box_err, box_err), pos))
    total = obj_loss + cls_loss + de.mul(box_loss, config.box_weight)
    return de.mul(total, 1.0 / b)


def _slice_channels(tape: de.Tape, x: de.Var, c0: int, c1: int) -> de.Var:
    full = x.value.shape

    def vjp(g):
        out = np.zeros(full)
        out[:, c0:c1] = g
        return (out,)

    return tape._record(x.value[:, c0:c1], (x,), vjp)


def benign_detection_rate(
    det: ToyDetector, scenes: list[LabeledScene], thr: DetectorThreshold
) -> float:
    """Fraction of car-containing scenes with at least one car detection."""
    relevant = [s for s in scenes if any(b[0] == thr.target_class for b in s.boxes)]
    if not relevant:
        raise InputError("no scenes contain the target class")
    hits = 0
    for s in relevant:
        dets = detect(det, s.image, thr)
        if any(d.score(thr.target_class) >= thr.threshold for d in dets):
            hits += 1
    return hits / len(relevant)


# ---------------------------------------------------------------------------
# weights file: text header plus parameters, diffable across runs


def save_detector(det: ToyDetector, path) -> None:
    lines = [
        "toydetector v1",
        f"channels {' '.join(str(c) for c in det.channels)}",
        f"kernel {det.kernel}",
        f"labels {' '.join(det.labels)}",
        f"seed {det.seed}",
    ]
    for name in det.param_names():
        arr = det.params[name]
        lines.append(f"param {name} {' '.join(str(d) for d in arr.shape)}")
        lines.append(" ".join(repr(float(v)) for v in arr.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_detector(path) -> ToyDetector:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such detector weights file: {p}")
    lines = p.read_text().splitlines()
    if not lines or lines[0] != "toydetector v1":
        raise InputError(f"{p}: not a detector weights file")
    channels = tuple(int(v) for v in lines[1].split()[1:])
    kernel = int(lines[2].split()[1])
    labels = tuple(lines[3].split()[1:])
    seed = int(lines[4].split()[1])
    params = {}
    i = 5
    while i < len(lines):
        head = lines[i].split()
        if head[0] != "param":
            raise InputError(f"{p}: malformed parameter block at line {i + 1}")
        name = head[1]
        shape = tuple(int(v) for v in head[2:])
        params[name] = np.array(
            [float(v) for v in lines[i + 1].split()], dtype=np.float64
        ).reshape(shape)
        i += 2
    return ToyDetector(
        params=params, labels=labels, seed=seed, channels=channels, kernel=kernel
    )
