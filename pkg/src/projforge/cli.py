"""Single executable exposing the attack pipeline as subcommands.

    projforge fit-tps CONTROLS --out-model model.txt [--verify]
    projforge fit-color DATASET --out-model model.txt [--synthesize LAW SEED]
    projforge train-patch BUNDLE [BUNDLE ...] --detector W --out RUNDIR
    projforge evaluate --bundles B [B ...] --patch P --detector W --out DIR
    projforge diag {gradients,tps,determinism}

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.  Every
subcommand that produces output writes its fully resolved configuration next
to it, so a run can be reproduced from its own artifacts.  The environment
variable ``PROJFORGE_THREADS`` caps internal parallelism; it is applied to
the numerical backend before numpy is first imported, which is why this
module defers all heavy imports into the command handlers.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _apply_thread_cap() -> None:
    cap = os.environ.get("PROJFORGE_THREADS")
    if not cap:
        return
    for var in _THREAD_VARS:
        os.environ.setdefault(var, cap)


EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3


DEFAULT_CONFIG = {
    "tps": {"regularization": 0.0},
    "color": {
        "hidden": 32,
        "epochs": 2000,
        "step_size": 0.01,
        "batch_size": 128,
        "seed": 0,
        "synth_samples": 512,
    },
    "attack": {
        "lambda": 0.01,
        "p": 2.0,
        "tv_weight": 1.0,
        "step_size": 0.1,
        "iterations": 500,
        "seed": 7,
        "granularity": 10,
        "target_class": "car",
        "samples_per_step": 1,
        "checkpoint_every": 100,
    },
    "eot": {
        "scale": [0.8, 1.2],
        "translate_frac": 0.10,
        "rotate_deg": [-10.0, 10.0],
        "brightness": [-0.1, 0.1],
        "noise_sigma": 0.02,
    },
    "sweep": {
        "frames_per_cell": 20,
        "seed": 99,
        "threshold": 0.6,
        "distances": [["1.5m", 1.0], ["2.0m", 0.8], ["2.5m", 0.6]],
        "jitter": {
            "scale": [0.98, 1.02],
            "translate_frac": 0.03,
            "rotate_deg": [-3.0, 3.0],
            "brightness": [-0.04, 0.04],
            "noise_sigma": 0.008,
        },
    },
}


def _merge_config(base: dict, override: dict, path: str = "") -> dict:
    from .errors import InputError

    out = dict(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise InputError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise InputError(f"config key {here} must be a table")
            out[key] = _merge_config(base[key], value, here)
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict:
    from .errors import InputError

    if path is None:
        return json.loads(json.dumps(DEFAULT_CONFIG))
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such config file: {p}")
    try:
        user = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{p}: invalid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise InputError(f"{p}: config root must be an object")
    return _merge_config(DEFAULT_CONFIG, user)


def _write_resolved_config(config: dict, target: Path, name: str = "config.json") -> None:
    if target.is_dir():
        out = target / name
    else:
        out = target.with_name(target.name + ".config.json")
    out.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")


def _say(args, msg: str) -> None:
    if not getattr(args, "quiet", False):
        print(msg)


# ---------------------------------------------------------------------------
# subcommands


def cmd_fit_tps(args) -> int:
    from . import geom_tps
    from .imagecore import Point2

    config = load_config(args.config)
    if args.regularization is not None:
        config["tps"]["regularization"] = args.regularization
    reg = float(config["tps"]["regularization"])

    cps = geom_tps.read_control_points(args.controls)
    model = geom_tps.fit_tps(cps, reg)
    out = Path(args.out_model)
    geom_tps.save_tps_model(model, out)
    _write_resolved_config(config, out)
    _say(args, f"fitted TPS on {len(cps)} control pairs -> {out}")

    if args.verify:
        reloaded = geom_tps.load_tps_model(out)
        worst = 0.0
        for s, t in zip(cps.source, cps.target):
            q = geom_tps.apply_tps(reloaded, Point2(s.x, s.y))
            worst = max(worst, abs(q.x - t.x), abs(q.y - t.y))
        _say(args, f"verify: worst control residual {worst:.3e}")
        if reg == 0.0 and worst > 1e-6:
            print(f"error: control residual {worst:.3e} exceeds 1e-6", file=sys.stderr)
            return EXIT_NUMERICAL
    return EXIT_OK


def cmd_fit_color(args) -> int:
    from . import colormap
    from .errors import InputError

    config = load_config(args.config)
    for key in ("epochs", "step_size", "batch_size", "hidden"):
        flag = getattr(args, key, None)
        if flag is not None:
            config["color"][key] = flag
    if args.seed is not None:
        config["color"]["seed"] = args.seed
    cc = config["color"]

    dataset_path = Path(args.dataset)
    if args.synthesize:
        law_name, seed_text = args.synthesize
        law = colormap.get_capture_law(law_name)
        data = colormap.synthesize_random_dataset(law, int(cc["synth_samples"]), int(seed_text))
        colormap.write_color_dataset(data, dataset_path)
        _say(args, f"synthesized {len(data)} samples from law {law.name!r} -> {dataset_path}")

    data = colormap.read_color_dataset(dataset_path)
    if len(data) == 0:
        raise InputError(f"dataset is empty: {dataset_path}")
    cfg = colormap.ColorTrainConfig(
        epochs=int(cc["epochs"]), step_size=float(cc["step_size"]),
        batch_size=int(cc["batch_size"]), seed=int(cc["seed"]), hidden=int(cc["hidden"]),
    )
    model, final_l1 = colormap.train_color_model(data, cfg)
    out = Path(args.out_model)
    colormap.save_color_model(model, out)
    _write_resolved_config(config, out)
    _say(args, f"trained color model on {len(data)} samples, final L1 {final_l1:.5f} -> {out}")
    return EXIT_OK


def _eot_from_config(eot_cfg: dict, samples_per_step: int, views, backgrounds):
    from .attack import EotConfig, TransformSpec

    spec = TransformSpec(
        scale=tuple(eot_cfg["scale"]),
        translate_frac=float(eot_cfg["translate_frac"]),
        rotate_deg=tuple(eot_cfg["rotate_deg"]),
        brightness=tuple(eot_cfg["brightness"]),
        noise_sigma=float(eot_cfg["noise_sigma"]),
    )
    return EotConfig(
        views=views, backgrounds=backgrounds, transforms=[spec],
        samples_per_step=samples_per_step,
    )


def _load_views(bundle_dirs):
    from .compositor import load_scene_bundle

    views, backgrounds, patch_size = [], [], None
    seen = set()
    for bdir in bundle_dirs:
        bundle = load_scene_bundle(bdir)
        views.append(bundle.view)
        patch_size = bundle.patch_size
        for bg in bundle.backgrounds:
            digest = hashlib.sha256(bg.data.tobytes()).hexdigest()
            if digest not in seen:
                seen.add(digest)
                backgrounds.append(bg)
    return views, backgrounds, patch_size


def cmd_train_patch(args) -> int:
    from . import attack as atk
    from .detector import load_detector

    config = load_config(args.config)
    ac = config["attack"]
    for key, flag in (
        ("iterations", args.iterations), ("step_size", args.step_size),
        ("lambda", args.lam), ("tv_weight", args.tv_weight),
        ("granularity", args.granularity), ("samples_per_step", args.samples_per_step),
    ):
        if flag is not None:
            ac[key] = flag
    if args.seed is not None:
        ac["seed"] = args.seed

    det = load_detector(args.detector)
    views, backgrounds, patch_size = _load_views(args.bundles)
    eot = _eot_from_config(config["eot"], int(ac["samples_per_step"]), views, backgrounds)
    cfg = atk.AttackConfig(
        lam=float(ac["lambda"]), p=float(ac["p"]), tv_weight=float(ac["tv_weight"]),
        step_size=float(ac["step_size"]), iterations=int(ac["iterations"]),
        seed=int(ac["seed"]), granularity=int(ac["granularity"]),
        target_class=str(ac["target_class"]),
        checkpoint_every=int(ac["checkpoint_every"]), eot=eot,
    )
    initial = atk.PatchParams.initial(cfg.granularity, patch_size[0], patch_size[1])

    progress = None
    if not args.quiet:
        def progress(row):
            if row.iteration % 50 == 0:
                print(
                    f"iter {row.iteration:5d}  J {row.detection:.4f}  "
                    f"pnorm {row.pnorm:.4f}  tv {row.tv:.4f}  total {row.total:.4f}"
                )

    result = atk.run_attack(initial, det, cfg, progress=progress)
    out = Path(args.out)
    atk.write_run_dir(result, config, out)
    if result.trace:
        first, last = result.trace[0], result.trace[-1]
        _say(args, f"detection loss {first.detection:.4f} -> {last.detection:.4f} ({out})")
    else:
        _say(args, f"no iterations requested; wrote initialization ({out})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .colormap import load_color_model
    from .detector import DetectorThreshold, load_detector
    from .errors import InputError
    from .evalharness import SweepSpec, emit_report, run_sweep
    from .fixtures import AMBIENT_NAMES, shipped_path
    from .imagecore import load_image

    config = load_config(args.config)
    sc = config["sweep"]
    if args.frames is not None:
        sc["frames_per_cell"] = args.frames
    if args.seed is not None:
        sc["seed"] = args.seed
    if args.threshold is not None:
        sc["threshold"] = args.threshold

    ambients = []
    for item in args.ambient or [f"{n}" for n in AMBIENT_NAMES]:
        if "=" in item:
            name, _, path = item.partition("=")
            ambients.append((name, load_color_model(path)))
        elif item in AMBIENT_NAMES:
            ambients.append((item, load_color_model(shipped_path(f"color_{item}.txt"))))
        else:
            raise InputError(
                f"unknown ambient label {item!r}; use NAME=FILE or one of {AMBIENT_NAMES}"
            )

    det = load_detector(args.detector)
    delta = load_image(args.patch)
    views, backgrounds, _ = _load_views(args.bundles)
    from .attack import TransformSpec

    jit = sc["jitter"]
    spec = SweepSpec(
        distances=[(str(lbl), float(s)) for lbl, s in sc["distances"]],
        frames_per_cell=int(sc["frames_per_cell"]),
        seed=int(sc["seed"]),
        jitter=TransformSpec(
            scale=tuple(jit["scale"]), translate_frac=float(jit["translate_frac"]),
            rotate_deg=tuple(jit["rotate_deg"]), brightness=tuple(jit["brightness"]),
            noise_sigma=float(jit["noise_sigma"]),
        ),
    )
    thr = DetectorThreshold(threshold=float(sc["threshold"]))
    grid = run_sweep(views, backgrounds, delta, det, ambients, thr, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    emit_report(grid, out)
    _write_resolved_config(config, out)
    _say(
        args,
        f"sweep done: mean OMDR attack {grid.mean_attack_omdr():.3f} "
        f"benign {grid.mean_benign_omdr():.3f} ({out}/sweep.csv)",
    )
    return EXIT_OK


def cmd_diag(args) -> int:
    if args.target == "gradients":
        return _diag_gradients(args)
    if args.target == "tps":
        return _diag_tps(args)
    return _diag_determinism(args)


def _diag_gradients(args) -> int:
    import numpy as np

    from . import diffengine as de
    from .attack import AttackConfig, EotConfig, PatchParams, TransformSpec, attack_step
    from .colormap import ColorModel
    from .compositor import TransformParams
    from .detector import ToyDetector, detection_loss_var
    from .fixtures import build_world, make_background
    import tempfile

    checks = []
    rng = np.random.default_rng(424)

    # (a) color model prediction w.r.t. the projected color
    model = ColorModel.initialize(hidden=16, seed=3)
    surface = rng.uniform(0.2, 0.8, size=(20, 3))

    def color_fn(tape, projected):
        return de.sum_all(model.forward_var(tape, surface, projected, clamp=False))

    rep = de.check_gradients(color_fn, [rng.uniform(0.2, 0.8, size=(20, 3))], step=1e-4)
    checks.append(("predict_color/projected", rep))

    # (b) total variation
    def tv_fn(tape, img):
        return de.total_variation_op(img)

    rep = de.check_gradients(tv_fn, [rng.uniform(0.0, 1.0, size=(8, 8, 3))], step=1e-5)
    checks.append(("total_variation", rep))

    # (c) detection loss w.r.t. the input image
    det = ToyDetector.initialize(seed=5)

    def det_fn(tape, img):
        return detection_loss_var(tape, det, img, "car")

    rep = de.check_gradients(det_fn, [rng.uniform(0.0, 1.0, size=(16, 16, 3))], step=1e-5)
    checks.append(("detection_loss/image", rep))

    # (d) full attack step loss w.r.t. the latent
    with tempfile.TemporaryDirectory() as tmp:
        world = build_world(tmp)
    view = world.views[2]
    cfg = AttackConfig(
        lam=0.05, p=2.0, tv_weight=1.0, iterations=1, seed=1,
        eot=EotConfig(views=[view], backgrounds=[make_background(31)],
                      transforms=[TransformSpec()]),
    )
    patch = PatchParams.initial(10, 40, 40)
    params = TransformParams(scale=1.05, rotate_deg=3.0, dx=1.5, dy=-1.0, brightness=0.03)

    def step_fn(tape, latent):
        p = PatchParams(latent=latent.value, n=10, height=40, width=40)
        # rebuild the loss on the provided tape for finite differencing
        return _attack_loss_on_tape(tape, latent, p, view, make_background(31), params,
                                    world.detector, cfg)

    rep = de.check_gradients(step_fn, [rng.normal(0.0, 0.4, size=(10, 10, 3))], step=1e-5)
    checks.append(("attack_step/latent", rep))

    failed = 0
    for name, rep in checks:
        status = "pass" if rep.passed else "FAIL"
        if not rep.passed:
            failed += 1
        print(f"{status}  {name}: worst rel err {rep.worst_rel_err:.3e} "
              f"({rep.entries[0].coords_checked} coords)")
    return EXIT_OK if failed == 0 else EXIT_NUMERICAL


def _attack_loss_on_tape(tape, latent, patch, view, background, params, det, cfg):
    import numpy as np

    from . import diffengine as de
    from .compositor import render_frame_var
    from .detector import detection_loss_var

    cell_h = patch.height // patch.n
    cell_w = patch.width // patch.n
    delta = de.block_upsample(de.mul(de.tanh(latent), 0.5) + 0.5, cell_h, cell_w)
    scene, attacked = render_frame_var(tape, view, background, params, delta)
    total = detection_loss_var(tape, det, scene, cfg.target_class)
    if cfg.lam > 0.0:
        mask = view.object_mask.data
        region = np.flatnonzero(mask[:, :, 0].ravel() > 0.0)
        diff = de.mul(attacked - view.object_img.data, mask)
        total = total + de.mul(
            de.pnorm(diff, cfg.p, normalize_count=max(1, 3 * region.size)), cfg.lam
        )
    if cfg.tv_weight > 0.0:
        total = total + de.mul(de.total_variation_op(delta), cfg.tv_weight)
    return total


def _diag_tps(args) -> int:
    import numpy as np

    from .fixtures import ANGLE_VIEWS, affine_controls, checkerboard_controls, square_controls
    from .geom_tps import apply_tps_points, fit_tps

    failed = 0
    fixture_sets = [("square-identity", square_controls()), ("affine", affine_controls())]
    fixture_sets += [
        (f"checkerboard {label}", checkerboard_controls(shear, ws))
        for label, shear, ws in ANGLE_VIEWS
    ]
    for name, cps in fixture_sets:
        model = fit_tps(cps, 0.0)
        mapped = apply_tps_points(model, cps.source_array())
        worst = float(np.abs(mapped - cps.target_array()).max())
        ok = worst <= 1e-6
        failed += 0 if ok else 1
        print(f"{'pass' if ok else 'FAIL'}  {name}: worst control residual {worst:.3e}")
    return EXIT_OK if failed == 0 else EXIT_NUMERICAL


def _diag_determinism(args) -> int:
    import tempfile

    from . import attack as atk
    from .colormap import ColorTrainConfig, get_capture_law, synthesize_random_dataset, \
        train_color_model
    from .fixtures import build_world, make_background

    def digest_of(run) -> str:
        h = hashlib.sha256()
        for part in run:
            h.update(part)
        return h.hexdigest()

    def one_round() -> str:
        parts = []
        data = synthesize_random_dataset(get_capture_law("default"), 96, seed=5)
        model, final = train_color_model(data, ColorTrainConfig(epochs=80, seed=5))
        parts.append(repr(final).encode())
        parts.append(model.w3.tobytes())
        with tempfile.TemporaryDirectory() as tmp:
            world = build_world(tmp)
        cfg = atk.AttackConfig(
            iterations=6, seed=3, checkpoint_every=0,
            eot=atk.EotConfig(
                views=world.views[:2], backgrounds=[make_background(41)],
                transforms=[atk.DEFAULT_TRANSFORM], samples_per_step=2,
            ),
        )
        result = atk.run_attack(atk.PatchParams.initial(10, 40, 40), world.detector, cfg)
        parts.append(result.patch.latent.tobytes())
        parts.append(repr([r.total for r in result.trace]).encode())
        return digest_of(parts)

    d1, d2 = one_round(), one_round()
    print(f"digest run 1: {d1}")
    print(f"digest run 2: {d2}")
    ok = d1 == d2
    print("pass  pipeline digests identical" if ok else "FAIL  digests differ")
    return EXIT_OK if ok else EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="projforge",
        description="simulated adversarial 3D projection attacks on object detectors",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file overriding defaults")
        p.add_argument("--seed", type=int, help="override the stage seed")
        p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("fit-tps", help="fit the geometric transformation model")
    p.add_argument("controls", help="control point file (sx sy tx ty per line)")
    p.add_argument("--out-model", required=True)
    p.add_argument("--regularization", type=float)
    p.add_argument("--verify", action="store_true")
    common(p)
    p.set_defaults(handler=cmd_fit_tps)

    p = sub.add_parser("fit-color", help="train the color mapping model")
    p.add_argument("dataset", help="dataset file (9 reals per line)")
    p.add_argument("--out-model", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--step-size", dest="step_size", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument(
        "--synthesize", nargs=2, metavar=("LAW", "SEED"),
        help="write a synthetic capture dataset to DATASET first",
    )
    common(p)
    p.set_defaults(handler=cmd_fit_color)

    p = sub.add_parser("train-patch", help="optimize the adversarial patch")
    p.add_argument("bundles", nargs="+", help="scene bundle directories")
    p.add_argument("--detector", required=True, help="detector weights file")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--iterations", type=int)
    p.add_argument("--step-size", dest="step_size", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--tv-weight", dest="tv_weight", type=float)
    p.add_argument("--granularity", type=int)
    p.add_argument("--samples-per-step", dest="samples_per_step", type=int)
    common(p)
    p.set_defaults(handler=cmd_train_patch)

    p = sub.add_parser("evaluate", help="run the OMDR condition sweep")
    p.add_argument("--bundles", nargs="+", required=True)
    p.add_argument("--patch", required=True, help="projector patch image")
    p.add_argument("--detector", required=True)
    p.add_argument("--out", required=True)
    p.add_argument(
        "--ambient", action="append",
        help="ambient condition NAME=MODELFILE, or a shipped name (low/mid/high)",
    )
    p.add_argument("--frames", type=int)
    p.add_argument("--threshold", type=float)
    common(p)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("diag", help="run a verification suite")
    p.add_argument("target", choices=("gradients", "tps", "determinism"))
    common(p)
    p.set_defaults(handler=cmd_diag)

    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    from .errors import InputError, NumericalError

    try:
        return args.handler(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
