"""Session fixtures: the synthetic world is built once and shared.

The expensive pieces (the 500-iteration attack run and the condition sweep)
are session-scoped so the acceptance tests and the module tests reuse one
deterministic run.
"""

import numpy as np
import pytest

from projforge import attack as atk
from projforge.detector import DetectorThreshold
from projforge.evalharness import SweepSpec, run_sweep
from projforge.fixtures import (
    ProjectionAug,
    benign_fixture_scene,
    build_world,
    make_detector_dataset,
)

ATTACK_SEED = 7
ATTACK_ITERATIONS = 500


@pytest.fixture(scope="session")
def world(tmp_path_factory):
    root = tmp_path_factory.mktemp("world")
    return build_world(root)


@pytest.fixture(scope="session")
def benign_scene(world):
    return benign_fixture_scene(world)


@pytest.fixture(scope="session")
def detector_dataset(tmp_path_factory, world):
    root = tmp_path_factory.mktemp("detector_data")
    aug = ProjectionAug(color=world.ambients["low"])
    return {
        "train": make_detector_dataset(root / "train", n=200, seed=1000, projection=aug),
        "held": make_detector_dataset(root / "held", n=60, seed=2000),
        "small_train": make_detector_dataset(root / "small", n=48, seed=3000),
    }


def fixture_attack_config(world, iterations=ATTACK_ITERATIONS, samples_per_step=2):
    spec = atk.TransformSpec(
        scale=(0.85, 1.15), translate_frac=0.05, rotate_deg=(-8.0, 8.0),
        brightness=(-0.08, 0.08), noise_sigma=0.015,
    )
    return atk.AttackConfig(
        lam=0.01, p=2.0, tv_weight=1.0, step_size=0.1,
        iterations=iterations, seed=ATTACK_SEED, granularity=10,
        checkpoint_every=100,
        eot=atk.EotConfig(
            views=world.views, backgrounds=world.backgrounds[:2],
            transforms=[spec], samples_per_step=samples_per_step,
        ),
    )


@pytest.fixture(scope="session")
def attack_run(world):
    cfg = fixture_attack_config(world)
    initial = atk.PatchParams.initial(cfg.granularity, 40, 40)
    return atk.run_attack(initial, world.detector, cfg)


@pytest.fixture(scope="session")
def sweep_grid(world, attack_run):
    spec = SweepSpec(
        distances=[("1.5m", 1.0), ("2.0m", 0.8), ("2.5m", 0.6)],
        frames_per_cell=12,
        seed=99,
    )
    ambients = [(name, world.ambients[name]) for name in ("low", "mid", "high")]
    return run_sweep(
        world.views, world.backgrounds, attack_run.patch.delta(),
        world.detector, ambients, DetectorThreshold(), spec,
    )
