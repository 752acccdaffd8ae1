import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from splatdiff.scene_model import GaussianScene, activate_table  # noqa: E402
from splatdiff.splat_io import SplatTable  # noqa: E402
from splatdiff.synth import DriftSpec, RigSpec, SurfaceSpec, SynthSpec, generate_camera_ring  # noqa: E402


def random_table(n, rng, spread=1.0, log_scale=(-3.5, -2.0)):
    q = rng.normal(size=(n, 4))
    return SplatTable(
        position=rng.uniform(-spread, spread, (n, 3)),
        rotation=q,
        log_scales=rng.uniform(*log_scale, (n, 3)),
        opacity_logit=rng.normal(1.0, 1.0, n),
        sh_dc=rng.normal(0.0, 0.5, (n, 3)),
    )


def ring(count=8, radius=4.0, height=1.0, width=64, h=48, focal=60.0, first_id=1, phase=0.0):
    return generate_camera_ring([0.0, 0.0, height], radius, count, [0.0, 0.0, 0.0], width, h, focal, phase, first_id)


def random_scene(n, seed=0, cameras=None, spread=0.6):
    rng = np.random.default_rng(seed)
    return activate_table(random_table(n, rng, spread), cameras if cameras is not None else ring())


def jittered_copy(scene: GaussianScene, seed, pos_sigma=0.01, color_sigma=0.02, cameras=None):
    rng = np.random.default_rng(seed)
    return GaussianScene(
        mu=scene.mu + rng.normal(0, pos_sigma, scene.mu.shape),
        R=scene.R.copy(), scales=scene.scales.copy(), cov=scene.cov.copy(),
        opacity=scene.opacity.copy(),
        color=np.clip(scene.color + rng.normal(0, color_sigma, scene.color.shape), 0, 1),
        normal=scene.normal.copy(),
        cameras=list(cameras if cameras is not None else scene.cameras),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_psd(rng, n=3, scale=1.0):
    A = rng.normal(size=(n, n)) * scale
    return A @ A.T


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def is_psd(A, tol=1e-12):
    A = np.asarray(A)
    return np.linalg.eigvalsh(0.5 * (A + np.swapaxes(A, -1, -2))).min() >= -tol * max(1.0, np.abs(A).max())


def small_spec(seed=0, drift=None, changes=()):
    return SynthSpec(
        seed=seed,
        surfaces=[
            SurfaceSpec("floor", "plane", [0.0, 0.0, 0.0], [2.0, 2.0], density=80.0),
            SurfaceSpec("box", "box", [0.2, 0.1, 0.2], [0.4, 0.4, 0.4], color=[0.8, 0.2, 0.2], density=200.0),
        ],
        drift=drift or DriftSpec(0.01, 0.003, 0.15, 0.02),
        changes=list(changes),
        rig1=RigSpec([0, 0, 1.5], 3.0, 6, [0, 0, 0.2], 48, 36, 40.0),
        rig2=RigSpec([0, 0, 1.2], 2.8, 5, [0, 0, 0.2], 48, 36, 40.0, phase=0.3, first_id=101),
    )


# acceptance criteria report, filled by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
