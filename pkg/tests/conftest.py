import numpy as np
import pytest

from movemes.models import FactorModel, TrainConfig, assign_clusters
from movemes.pose import PoseSet, Skeleton

# Synthetic training profile: step sizes matched to pose-scale (~0.5) coordinates.
PROFILE = dict(lr_UV=0.005, lr_theta=0.1, angle_steps=20)


def chain_skeleton(d: int) -> Skeleton:
    names = tuple(f"j{i}" for i in range(d))
    bones = tuple((i, i + 1) for i in range(d - 1))
    return Skeleton(names, bones, torso=((0, 1),))


def random_model(variant: str, d=5, k=3, n=20, p=4, rng=None, **cfg) -> FactorModel:
    rng = np.random.default_rng(0) if rng is None else rng
    sk = chain_skeleton(d)
    config = TrainConfig(k=k, p=p, **cfg)
    theta = clusters = U_y = None
    if variant == "lfa3d":
        U = rng.normal(size=(3 * d, k))
        mean = rng.normal(size=3 * d)
        theta = rng.uniform(0, 2 * np.pi, n)
    elif variant == "svd":
        U = rng.normal(size=(2 * d, k))
        mean = rng.normal(size=2 * d)
    else:
        theta = rng.uniform(0, 2 * np.pi, n)
        clusters = assign_clusters(theta, p)
        mean = rng.normal(size=(p, 2 * d))
        if variant == "svd-rot":
            U = rng.normal(size=(p, 2 * d, k))
        else:
            U = rng.normal(size=(p, d, k))
            U_y = rng.normal(size=(d, k))
    V = rng.normal(size=(k, n))
    return FactorModel(variant, sk, U, V, mean, theta=theta, clusters=clusters, U_y=U_y, config=config)


def random_poses(d=5, n=20, rng=None) -> PoseSet:
    rng = np.random.default_rng(1) if rng is None else rng
    return PoseSet(chain_skeleton(d), rng.normal(size=(2 * d, n)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
