import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from movemes.models import CLUSTERED, FactorModel, ModelError, TrainConfig, encode_batch, objective, rmse
from movemes.optim import (
    DivergenceError, finite_difference, gradient_check, grad, init_angles, init_bases, init_model, numeric_grad,
    numerical_rank, soft_threshold, train, truncated_svd,
)
from movemes.pose import PoseSet, lift_to_3d, project_to_2d
from movemes.synth import SynthSpec, generate, with_overrides

from conftest import PROFILE, chain_skeleton, random_model, random_poses
from oracles import jacobi_eigh, optimal_rank_k_error

VARIANTS = ["svd", "svd-rot", "lfa2d", "lfa3d"]


# --- soft threshold -----------------------------------------------------------

@pytest.mark.parametrize("x,lam,expected", [(0.0, 0.7, 0.0), (1.5, 0.5, 1.0), (-0.3, 0.5, 0.0), (-2.0, 0.5, -1.5)])
def test_soft_threshold_examples(x, lam, expected):
    assert soft_threshold(x, lam) == pytest.approx(expected)


@given(st.floats(-1e6, 1e6), st.floats(0, 1e6))
def test_soft_threshold_is_shrinkage(x, lam):
    y = soft_threshold(x, lam)
    assert abs(y) <= abs(x)
    assert y == 0 or np.sign(y) == np.sign(x)


@given(st.floats(-100, 100), st.floats(0, 10))
def test_soft_threshold_is_prox(x, lam):
    # the prox minimizes 0.5 (z - x)^2 + lam |z|
    y = soft_threshold(x, lam)
    f = lambda z: 0.5 * (z - x) ** 2 + lam * abs(z)
    for z in (y - 1e-3, y + 1e-3, 0.0, x):
        assert f(y) <= f(z) + 1e-9


def test_soft_threshold_rejects_negative_lambda():
    with pytest.raises(ValueError):
        soft_threshold(1.0, -0.1)


# --- gradients ------------------------------------------------------------------

@pytest.mark.parametrize("variant", VARIANTS)
@given(seed=st.integers(0, 2 ** 31))
@settings(max_examples=10, deadline=None)
def test_gradient_matches_finite_differences(variant, seed):
    rng = np.random.default_rng(seed)
    model = random_model(variant, d=5, k=3, n=20, rng=rng, lambda_U=0.1, lambda_spat=0.2)
    poses = random_poses(d=5, n=20, rng=rng)
    assert gradient_check(model, poses, int(rng.integers(20)), h=1e-6, rtol=1e-5, atol=1e-8)


@pytest.mark.parametrize("variant", VARIANTS)
def test_gradient_zero_at_perfect_fit(variant):
    model = random_model(variant, lambda_U=0.0, lambda_spat=0.0)
    poses = PoseSet(model.skeleton, model.reconstruct_all())
    g = grad(model, poses, 4)
    assert np.abs(g.U).max() <= 1e-10
    assert np.abs(g.v).max() <= 1e-10
    assert abs(g.theta) <= 1e-10
    if g.U_y is not None:
        assert np.abs(g.U_y).max() <= 1e-10


def test_masked_gradient_matches_finite_differences(rng):
    model = random_model("lfa3d", mask_visibility=True, rng=rng)
    vis = rng.random((5, 20)) > 0.3
    poses = PoseSet(model.skeleton, rng.normal(size=(10, 20)), visibility=vis)
    assert gradient_check(model, poses, 3)


def test_spatial_term_gradient():
    # isolate the spatial term: zero residual weight via perfect fit, no Frobenius penalty
    model = random_model("lfa2d", lambda_U=0.0, lambda_spat=0.3, rng=np.random.default_rng(2))
    poses = PoseSet(model.skeleton, model.reconstruct_all())
    g = grad(model, poses, 0)
    K = model.config.kappa_matrix()
    X = model.U
    expected = np.zeros_like(X)
    for a in range(model.p):
        for b in range(model.p):
            expected[a] += 2 * 0.3 * K[a, b] * (X[a] - X[b]) + 2 * 0.3 * K[b, a] * (X[a] - X[b])
    np.testing.assert_allclose(g.U, expected, atol=1e-12)

    from movemes.models import spatial_regularizer

    def f(x):
        m = model.copy()
        m.U = x
        return spatial_regularizer(m)
    np.testing.assert_allclose(finite_difference(f, X), expected, rtol=1e-6, atol=1e-8)


def test_finite_difference_quadratic():
    A = np.array([[2.0, 1.0], [1.0, 3.0]])
    x = np.array([0.5, -1.0])
    np.testing.assert_allclose(finite_difference(lambda z: z @ A @ z, x), 2 * A @ x, atol=1e-7)


def test_grad_index_error():
    model = random_model("svd")
    with pytest.raises(IndexError):
        grad(model, random_poses(), 20)


# --- truncated SVD ----------------------------------------------------------------

def test_jacobi_oracle_sanity(rng):
    A = rng.normal(size=(6, 6))
    A = A + A.T
    w, V = jacobi_eigh(A)
    np.testing.assert_allclose(V @ np.diag(w) @ V.T, A, atol=1e-10)
    np.testing.assert_allclose(w, np.sort(np.linalg.eigvalsh(A))[::-1], atol=1e-10)


@pytest.mark.parametrize("shape,k", [((12, 7), 3), ((9, 15), 4), ((20, 20), 1)])
def test_truncated_svd_is_optimal(rng, shape, k):
    A = rng.normal(size=shape)
    U, s, Vt = truncated_svd(A, k)
    err = np.linalg.norm(A - U @ np.diag(s) @ Vt)
    assert abs(err - optimal_rank_k_error(A, k)) <= 1e-8
    np.testing.assert_allclose(U.T @ U, np.eye(k), atol=1e-12)
    # sign convention: the largest entry of each left vector is positive
    assert np.all(U[np.argmax(np.abs(U), axis=0), np.arange(k)] > 0)


def test_truncated_svd_rank_checks(rng):
    with pytest.raises(ModelError):
        truncated_svd(rng.normal(size=(4, 3)), 4)
    A = rng.normal(size=(10, 2)) @ rng.normal(size=(2, 8))
    assert numerical_rank(A) == 2
    assert numerical_rank(np.zeros((3, 3))) == 0


# --- initialization -----------------------------------------------------------------

def _gt_poses(n=200, seed=0):
    rng = np.random.default_rng(seed)
    return PoseSet(chain_skeleton(4), rng.normal(size=(8, n)), gt_angles=rng.uniform(0, 2 * np.pi, n))


def test_init_angles_modes():
    poses = _gt_poses()
    assert np.array_equal(init_angles(poses, "ground-truth"), poses.gt_angles)
    one = PoseSet(chain_skeleton(2), np.zeros((4, 1)), gt_angles=[np.radians(10)])
    assert np.degrees(init_angles(one, "coarse", p=4)[0]) == pytest.approx(45.0)
    r1, r2 = init_angles(poses, "random", seed=3), init_angles(poses, "random", seed=3)
    assert np.array_equal(r1, r2)
    with pytest.raises(ModelError):
        init_angles(PoseSet(chain_skeleton(2), np.zeros((4, 2))), "coarse")


def test_init_angles_random_is_uniform():
    poses = PoseSet(chain_skeleton(2), np.zeros((4, 10000)))
    th = init_angles(poses, "random", seed=11)
    assert np.all((th >= 0) & (th < 2 * np.pi))
    se = (2 * np.pi / np.sqrt(12)) / np.sqrt(th.size)
    assert abs(th.mean() - np.pi) <= 3 * se


def test_svd_init_exact_on_rank_k_data(rng):
    sk = chain_skeleton(6)
    S = rng.normal(size=(12, 3)) @ rng.normal(size=(3, 40)) + rng.normal(size=(12, 1))
    poses = PoseSet(sk, S)
    model = init_model(poses, "svd", TrainConfig(k=3))
    assert objective(model, poses).recon_error <= 1e-8


def test_init_rejects_rank_deficiency(rng):
    sk = chain_skeleton(6)
    S = rng.normal(size=(12, 2)) @ rng.normal(size=(2, 40))
    with pytest.raises(ModelError, match="rank"):
        init_model(PoseSet(sk, S), "svd", TrainConfig(k=3))


def test_lfa2d_init_deterministic_and_uniform():
    poses = _gt_poses()
    cfg = TrainConfig(k=2, angle_init="ground-truth")
    a = init_model(poses, "lfa2d", cfg, rng=np.random.default_rng(5))
    b = init_model(poses, "lfa2d", cfg, rng=np.random.default_rng(5))
    assert np.array_equal(a.U, b.U) and np.array_equal(a.U_y, b.U_y)
    assert np.all(np.abs(a.U) <= 1) and np.all(np.abs(a.U_y) <= 1)


def test_svd_rot_init_per_cluster_means():
    poses = _gt_poses(400)
    model = init_model(poses, "svd-rot", TrainConfig(k=2, angle_init="ground-truth"))
    for a in range(4):
        cols = model.clusters == a
        np.testing.assert_allclose(model.mean[a], poses.S[:, cols].mean(axis=1), atol=1e-12)


def test_lfa3d_init_from_ground_truth_hits_noise_floor():
    spec = SynthSpec(n=500, noise_sigma=0.01, seed=2)
    poses, truth = generate(spec)
    cfg = TrainConfig(k=4, angle_init="ground-truth", lambda_U=0.0, lambda_V=0.0)
    model = init_model(poses, "lfa3d", cfg, init3d=truth.poses3d)
    floor = (2 * poses.d * poses.n) * truth.noise_abs ** 2
    assert objective(model, poses).total == pytest.approx(floor, rel=0.10)


def test_lfa3d_lift_fallback():
    spec = SynthSpec(n=50, noise_sigma=0.0, seed=1)
    poses, _ = generate(spec)
    theta0 = poses.gt_angles
    b = init_bases(poses, "lfa3d", TrainConfig(k=4), theta0=theta0)
    # the lifted poses project back onto the data at the initial angles
    lifted = lift_to_3d(poses.S, theta0)
    np.testing.assert_allclose(project_to_2d(lifted, theta0), poses.S, atol=1e-12)
    np.testing.assert_allclose(b.mean, lifted.mean(axis=1))
    with pytest.raises(ModelError):
        init_bases(poses, "lfa3d", TrainConfig(k=4))


# --- training ---------------------------------------------------------------------

def test_zero_learning_rates_return_initialization():
    poses = _gt_poses(60)
    for variant in VARIANTS:
        cfg = TrainConfig(k=2, lr_UV=0.0, lr_theta=0.0, iters_per_epoch=50, angle_init="coarse", seed=4)
        model = train(poses, cfg, variant)
        init = init_model(poses, variant, cfg, rng=np.random.default_rng(np.random.SeedSequence(4).spawn(2)[0]))
        assert np.array_equal(model.U, init.U) and np.array_equal(model.V, init.V)
        if variant != "svd":
            assert np.array_equal(model.theta, init.theta)


@pytest.mark.parametrize("variant", VARIANTS)
def test_training_is_deterministic(variant):
    poses = _gt_poses(80)
    cfg = TrainConfig(k=2, iters_per_epoch=300, lr_UV=0.01, lr_theta=0.01, seed=9)
    a, b = train(poses, cfg, variant), train(poses, cfg, variant)
    assert np.array_equal(a.U, b.U) and np.array_equal(a.V, b.V)
    assert a.loss_trace == b.loss_trace
    c = train(poses, TrainConfig(k=2, iters_per_epoch=300, lr_UV=0.01, lr_theta=0.01, seed=10), variant)
    assert not np.array_equal(a.V, c.V)


def test_svd_sgd_recovers_noiseless_low_rank(rng):
    sk = chain_skeleton(6)
    S = rng.normal(size=(12, 3)) @ rng.uniform(0, 1, size=(3, 100)) * 0.5
    poses = PoseSet(sk, S)
    cfg = TrainConfig(k=3, lambda_U=0.0, lambda_V=0.0, lr_UV=0.02, iters_per_epoch=20000)
    start = init_model(poses, "svd", cfg)
    start.U = start.U + rng.normal(scale=0.3, size=start.U.shape)
    start.V = start.V + rng.normal(scale=0.3, size=start.V.shape)
    first = objective(start, poses).recon_error
    model = train(poses, cfg, "svd", init=start)
    assert objective(model, poses).recon_error <= 1e-3 * first


def test_lfa2d_y_blocks_shared_after_training():
    poses = _gt_poses(80)
    model = train(poses, TrainConfig(k=2, iters_per_epoch=500, lr_UV=0.01), "lfa2d")
    blocks = [model.basis(a)[model.d:] for a in range(model.p)]
    for blk in blocks[1:]:
        assert np.array_equal(blk, blocks[0])


@pytest.mark.parametrize("variant", VARIANTS)
def test_nonneg_mode_box_constraint(variant):
    poses = _gt_poses(80)
    model = train(poses, TrainConfig(k=2, iters_per_epoch=300, lr_UV=0.01, nonneg_V=True), variant)
    assert np.all((model.V >= 0) & (model.V <= 1))


def test_angles_stay_wrapped():
    spec = SynthSpec(n=200, seed=3)
    poses, truth = generate(spec)
    cfg = TrainConfig(k=4, iters_per_epoch=500, angle_init="random", **PROFILE)
    model = train(poses, cfg, "lfa3d", init3d=truth.init3d)
    assert np.all((model.theta >= 0) & (model.theta < 2 * np.pi))


def test_divergence_reports_last_good_model():
    poses = _gt_poses(50)
    cfg = TrainConfig(k=2, lr_UV=5.0, iters_per_epoch=200, epochs=3)
    with pytest.raises(DivergenceError) as info:
        train(poses, cfg, "svd")
    last = info.value.last_model
    assert isinstance(last, FactorModel)
    assert np.all(np.isfinite(last.U))


def test_empty_dataset_rejected():
    with pytest.raises(ModelError):
        train(PoseSet(chain_skeleton(3), np.zeros((6, 0))), TrainConfig(k=1), "svd")


def test_loss_trace_file(tmp_path):
    poses = _gt_poses(40)
    path = tmp_path / "trace.csv"
    model = train(poses, TrainConfig(k=2, iters_per_epoch=100, lr_UV=0.01), "svd", trace_path=path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,iter,recon_error,reg,total"
    assert len(lines) == 1 + len(model.loss_trace) == 5
    assert [r["iter"] for r in model.loss_trace] == [0, 100, 200, 300]


def test_default_config_loss_non_increasing():
    spec = SynthSpec(n=500, seed=5)
    poses, truth = generate(spec)
    model = train(poses, TrainConfig(k=4, iters_per_epoch=3000), "lfa3d", init3d=truth.init3d)
    totals = [r["total"] for r in model.loss_trace]
    for prev, cur in zip(totals, totals[1:]):
        assert cur <= 1.05 * prev


def test_lfa3d_held_out_encode_within_twice_noise():
    spec = SynthSpec(n=2000, noise_sigma=0.01, init3d_sigma=0.05, seed=6)
    poses, truth = generate(spec)
    model = train(poses, TrainConfig(k=4, **PROFILE), "lfa3d", init3d=truth.init3d)
    held, _ = generate(with_overrides(spec, n=100, seed=60))
    theta0 = init_angles(held, "coarse", 4)
    _, _, err = encode_batch(model, held.S, theta0)
    assert err.mean() <= 2 * truth.noise_abs
