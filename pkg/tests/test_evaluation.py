import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from movemes.evaluation import (
    ProtocolError, angle_metrics, angle_recovery, classify_activities, export_embedding_features,
    generalization_curve, min_adjacent_swaps, moveme_interpolation, position_errors, reorder_sequences,
    sequences_from_poses, tls_order,
)
from movemes.models import FactorModel, TrainConfig
from movemes.optim import train
from movemes.pose import PoseSet
from movemes.synth import ARM_JOINTS, LEG_JOINTS, SynthSpec, disjoint_classes, fixture_bases, generate

from conftest import PROFILE, chain_skeleton, random_model
from oracles import bubble_sort_swaps

perms = st.integers(1, 8).flatmap(lambda m: st.permutations(list(range(m))))


# --- permutation metrics ----------------------------------------------------------

def test_swap_examples():
    assert min_adjacent_swaps([0, 1, 2, 3]) == 0
    assert min_adjacent_swaps([3, 2, 1, 0]) == 6
    assert min_adjacent_swaps([1, 0, 3, 2]) == 2
    assert position_errors([1, 0, 3, 2]) == 4


@given(perms)
def test_swaps_match_bubble_sort(p):
    assert min_adjacent_swaps(p) == bubble_sort_swaps(p)


@given(perms)
def test_identity_characterizations(p):
    is_id = list(p) == sorted(p)
    assert (min_adjacent_swaps(p) == 0) == is_id
    assert (position_errors(p) == 0) == is_id
    assert position_errors(p) != 1


@pytest.mark.parametrize("bad", [[0, 0], [1, 2], [0, 2, 1, 5]])
def test_invalid_permutations(bad):
    with pytest.raises(ValueError):
        min_adjacent_swaps(bad)
    with pytest.raises(ValueError):
        position_errors(bad)


# --- TLS ordering ---------------------------------------------------------------

def test_tls_collinear_ordered():
    C = np.outer([0.1, 0.4, 0.5, 0.9], [1.0, 2.0, -1.0])
    order, degen = tls_order(C, anchor=0)
    assert list(order) == [0, 1, 2, 3] and not degen


def test_tls_anchor_resolves_orientation():
    C = np.outer([0.9, 0.5, 0.4, 0.1], [1.0, 2.0])
    assert list(tls_order(C, anchor=0)[0]) == [0, 1, 2, 3]
    assert list(tls_order(C, anchor=3)[0]) == [3, 2, 1, 0]


def test_tls_degenerate():
    order, degen = tls_order(np.ones((4, 3)))
    assert degen


@given(st.permutations(list(range(6))))
def test_tls_order_free(shuffle):
    rng = np.random.default_rng(0)
    C = np.outer(np.sort(rng.random(6)), rng.normal(size=4)) + 1e-3 * rng.normal(size=(6, 4))
    ref = tls_order(C, anchor=0)[0]
    shuffle = np.array(shuffle)
    got = tls_order(C[shuffle], anchor=int(np.flatnonzero(shuffle == 0)[0]))[0]
    assert list(shuffle[got]) == list(ref)


def _line_model(rng, m=4, n_seq=10, noise=0.0):
    sk = chain_skeleton(3)
    n = m * n_seq
    V = np.zeros((3, n))
    seqs = []
    for q in range(n_seq):
        w = rng.normal(size=3)
        t = np.sort(rng.random(m))
        V[:, q * m:(q + 1) * m] = rng.normal(size=(3, 1)) + np.outer(w, t)
        seqs.append(list(range(q * m, (q + 1) * m)))
    V += noise * rng.normal(size=V.shape)
    model = FactorModel("svd", sk, np.zeros((6, 3)), V, np.zeros(6))
    return model, seqs


def test_reorder_perfect_lines(rng):
    model, seqs = _line_model(rng)
    res = reorder_sequences(model, seqs, trials=3, seed=1)
    assert res.n_sequences == 30 and res.exact_count == 30
    assert res.mean_errors == 0 and res.mean_swaps == 0
    np.testing.assert_array_equal(res.per_position_accuracy, 1.0)


def test_reorder_result_invariants(rng):
    model, seqs = _line_model(rng, noise=0.3)
    res = reorder_sequences(model, seqs, trials=5, seed=2, groups=["a", "b"] * 5)
    assert 0 <= res.exact_count <= res.n_sequences
    assert res.mean_swaps >= 0
    assert np.all((res.per_position_accuracy >= 0) & (res.per_position_accuracy <= 1))
    assert sum(g.n_sequences for g in res.by_group.values()) == res.n_sequences
    again = reorder_sequences(model, seqs, trials=5, seed=2, groups=["a", "b"] * 5)
    assert again.summary() == res.summary()


def test_reorder_rejects_svd_rot_and_bad_input(rng):
    with pytest.raises(ProtocolError, match="svd-rot"):
        reorder_sequences(random_model("svd-rot"), [[0, 1, 2]])
    model, _ = _line_model(rng)
    with pytest.raises(ProtocolError):
        reorder_sequences(model, [[0]])
    with pytest.raises(ProtocolError):
        reorder_sequences(model, [[0, 999]])


def test_sequences_from_poses():
    sk = chain_skeleton(2)
    ps = PoseSet(sk, np.zeros((4, 5)), labels=["x", "x", "y", "y", "x"], sequences=["b", "a", "b", "a", None],
                 frames=[1, 0, 0, 1, -1])
    names, seqs, groups = sequences_from_poses(ps)
    assert names == ["a", "b"]
    assert seqs == [[1, 3], [2, 0]]
    assert groups == ["x", "y"]


# --- angles -----------------------------------------------------------------------

def test_angle_metric_examples():
    th = np.random.default_rng(0).uniform(0, 2 * np.pi, 50)
    m = angle_metrics(th, th)
    assert m.rmse == 0 and m.cos_sim == 1
    m = angle_metrics(th + np.pi / 2, th)
    assert m.rmse == pytest.approx(90.0) and m.cos_sim == pytest.approx(0.0, abs=1e-12)
    shifted = angle_metrics(th + 0.1 + 2 * np.pi, th)
    base = angle_metrics(th + 0.1, th)
    assert shifted.rmse == pytest.approx(base.rmse) and shifted.cos_sim == pytest.approx(base.cos_sim)


def test_angle_wrapping_uses_shortest_arc():
    m = angle_metrics(np.radians([359.0]), np.radians([1.0]))
    assert m.rmse == pytest.approx(2.0)


def test_angle_recovery_requires_lfa3d_and_gt():
    with pytest.raises(ProtocolError):
        angle_recovery(random_model("svd"), np.zeros(20))
    with pytest.raises(ProtocolError):
        angle_recovery(random_model("lfa3d"), None)
    model = random_model("lfa3d")
    assert angle_recovery(model, model.theta).rmse == 0


# --- classification ---------------------------------------------------------------

def test_classify_single_class():
    res = classify_activities(random_model("svd"), ["a"] * 20)
    assert res.mean_accuracy == 1.0


def test_classify_small_class_error():
    labels = ["a"] * 17 + ["b"] * 3
    with pytest.raises(ProtocolError, match="'b'"):
        classify_activities(random_model("svd"), labels)


def test_classify_separable_and_deterministic():
    rng = np.random.default_rng(0)
    labels = np.repeat(["a", "b", "c"], 20)
    V = rng.normal(scale=0.1, size=(3, 60))
    for i, c in enumerate("abc"):
        V[i, labels == c] += 3.0
    model = FactorModel("svd", chain_skeleton(2), np.zeros((4, 3)), V, np.zeros(4))
    res = classify_activities(model, labels, seed=3)
    assert res.mean_accuracy == 1.0
    np.testing.assert_array_equal(res.confusion.sum(axis=1), [20, 20, 20])
    again = classify_activities(model, labels, seed=3)
    assert again.fold_accuracies == res.fold_accuracies


def test_classify_noiseless_disjoint_lfa3d():
    spec = SynthSpec(U_true=fixture_bases(6), classes=disjoint_classes(6), n=600, noise_sigma=0.0,
                     init3d_sigma=0.05, seed=3)
    poses, truth = generate(spec)
    cfg = TrainConfig(k=6, iters_per_epoch=6000, **PROFILE)
    model = train(poses, cfg, "lfa3d", init3d=truth.init3d)
    assert classify_activities(model, poses.labels).mean_accuracy >= 0.95


# --- generalization ---------------------------------------------------------------

def test_generalization_near_full_fraction_noiseless():
    spec = SynthSpec(n=300, noise_sigma=0.0, seed=5)
    poses, truth = generate(spec)
    cfg = TrainConfig(k=4, angle_init="ground-truth", iters_per_epoch=3000, **PROFILE)
    rows = generalization_curve(poses, cfg, [(poses.n - 1) / poses.n], repeats=2, init3d=truth.poses3d)
    assert rows[0].test_rmse_mean <= 1e-2 * spec.scale
    assert len(rows[0].test_rmse) == 2


def test_generalization_validation_and_jobs_invariance():
    spec = SynthSpec(n=120, seed=5)
    poses, truth = generate(spec)
    cfg = TrainConfig(k=4, iters_per_epoch=500, **PROFILE)
    with pytest.raises(ProtocolError):
        generalization_curve(poses, cfg, [1.0])
    a = generalization_curve(poses, cfg, [0.3, 0.6], repeats=2, seed=1, init3d=truth.init3d, jobs=1)
    b = generalization_curve(poses, cfg, [0.3, 0.6], repeats=2, seed=1, init3d=truth.init3d, jobs=2)
    assert [r.test_rmse for r in a] == [r.test_rmse for r in b]


# --- interpolation and export --------------------------------------------------------

def test_interpolation_linearity():
    model = random_model("lfa3d")
    frames = moveme_interpolation(model, 1, [0.0, 0.3, 1.0], theta=0.4)
    np.testing.assert_allclose(frames[0].pose3d.coords, model.mean)
    d1 = frames[1].pose3d.coords - model.mean
    d2 = frames[2].pose3d.coords - model.mean
    np.testing.assert_allclose(d2, d1 / 0.3, atol=1e-12)
    with pytest.raises(ProtocolError):
        moveme_interpolation(model, 3, [0.5])
    flat = moveme_interpolation(random_model("lfa2d"), 0, [0.0], cluster=2)
    assert flat[0].pose3d is None


def test_leg_moveme_interpolation_stays_on_legs():
    spec = SynthSpec(n=1)
    model = FactorModel("lfa3d", spec.skeleton, spec.U_true, np.zeros((4, 1)), spec.mean_true, theta=np.zeros(1))
    frames = moveme_interpolation(model, 1, [0.3, 1.0])
    disp = (frames[-1].pose3d.coords - model.mean).reshape(3, 14)
    mag = np.linalg.norm(disp, axis=0)
    names = spec.skeleton.joint_names
    arm = max(mag[names.index(j)] for j in ARM_JOINTS)
    leg = max(mag[names.index(j)] for j in LEG_JOINTS)
    assert arm <= 0.05 * leg


def test_embedding_export(tmp_path):
    model = random_model("lfa3d", n=3)
    path = tmp_path / "emb.csv"
    export_embedding_features(model, path, ids=["a", "b", "c"], labels=["x", None, "y"])
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["pose_id", "label", "theta", "v1", "v2", "v3"]
    assert len(rows) == 4 and all(len(r) == model.k + 3 for r in rows)
    V = np.array([[float(x) for x in r[3:]] for r in rows[1:]]).T
    np.testing.assert_allclose(V, model.V, atol=1e-9)
    assert rows[2][1] == ""
