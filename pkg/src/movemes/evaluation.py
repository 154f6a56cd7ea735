"""Evaluation protocols over trained factor models.

Each protocol reads model coefficients or angles and returns plain result
objects; `movemes.io` turns them into CSV/JSON reports.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .models import FactorModel, ModelError, TrainConfig, encode_batch, rmse
from .pose import Pose2D, Pose3D, PoseSet, angle_difference, project_to_2d

log = logging.getLogger(__name__)


class ProtocolError(ValueError):
    """A protocol was asked to run on an incompatible model or input."""


# ----------------------------------------------------------------------------
# activity classification


@dataclass
class ClassificationResult:
    classes: list
    mean_accuracy: float
    fold_accuracies: list
    per_class_accuracy: dict
    confusion: np.ndarray


def classify_activities(model: FactorModel, labels, folds: int = 5, seed: int = 0,
                        C: float = 1.0) -> ClassificationResult:
    """Cross-validated linear classification with the columns of ``V`` as features.

    One-vs-rest L2-regularized logistic regression, features standardized on
    each training fold.  Confusion rows are true classes.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import StratifiedKFold
    from sklearn.multiclass import OneVsRestClassifier
    from sklearn.preprocessing import StandardScaler

    labels = np.asarray(labels, dtype=object)
    if labels.shape != (model.n,):
        raise ProtocolError(f"need one label per training pose ({model.n}), got {labels.shape}")
    classes = sorted(set(labels.tolist()), key=str)
    y = np.array([classes.index(l) for l in labels])
    counts = np.bincount(y, minlength=len(classes))
    if len(classes) == 1:
        conf = np.array([[model.n]])
        return ClassificationResult(classes, 1.0, [1.0] * folds, {classes[0]: 1.0}, conf)
    for c, cnt in zip(classes, counts):
        if cnt < folds:
            raise ProtocolError(f"class {c!r} has {cnt} members, fewer than {folds} folds")

    X = model.V.T
    skf = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    conf = np.zeros((len(classes), len(classes)), dtype=int)
    accs = []
    for train_idx, test_idx in skf.split(X, y):
        scaler = StandardScaler().fit(X[train_idx])
        clf = OneVsRestClassifier(LogisticRegression(C=C, solver="lbfgs", max_iter=1000))
        clf.fit(scaler.transform(X[train_idx]), y[train_idx])
        pred = clf.predict(scaler.transform(X[test_idx]))
        accs.append(float((pred == y[test_idx]).mean()))
        np.add.at(conf, (y[test_idx], pred), 1)
    per_class = {c: float(conf[i, i] / conf[i].sum()) for i, c in enumerate(classes)}
    return ClassificationResult(classes, float(np.mean(accs)), accs, per_class, conf)


# ----------------------------------------------------------------------------
# sequence reordering


def _validate_perm(perm) -> np.ndarray:
    p = np.asarray(perm)
    if p.ndim != 1 or not np.array_equal(np.sort(p), np.arange(p.size)):
        raise ValueError(f"not a permutation of 0..{p.size - 1}: {list(perm)}")
    return p.astype(int)


def min_adjacent_swaps(perm) -> int:
    """Minimum number of adjacent transpositions sorting ``perm`` (its inversion count)."""
    p = _validate_perm(perm).tolist()

    def sort_count(a):
        if len(a) < 2:
            return a, 0
        mid = len(a) // 2
        left, x = sort_count(a[:mid])
        right, y = sort_count(a[mid:])
        merged, inv, i, j = [], x + y, 0, 0
        while i < len(left) and j < len(right):
            if left[i] <= right[j]:
                merged.append(left[i])
                i += 1
            else:
                merged.append(right[j])
                inv += len(left) - i
                j += 1
        merged += left[i:] + right[j:]
        return merged, inv

    return sort_count(p)[1]


def position_errors(perm) -> int:
    """Number of positions holding the wrong element."""
    p = _validate_perm(perm)
    return int((p != np.arange(p.size)).sum())


def tls_order(coeffs: np.ndarray, anchor: Optional[int] = None, tol: float = 1e-12):
    """Order the rows of ``coeffs`` by projection on their total-least-squares line.

    Returns ``(order, degenerate)``.  A line has two orientations; with
    ``anchor`` the one placing that row earlier is chosen.
    """
    C = np.asarray(coeffs, dtype=float)
    if np.all(np.ptp(C, axis=0) <= tol):
        return np.arange(C.shape[0]), True
    Cc = C - C.mean(axis=0)
    direction = np.linalg.svd(Cc, full_matrices=False)[2][0]
    order = np.argsort(Cc @ direction, kind="stable")
    if anchor is not None:
        pos = int(np.flatnonzero(order == anchor)[0])
        if C.shape[0] - 1 - pos < pos:
            order = order[::-1]
    return order, False


@dataclass
class ReorderResult:
    n_sequences: int
    exact_count: int
    mean_errors: float
    mean_swaps: float
    per_position_accuracy: np.ndarray
    degenerate_count: int = 0
    by_group: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "n_sequences": self.n_sequences,
            "exact_count": self.exact_count,
            "mean_errors": self.mean_errors,
            "mean_swaps": self.mean_swaps,
            "per_position_accuracy": [float(a) for a in self.per_position_accuracy],
            "degenerate_count": self.degenerate_count,
        }


def _aggregate(recovered: list, degenerate: list) -> ReorderResult:
    R = np.array(recovered)
    m = R.shape[1]
    correct = R == np.arange(m)
    exact = correct.all(axis=1) & ~np.array(degenerate)
    errors = [position_errors(r) for r in R]
    swaps = [min_adjacent_swaps(r) for r in R]
    return ReorderResult(len(R), int(exact.sum()), float(np.mean(errors)), float(np.mean(swaps)),
                         correct.mean(axis=0), int(np.sum(degenerate)))


def reorder_sequences(model: FactorModel, sequences: Sequence[Sequence[int]], trials: int = 1,
                      seed: int = 0, groups: Optional[Sequence] = None) -> ReorderResult:
    """Recover the chronological order of shuffled sequences from their coefficients.

    ``sequences`` lists training-pose indices in true order.  Each trial
    shuffles a sequence, orders it along the line fit of its coefficient
    vectors and records the permutation still needed to correct it.
    """
    if model.variant == "svd-rot":
        raise ProtocolError(
            "svd-rot learns an independent basis per angle cluster, so its coefficients are not "
            "comparable across viewing angles and cannot be reordered")
    rng = np.random.default_rng(seed)
    recovered, degenerate, group_of = [], [], []
    for q, seq in enumerate(sequences):
        seq = np.asarray(seq, dtype=int)
        if seq.size < 2:
            raise ProtocolError(f"sequence {q} has fewer than two poses")
        if np.any((seq < 0) | (seq >= model.n)):
            raise ProtocolError(f"sequence {q} references poses outside the model")
        for _ in range(trials):
            shuffled = rng.permutation(seq.size)
            coeffs = model.V[:, seq[shuffled]].T
            anchor = int(np.flatnonzero(shuffled == 0)[0])
            order, degen = tls_order(coeffs, anchor)
            recovered.append(shuffled[order])
            degenerate.append(degen)
            group_of.append(None if groups is None else groups[q])
    if not recovered:
        raise ProtocolError("no sequences to reorder")
    result = _aggregate(recovered, degenerate)
    if groups is not None:
        for g in sorted(set(group_of), key=str):
            idx = [i for i, x in enumerate(group_of) if x == g]
            result.by_group[g] = _aggregate([recovered[i] for i in idx], [degenerate[i] for i in idx])
    return result


def sequences_from_poses(poses: PoseSet):
    """Group pose indices by their sequence id, ordered by frame number."""
    if poses.sequences is None or poses.frames is None:
        raise ProtocolError("dataset carries no sequence/frame annotations")
    seqs = {}
    for j, (s, f) in enumerate(zip(poses.sequences, poses.frames)):
        if s is None or s == "":
            continue
        seqs.setdefault(s, []).append((int(f), j))
    names = sorted(seqs)
    out, groups = [], []
    for s in names:
        out.append([j for _, j in sorted(seqs[s])])
        first = out[-1][0]
        groups.append(None if poses.labels is None else poses.labels[first])
    return names, out, groups


# ----------------------------------------------------------------------------
# angle recovery


@dataclass
class AngleMetrics:
    rmse: float     # degrees
    cos_sim: float
    n: int


def angle_metrics(learned, gt) -> AngleMetrics:
    diff = angle_difference(learned, gt)
    return AngleMetrics(float(np.degrees(np.sqrt(np.mean(diff ** 2)))), float(np.mean(np.cos(diff))), int(diff.size))


def angle_recovery(model: FactorModel, gt_angles) -> AngleMetrics:
    """RMSE (degrees) and mean cosine of wrapped differences to ground truth."""
    if model.variant != "lfa3d":
        raise ProtocolError("angle recovery needs an lfa3d model")
    if gt_angles is None:
        raise ProtocolError("angle recovery needs ground-truth angles")
    gt = np.asarray(gt_angles, dtype=float)
    if gt.shape != (model.n,):
        raise ProtocolError("need one ground-truth angle per training pose")
    return angle_metrics(model.theta, gt)


# ----------------------------------------------------------------------------
# generalization


def _generalization_task(args):
    from .optim import init_angles, train

    poses, config, fraction, init3d, seed_seq = args
    split_seq, angle_seq = seed_seq.spawn(2)
    rng = np.random.default_rng(split_seq)
    n = poses.n
    n_train = int(round(fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    perm = rng.permutation(n)
    tr, te = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    train_set, test_set = poses.subset(tr), poses.subset(te)
    sub3d = None if init3d is None else np.asarray(init3d)[:, tr]
    try:
        model = train(train_set, config, "lfa3d", init3d=sub3d)
    except ModelError as exc:
        raise ProtocolError(f"training fraction {fraction}: {exc}") from exc
    theta0 = init_angles(test_set, config.angle_init, config.p, np.random.default_rng(angle_seq))
    mask = test_set.visibility if config.mask_visibility else None
    _, _, err = encode_batch(model, test_set.S, theta0, mask)
    return rmse(model, train_set), float(np.sqrt(np.mean(err ** 2)))


@dataclass
class GeneralizationRow:
    fraction: float
    train_rmse_mean: float
    train_rmse_sd: float
    test_rmse_mean: float
    test_rmse_sd: float
    train_rmse: list
    test_rmse: list


def generalization_curve(poses: PoseSet, config: TrainConfig, fractions: Sequence[float], repeats: int = 5,
                         seed: int = 0, init3d=None, jobs: int = 1) -> list:
    """Train lfa3d on random subsets and encode the held-out rest.

    Every (fraction, repeat) task draws its split and held-out angle guesses
    from its own child of ``seed``, so results do not depend on ``jobs``.
    """
    for f in fractions:
        if not 0.0 < f < 1.0:
            raise ProtocolError(f"training fractions must lie in (0, 1), got {f}")
    children = np.random.SeedSequence(seed).spawn(len(fractions) * repeats)
    tasks = [(poses, config, f, init3d, children[i * repeats + r])
             for i, f in enumerate(fractions) for r in range(repeats)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_generalization_task, tasks))
    else:
        results = [_generalization_task(t) for t in tasks]
    rows = []
    for i, f in enumerate(fractions):
        chunk = results[i * repeats:(i + 1) * repeats]
        tr = [r[0] for r in chunk]
        te = [r[1] for r in chunk]
        rows.append(GeneralizationRow(float(f), float(np.mean(tr)), float(np.std(tr, ddof=1) if repeats > 1 else 0.0),
                                      float(np.mean(te)), float(np.std(te, ddof=1) if repeats > 1 else 0.0), tr, te))
    return rows


# ----------------------------------------------------------------------------
# moveme visualization and embedding export


@dataclass
class Frame:
    alpha: float
    pose2d: Pose2D
    pose3d: Optional[Pose3D] = None


def moveme_interpolation(model: FactorModel, basis_index: int, alphas: Sequence[float],
                         theta: float = 0.0, cluster: int = 0) -> list:
    """Mean pose plus increasing fractions of one basis column.

    lfa3d frames carry the canonical 3-D pose and its projection at
    ``theta``; 2-D variants use the basis of ``cluster`` when clustered.
    """
    if not 0 <= basis_index < model.k:
        raise ProtocolError(f"basis index {basis_index} out of range for k={model.k}")
    frames = []
    if model.variant == "lfa3d":
        u = model.U[:, basis_index]
        for a in alphas:
            p3 = model.mean + a * u
            frames.append(Frame(float(a), Pose2D(project_to_2d(p3, theta)), Pose3D(p3)))
        return frames
    a_idx = cluster if model.clustered else None
    u = model.basis(a_idx)[:, basis_index]
    mu = model.cluster_mean(a_idx)
    for a in alphas:
        frames.append(Frame(float(a), Pose2D(mu + a * u)))
    return frames


def export_embedding_features(model: FactorModel, path, ids=None, labels=None) -> None:
    """Write ``pose_id, label, theta, v1..vk`` rows for external embedding tools."""
    ids = [str(j) for j in range(model.n)] if ids is None else list(ids)
    labels = [""] * model.n if labels is None else ["" if l is None else str(l) for l in labels]
    if model.theta is not None:
        theta = model.theta
    else:
        theta = [float("nan")] * model.n
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pose_id", "label", "theta"] + [f"v{i + 1}" for i in range(model.k)])
        for j in range(model.n):
            w.writerow([ids[j], labels[j], repr(float(theta[j]))] + [repr(float(x)) for x in model.V[:, j]])
