"""Initialization and alternating stochastic gradient descent for `FactorModel`.

Each epoch runs ``iters_per_epoch`` representation steps, each on one
randomly drawn pose (gradient step on the bases and that pose's
coefficients, followed by soft-thresholding of the coefficients).  For lfa3d
an angle phase then sweeps all poses, moving each angle ``angle_steps``
times along its own gradient with the bases and coefficients frozen.
"""

from __future__ import annotations

import logging
from typing import Callable, NamedTuple, Optional

import numpy as np

from .models import (
    CLUSTERED,
    FactorModel,
    ModelError,
    TrainConfig,
    assign_clusters,
    cluster_centers,
    objective,
)
from .pose import TWO_PI, PoseSet, lift_to_3d, mean_pose, wrap_angle

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training objective became non-finite or exploded."""

    def __init__(self, message: str, last_model: Optional[FactorModel] = None):
        super().__init__(message)
        self.last_model = last_model


def soft_threshold(x, lam):
    """Proximal map of ``lam * |x|``: ``sign(x) * max(|x| - lam, 0)``."""
    if np.any(np.asarray(lam) < 0):
        raise ValueError("threshold must be non-negative")
    x = np.asarray(x, dtype=float)
    out = np.sign(x) * np.maximum(np.abs(x) - lam, 0.0)
    return float(out) if out.ndim == 0 else out


# ----------------------------------------------------------------------------
# truncated SVD


def truncated_svd(A: np.ndarray, k: int):
    """Rank-``k`` SVD ``A ~ U diag(s) Vt`` with a deterministic sign convention.

    Each left singular vector is flipped so its largest-magnitude entry is
    positive.
    """
    A = np.asarray(A, dtype=float)
    if k < 1 or k > min(A.shape):
        raise ModelError(f"rank {k} out of range for a {A.shape[0]}x{A.shape[1]} matrix")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    U, s, Vt = U[:, :k], s[:k], Vt[:k]
    flip = np.sign(U[np.argmax(np.abs(U), axis=0), np.arange(k)])
    flip[flip == 0] = 1.0
    return U * flip, s, Vt * flip[:, None]


def numerical_rank(A: np.ndarray) -> int:
    s = np.linalg.svd(np.asarray(A, dtype=float), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    tol = max(A.shape) * np.finfo(float).eps * s[0]
    return int((s > tol).sum())


def _svd_factors(C: np.ndarray, k: int, what: str):
    rank = numerical_rank(C)
    if k > rank:
        raise ModelError(f"rank k={k} exceeds the rank ({rank}) of the centered {what}")
    U, s, Vt = truncated_svd(C, k)
    return U, s[:, None] * Vt


# ----------------------------------------------------------------------------
# initialization


def init_angles(poses: PoseSet, mode: str, p: int = 4, seed=0) -> np.ndarray:
    """Initial viewing angles: uniform random, gt quantized to ``p`` bucket centers, or gt."""
    if mode == "random":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return wrap_angle(rng.uniform(0.0, TWO_PI, poses.n))
    if mode not in ("coarse", "ground-truth"):
        raise ModelError(f"unknown angle init mode {mode!r}")
    if poses.gt_angles is None:
        raise ModelError(f"angle init {mode!r} needs ground-truth angles in the dataset")
    if mode == "ground-truth":
        return poses.gt_angles.copy()
    return cluster_centers(p)[assign_clusters(poses.gt_angles, p)]


class Bases(NamedTuple):
    U: np.ndarray
    mean: np.ndarray
    U_y: Optional[np.ndarray] = None
    V: Optional[np.ndarray] = None


def init_bases(poses: PoseSet, variant: str, config: TrainConfig, init3d: Optional[np.ndarray] = None,
               theta0: Optional[np.ndarray] = None, clusters: Optional[np.ndarray] = None,
               rng: Optional[np.random.Generator] = None) -> Bases:
    """Initial bases and mean pose(s) for ``variant``.

    svd and svd-rot take the truncated SVD of the (per-cluster) mean-centered
    data; lfa2d draws bases uniformly from [-1, 1].  lfa3d takes the SVD of
    centered canonical-frame 3-D poses ``init3d`` of shape ``(3d, n)``; when
    absent, each 2-D pose is lifted onto the image plane and un-rotated by its
    initial angle.  SVD-based inits also return the matching coefficients.
    """
    k = config.k
    d = poses.d
    masked = config.mask_visibility
    rng = np.random.default_rng(config.seed) if rng is None else rng

    if variant == "svd":
        mu = mean_pose(poses, masked=masked)
        U, V = _svd_factors(poses.S - mu[:, None], k, "2-D data")
        return Bases(U, mu, V=V)

    if variant in CLUSTERED:
        if clusters is None:
            raise ModelError(f"{variant} needs cluster assignments")
        p = config.p
        global_mu = mean_pose(poses, masked=masked)
        means = np.tile(global_mu, (p, 1))
        for a in range(p):
            cols = np.flatnonzero(clusters == a)
            if cols.size:
                means[a] = mean_pose(poses.subset(cols), masked=masked)
        if variant == "svd-rot":
            U = np.zeros((p, 2 * d, k))
            V = np.zeros((k, poses.n))
            for a in range(p):
                cols = np.flatnonzero(clusters == a)
                C = poses.S[:, cols] - means[a][:, None]
                U[a], V[:, cols] = _svd_factors(C, k, f"data of angle cluster {a}")
            return Bases(U, means, V=V)
        Ux = rng.uniform(-1.0, 1.0, (p, d, k))
        Uy = rng.uniform(-1.0, 1.0, (d, k))
        return Bases(Ux, means, U_y=Uy)

    if variant == "lfa3d":
        if init3d is None:
            if theta0 is None:
                raise ModelError("the z-lift fallback needs initial angles")
            init3d = lift_to_3d(poses.S, theta0)
        init3d = np.asarray(init3d, dtype=float)
        if init3d.shape != (3 * d, poses.n):
            raise ModelError(f"init3d must have shape {(3 * d, poses.n)}, got {init3d.shape}")
        mu = init3d.mean(axis=1)
        U, V = _svd_factors(init3d - mu[:, None], k, "3-D initialization poses")
        return Bases(U, mu, V=V)

    raise ModelError(f"unknown variant {variant!r}")


def _ls_coefficients(model: FactorModel, poses: PoseSet) -> np.ndarray:
    V = np.zeros((model.k, poses.n))
    for a in range(model.p):
        cols = np.flatnonzero(model.clusters == a)
        if cols.size:
            B = model.basis(a)
            V[:, cols] = np.linalg.lstsq(B, poses.S[:, cols] - model.mean[a][:, None], rcond=None)[0]
    return V


def init_model(poses: PoseSet, variant: str, config: TrainConfig, init3d=None,
               rng: Optional[np.random.Generator] = None) -> FactorModel:
    """Build the starting point of training."""
    if poses.n < 1:
        raise ModelError("cannot train on an empty dataset")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    theta = None
    clusters = None
    if variant != "svd":
        theta = init_angles(poses, config.angle_init, config.p, rng)
    if variant in CLUSTERED:
        clusters = assign_clusters(theta, config.p)
    b = init_bases(poses, variant, config, init3d=init3d, theta0=theta, clusters=clusters, rng=rng)
    V = b.V if b.V is not None else np.zeros((config.k, poses.n))
    model = FactorModel(variant, poses.skeleton, b.U, V, b.mean, theta=theta,
                        clusters=clusters, U_y=b.U_y, config=config)
    if b.V is None:
        model.V = _ls_coefficients(model, poses)
    if config.nonneg_V:
        model.V = np.clip(model.V, 0.0, 1.0)
    return model


# ----------------------------------------------------------------------------
# gradients


class Gradient(NamedTuple):
    U: np.ndarray
    v: np.ndarray
    theta: float = 0.0
    U_y: Optional[np.ndarray] = None


def _smooth_reg_grad(model: FactorModel):
    """Gradient of the smooth regularizer w.r.t. ``U`` (and ``U_y``)."""
    lam = model.config.lambda_U
    if model.variant != "lfa2d":
        return 2.0 * lam * model.U, None
    K = model.config.kappa_matrix()
    W = K + K.T
    X = model.U
    # d/dX_a of sum_{a,a'} K[a,a'] ||X_a - X_a'||^2 = 2 sum_b (K[a,b] + K[b,a]) (X_a - X_b)
    spat = 2.0 * model.config.lambda_spat * (W.sum(1)[:, None, None] * X - np.einsum("ab,bik->aik", W, X))
    return 2.0 * lam * X + spat, 2.0 * lam * model.p * model.U_y


def grad(model: FactorModel, poses: PoseSet, j: int, reg_scale: float = 1.0) -> Gradient:
    """Gradient of ``||s_j - f(mean + U v_j, theta_j)||^2 + reg_scale * Omega_smooth``.

    ``Omega_smooth`` is the Frobenius penalty on the bases plus the lfa2d
    spatial term; the L1 penalty on ``v_j`` is left to soft-thresholding.
    The angle entry is zero except for lfa3d.
    """
    if not 0 <= j < model.n:
        raise IndexError(f"pose index {j} out of range")
    gU_reg, gUy_reg = _smooth_reg_grad(model)
    d = model.d
    s = poses.S[:, j]
    v = model.V[:, j]
    m = poses.coord_mask()[:, j] if model.config.mask_visibility else 1.0

    if model.variant == "lfa3d":
        r = model.mean + model.U @ v
        c, sn = np.cos(model.theta[j]), np.sin(model.theta[j])
        x, y, z = r[:d], r[d:2 * d], r[2 * d:]
        e = (s - np.concatenate([c * x + sn * z, y])) * m
        ex, ey = e[:d], e[d:]
        g_r = -2.0 * np.concatenate([c * ex, ey, sn * ex])
        g_theta = float(-2.0 * ex @ (-sn * x + c * z))
        return Gradient(np.outer(g_r, v) + reg_scale * gU_reg, model.U.T @ g_r, g_theta)

    a = model.clusters[j] if model.clustered else None
    B = model.basis(a)
    e = (s - model.cluster_mean(a) - B @ v) * m
    g_s = -2.0 * e
    gB = np.outer(g_s, v)
    gv = B.T @ g_s
    if model.variant == "svd":
        return Gradient(gB + reg_scale * gU_reg, gv)
    gU = reg_scale * gU_reg
    if model.variant == "svd-rot":
        gU[a] += gB
        return Gradient(gU, gv)
    gU[a] += gB[:d]
    return Gradient(gU, gv, 0.0, gB[d:] + reg_scale * gUy_reg)


def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def _instance_loss(model: FactorModel, poses: PoseSet, j: int, reg_scale: float = 1.0) -> float:
    from .models import smooth_regularizer

    e = poses.S[:, j] - model.reconstruct(j)
    if model.config.mask_visibility:
        e = e * poses.coord_mask()[:, j]
    return float(e @ e) + reg_scale * smooth_regularizer(model)


def numeric_grad(model: FactorModel, poses: PoseSet, j: int, h: float = 1e-6,
                 reg_scale: float = 1.0) -> Gradient:
    """Finite-difference counterpart of `grad`, for checking."""
    work = model.copy()

    def wrt(attr, index=None):
        def f(x):
            if index is None:
                setattr(work, attr, x)
            else:
                getattr(work, attr)[:, index] = x
            return _instance_loss(work, poses, j, reg_scale)
        base = getattr(model, attr) if index is None else getattr(model, attr)[:, index]
        g = finite_difference(f, base, h)
        if index is None:
            setattr(work, attr, np.array(base))
        else:
            getattr(work, attr)[:, index] = base
        return g

    gU = wrt("U")
    gv = wrt("V", j)
    gUy = wrt("U_y") if model.variant == "lfa2d" else None
    gth = 0.0
    if model.variant == "lfa3d":
        def f_theta(t):
            work.theta[j] = t[0]
            return _instance_loss(work, poses, j, reg_scale)
        gth = float(finite_difference(f_theta, np.array([model.theta[j]]), h)[0])
        work.theta[j] = model.theta[j]
    return Gradient(gU, gv, gth, gUy)


def gradient_check(model: FactorModel, poses: PoseSet, j: int, h: float = 1e-6,
                   rtol: float = 1e-5, atol: float = 1e-8) -> bool:
    """True when analytic and central-difference gradients agree componentwise."""
    a = grad(model, poses, j)
    b = numeric_grad(model, poses, j, h)
    pairs = [(a.U, b.U), (a.v, b.v), (np.atleast_1d(a.theta), np.atleast_1d(b.theta))]
    if a.U_y is not None:
        pairs.append((a.U_y, b.U_y))
    return all(np.all(np.abs(x - y) <= atol + rtol * np.abs(y)) for x, y in pairs)


# ----------------------------------------------------------------------------
# training


def _representation_step(model: FactorModel, S: np.ndarray, Mk: Optional[np.ndarray], j: int,
                         lr: float, reg_scale: float):
    cfg = model.config
    d = model.d
    v = model.V[:, j]
    s = S[:, j]
    lam_U = 2.0 * cfg.lambda_U * reg_scale
    if model.variant == "lfa3d":
        U = model.U
        r = model.mean + U @ v
        c, sn = np.cos(model.theta[j]), np.sin(model.theta[j])
        e = s - np.concatenate([c * r[:d] + sn * r[2 * d:], r[d:2 * d]])
        if Mk is not None:
            e *= Mk[:, j]
        ex = e[:d]
        g_r = -2.0 * np.concatenate([c * ex, e[d:], sn * ex])
        gv = U.T @ g_r
        U -= lr * (np.outer(g_r, v) + lam_U * U)
    elif model.variant == "svd":
        U = model.U
        e = s - model.mean - U @ v
        if Mk is not None:
            e *= Mk[:, j]
        gv = -2.0 * (U.T @ e)
        U -= lr * (-2.0 * np.outer(e, v) + lam_U * U)
    else:
        a = model.clusters[j]
        B = model.basis(a)
        e = s - model.mean[a] - B @ v
        if Mk is not None:
            e *= Mk[:, j]
        gv = -2.0 * (B.T @ e)
        gB = -2.0 * np.outer(e, v)
        if model.variant == "svd-rot":
            model.U *= 1.0 - lr * lam_U
            model.U[a] -= lr * gB
        else:
            gX, gY = _smooth_reg_grad(model)
            model.U -= lr * reg_scale * gX
            model.U[a] -= lr * gB[:d]
            model.U_y -= lr * (gB[d:] + reg_scale * gY)
    v_new = soft_threshold(v - lr * gv, lr * cfg.lambda_V)
    if cfg.nonneg_V:
        v_new = np.clip(v_new, 0.0, 1.0)
    model.V[:, j] = v_new


def angle_gradients(model: FactorModel, poses: PoseSet) -> np.ndarray:
    """Per-pose derivative of the reconstruction error w.r.t. each angle (lfa3d)."""
    d = model.d
    R = model.mean[:, None] + model.U @ model.V
    X, Y, Z = R[:d], R[d:2 * d], R[2 * d:]
    c, s = np.cos(model.theta), np.sin(model.theta)
    ex = poses.S[:d] - (c * X + s * Z)
    if model.config.mask_visibility:
        ex = ex * poses.visibility
    return -2.0 * (ex * (-s * X + c * Z)).sum(axis=0)


def _angle_phase(model: FactorModel, poses: PoseSet):
    cfg = model.config
    for _ in range(cfg.angle_steps):
        model.theta = wrap_angle(model.theta - cfg.lr_theta * angle_gradients(model, poses))


def _trace_row(epoch: int, it: int, obj) -> dict:
    return {"epoch": epoch, "iter": it, "recon_error": obj.recon_error, "reg": obj.reg, "total": obj.total}


def train(poses: PoseSet, config: TrainConfig, variant: str, init3d=None,
          trace_path=None, init: Optional[FactorModel] = None) -> FactorModel:
    """Fit a factor model by alternating proximal SGD.

    The run is a pure function of ``(poses, config, variant, init3d)``.  The
    bases' smooth penalty is spread over the ``n`` stochastic steps of a pass
    (scaled by ``1/n``) so one pass descends the full objective.

    Raises `DivergenceError` carrying the last finite model when the
    objective becomes non-finite or grows beyond 1e6 times its initial value.
    """
    if variant in CLUSTERED and config.p < 1:
        raise ModelError(f"{variant} needs p >= 1 clusters")
    root = np.random.SeedSequence(config.seed)
    init_seq, order_seq = root.spawn(2)
    if init is None:
        model = init_model(poses, variant, config, init3d=init3d, rng=np.random.default_rng(init_seq))
    else:
        model = init.copy()
    rng = np.random.default_rng(order_seq)
    n = poses.n
    Mk = poses.coord_mask().astype(float) if config.mask_visibility else None
    S = poses.S
    reg_scale = 1.0 / n

    obj = objective(model, poses)
    first = obj.total
    trace = [_trace_row(0, 0, obj)]
    last_good = model.copy()
    for epoch in range(1, config.epochs + 1):
        order = rng.integers(0, n, size=config.iters_per_epoch)
        # overflow is caught by the divergence guard below
        with np.errstate(over="ignore", invalid="ignore"):
            if config.lr_UV > 0:
                for j in order:
                    _representation_step(model, S, Mk, int(j), config.lr_UV, reg_scale)
            if variant == "lfa3d" and config.lr_theta > 0:
                _angle_phase(model, poses)
            obj = objective(model, poses)
        trace.append(_trace_row(epoch, epoch * config.iters_per_epoch, obj))
        log.debug("epoch %d: total %.6g (recon %.6g, reg %.6g)", epoch, obj.total, obj.recon_error, obj.reg)
        if not np.isfinite(obj.total) or obj.total > 1e6 * max(first, np.finfo(float).tiny):
            last_good.loss_trace = trace[:-1]
            raise DivergenceError(
                f"objective diverged at epoch {epoch} ({obj.total:.3g}, initial {first:.3g})", last_good)
        last_good = model.copy()
    model.loss_trace = trace
    if trace_path is not None:
        from .io import write_loss_trace

        write_loss_trace(trace, trace_path)
    return model
