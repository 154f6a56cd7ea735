"""Latent factor models of 2-D pose data.

Four variants share one container, `FactorModel`:

``svd``      one global 2-D basis, ``s = mean + U v``
``svd-rot``  one independent 2-D basis and mean per viewing-angle cluster
``lfa2d``    per-cluster 2-D bases tied by a spatial regularizer, with the
             y-block of the basis shared by all clusters
``lfa3d``    one global 3-D basis, ``s = [Q(theta) (mean + U v)]^(x,y)``
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .pose import TWO_PI, PoseError, PoseSet, Skeleton, wrap_angle

VARIANTS = ("svd", "svd-rot", "lfa2d", "lfa3d")
CLUSTERED = ("svd-rot", "lfa2d")
ANGLE_INITS = ("random", "coarse", "ground-truth")


class ModelError(ValueError):
    """Inconsistent model, configuration or input dimensions."""


@dataclass
class TrainConfig:
    """Hyperparameters of a training run.

    The default step sizes suit pixel-scale annotation data; they are tied
    to the coordinate scale of the data.  ``kappa`` defaults to 1 between angularly adjacent clusters.
    """

    k: int = 4
    lambda_U: float = 1e-3
    lambda_V: float = 1e-2
    lambda_spat: float = 1e-2
    kappa: Optional[list] = None
    p: int = 4
    epochs: int = 3
    iters_per_epoch: int = 10000
    lr_UV: float = 1e-4
    lr_theta: float = 1e-6
    angle_steps: int = 1
    seed: int = 0
    angle_init: str = "coarse"
    nonneg_V: bool = False
    mask_visibility: bool = False
    encode_iters: int = 300

    def __post_init__(self):
        if self.k < 1:
            raise ModelError(f"rank k must be >= 1, got {self.k}")
        for name in ("lambda_U", "lambda_V", "lambda_spat"):
            if getattr(self, name) < 0:
                raise ModelError(f"{name} must be non-negative")
        if self.lr_UV < 0 or self.lr_theta < 0:
            raise ModelError("learning rates must be non-negative")
        if self.p < 1:
            raise ModelError("cluster count p must be >= 1")
        if self.epochs < 0 or self.iters_per_epoch < 0 or self.angle_steps < 0 or self.encode_iters < 0:
            raise ModelError("iteration counts must be non-negative")
        if self.angle_init not in ANGLE_INITS:
            raise ModelError(f"angle_init must be one of {ANGLE_INITS}, got {self.angle_init!r}")
        if self.kappa is not None:
            K = np.asarray(self.kappa, dtype=float)
            if K.shape != (self.p, self.p) or np.any(K < 0):
                raise ModelError(f"kappa must be a non-negative {self.p}x{self.p} matrix")
            self.kappa = K.tolist()

    def kappa_matrix(self) -> np.ndarray:
        if self.kappa is not None:
            return np.asarray(self.kappa, dtype=float)
        return default_kappa(self.p)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = cls.__dataclass_fields__
        unknown = set(data) - set(known)
        if unknown:
            raise ModelError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def default_kappa(p: int) -> np.ndarray:
    K = np.zeros((p, p))
    for a in range(p):
        for b in range(p):
            if a != b and ((a - b) % p in (1, p - 1)):
                K[a, b] = 1.0
    return K


def cluster_centers(p: int) -> np.ndarray:
    """Centers of ``p`` uniform angle buckets covering [0, 2*pi)."""
    return (2 * np.arange(p) + 1) * np.pi / p


def assign_clusters(theta, p: int) -> np.ndarray:
    """Index of the nearest bucket center for each angle."""
    theta = wrap_angle(np.asarray(theta, dtype=float))
    return np.minimum((theta // (TWO_PI / p)).astype(int), p - 1)


@dataclass
class FactorModel:
    """Learned bases, coefficients and viewing angles.

    ``U`` layout per variant: ``(2d, k)`` for svd, ``(3d, k)`` for lfa3d,
    ``(p, 2d, k)`` for svd-rot and ``(p, d, k)`` x-blocks for lfa2d, whose
    y-block is stored once in ``U_y`` with shape ``(d, k)``.  ``mean`` is
    ``(2d,)``, ``(3d,)`` or ``(p, 2d)`` accordingly.
    """

    variant: str
    skeleton: Skeleton
    U: np.ndarray
    V: np.ndarray
    mean: np.ndarray
    theta: Optional[np.ndarray] = None
    clusters: Optional[np.ndarray] = None
    U_y: Optional[np.ndarray] = None
    config: TrainConfig = field(default_factory=TrainConfig)
    loss_trace: list = field(default_factory=list)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        d = self.skeleton.d
        self.U = np.asarray(self.U, dtype=float)
        self.V = np.asarray(self.V, dtype=float)
        self.mean = np.asarray(self.mean, dtype=float)
        k = self.V.shape[0]
        if k < 1 or self.V.ndim != 2:
            raise ModelError("V must be a (k, n) matrix with k >= 1")
        expected = {
            "svd": ((2 * d, k), (2 * d,)),
            "lfa3d": ((3 * d, k), (3 * d,)),
        }
        if self.variant in expected:
            shape_u, shape_m = expected[self.variant]
        else:
            if self.clusters is None:
                raise ModelError(f"{self.variant} needs cluster assignments")
            p = self.U.shape[0]
            rows = d if self.variant == "lfa2d" else 2 * d
            shape_u, shape_m = (p, rows, k), (p, 2 * d)
            self.clusters = np.asarray(self.clusters, dtype=int)
            if self.clusters.shape != (self.n,) or np.any((self.clusters < 0) | (self.clusters >= p)):
                raise ModelError("cluster assignments out of range")
        if self.U.shape != shape_u or self.mean.shape != shape_m:
            raise ModelError(
                f"{self.variant}: U {self.U.shape} / mean {self.mean.shape}, expected {shape_u} / {shape_m}")
        if self.variant == "lfa2d":
            if self.U_y is None:
                raise ModelError("lfa2d needs the shared y-block U_y")
            self.U_y = np.asarray(self.U_y, dtype=float)
            if self.U_y.shape != (d, k):
                raise ModelError(f"U_y must have shape {(d, k)}")
        elif self.U_y is not None:
            raise ModelError("U_y is only used by lfa2d")
        if self.theta is not None:
            self.theta = np.asarray(self.theta, dtype=float)
            if self.theta.shape != (self.n,):
                raise ModelError("theta must hold one angle per training pose")

    @property
    def k(self) -> int:
        return self.V.shape[0]

    @property
    def n(self) -> int:
        return self.V.shape[1]

    @property
    def d(self) -> int:
        return self.skeleton.d

    @property
    def p(self) -> int:
        return self.U.shape[0] if self.variant in CLUSTERED else 1

    @property
    def clustered(self) -> bool:
        return self.variant in CLUSTERED

    def basis(self, a: Optional[int] = None) -> np.ndarray:
        """Full basis matrix; for clustered variants the one of cluster ``a``."""
        if self.variant == "lfa2d":
            return np.vstack([self.U[a], self.U_y])
        if self.variant == "svd-rot":
            return self.U[a]
        return self.U

    def cluster_mean(self, a: Optional[int] = None) -> np.ndarray:
        return self.mean[a] if self.clustered else self.mean

    def copy(self) -> "FactorModel":
        return copy.deepcopy(self)

    def predict(self, V: np.ndarray, theta=None, clusters=None) -> np.ndarray:
        """2-D reconstructions ``f(mean + U v, theta)`` for the columns of ``V``."""
        V = np.asarray(V, dtype=float)
        if V.ndim == 1:
            return self.predict(V[:, None], None if theta is None else np.atleast_1d(theta),
                                None if clusters is None else np.atleast_1d(clusters))[:, 0]
        if self.variant == "svd":
            return self.mean[:, None] + self.U @ V
        if self.variant == "lfa3d":
            d = self.d
            R = self.mean[:, None] + self.U @ V
            theta = np.asarray(theta, dtype=float)
            return np.vstack([np.cos(theta) * R[:d] + np.sin(theta) * R[2 * d:], R[d:2 * d]])
        clusters = np.asarray(clusters, dtype=int)
        out = np.empty((2 * self.d, V.shape[1]))
        for a in np.unique(clusters):
            cols = clusters == a
            out[:, cols] = self.mean[a][:, None] + self.basis(a) @ V[:, cols]
        return out

    def reconstruct_all(self) -> np.ndarray:
        return self.predict(self.V, self.theta, self.clusters)

    def reconstruct(self, j: int) -> np.ndarray:
        """2-D reconstruction of training pose ``j``."""
        if not 0 <= j < self.n:
            raise IndexError(f"pose index {j} out of range for {self.n} poses")
        th = None if self.theta is None else self.theta[j]
        cl = None if self.clusters is None else self.clusters[j]
        return self.predict(self.V[:, j], th, cl)

    def reconstruct_3d(self, j: int) -> np.ndarray:
        """Canonical-frame 3-D pose of training instance ``j`` (lfa3d only)."""
        if self.variant != "lfa3d":
            raise ModelError("3-D reconstructions need an lfa3d model")
        return self.mean + self.U @ self.V[:, j]


# ----------------------------------------------------------------------------
# objective


class Objective(NamedTuple):
    total: float
    recon_error: float
    reg: float


def _check_data(model: FactorModel, poses: PoseSet):
    if poses.skeleton.d != model.d:
        raise ModelError(f"dataset has {poses.skeleton.d} joints, model has {model.d}")
    if poses.n != model.n:
        raise ModelError(f"dataset has {poses.n} poses, model has {model.n} coefficient columns")


def residuals(model: FactorModel, poses: PoseSet) -> np.ndarray:
    """``S - f(mean + U V, theta)`` with hidden joints zeroed when masking is on."""
    _check_data(model, poses)
    E = poses.S - model.reconstruct_all()
    if model.config.mask_visibility:
        E = E * poses.coord_mask()
    return E


def spatial_regularizer(model: FactorModel) -> float:
    """Weighted pairwise distance between the per-cluster x-blocks of an lfa2d basis."""
    if model.variant != "lfa2d":
        raise ModelError("the spatial regularizer is defined for lfa2d only")
    K = model.config.kappa_matrix()
    if K.shape != (model.p, model.p):
        raise ModelError(f"kappa is {K.shape}, model has {model.p} clusters")
    X = model.U
    diff = X[:, None] - X[None, :]
    dist = (diff ** 2).sum(axis=(2, 3))
    return float(model.config.lambda_spat * (K * dist).sum())


def smooth_regularizer(model: FactorModel) -> float:
    """Frobenius penalty on the bases plus, for lfa2d, the spatial term."""
    cfg = model.config
    if model.variant == "lfa2d":
        # each cluster basis [U_x(a); U_y] is penalized, so the shared block counts p times
        fro = (model.U ** 2).sum() + model.p * (model.U_y ** 2).sum()
        return float(cfg.lambda_U * fro + spatial_regularizer(model))
    return float(cfg.lambda_U * (model.U ** 2).sum())


def regularizer(model: FactorModel) -> float:
    return smooth_regularizer(model) + float(model.config.lambda_V * np.abs(model.V).sum())


def objective(model: FactorModel, poses: PoseSet) -> Objective:
    E = residuals(model, poses)
    recon = float((E ** 2).sum())
    reg = regularizer(model)
    return Objective(recon + reg, recon, reg)


def rmse(model: FactorModel, poses: PoseSet) -> float:
    """Root mean squared per-joint 2-D reconstruction error over the set."""
    E = residuals(model, poses)
    if model.config.mask_visibility:
        return float(np.sqrt((E ** 2).sum() / poses.visibility.sum()))
    return float(np.sqrt((E ** 2).sum() / (poses.d * poses.n)))


# ----------------------------------------------------------------------------
# held-out encoding


def _soft(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def encode_batch(model: FactorModel, S, theta_init, mask=None, iters: Optional[int] = None):
    """Fit coefficients (and, for lfa3d, angles) of new poses with the bases frozen.

    Solves ``min ||s - f(mean + U v, theta)||^2 + lambda_V ||v||_1`` per column
    of ``S`` by proximal gradient steps on ``v`` interleaved with angle steps.
    Step sizes come from the local curvature so the budget is scale-free.

    Returns ``(V, theta, rmse)``, keeping the best iterate of each pose.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != 2 * model.d:
        raise ModelError(f"poses must have {2 * model.d} coordinates, got {S.shape[0]}")
    m = S.shape[1]
    theta = wrap_angle(np.broadcast_to(np.asarray(theta_init, dtype=float), (m,)).copy())
    theta = np.atleast_1d(theta)
    M = np.ones_like(S) if mask is None else np.vstack([mask, mask]).astype(float)
    iters = model.config.encode_iters if iters is None else iters
    lam = model.config.lambda_V
    nonneg = model.config.nonneg_V
    d = model.d
    k = model.k
    njoints = np.maximum(M[:d].sum(axis=0), 1)

    if model.variant == "lfa3d":
        Ux, Uy, Uz = model.U[:d], model.U[d:2 * d], model.U[2 * d:]
        mx, my, mz = model.mean[:d, None], model.mean[d:2 * d, None], model.mean[2 * d:, None]
        Gxx, Gzz, Gyy = Ux.T @ Ux, Uz.T @ Uz, Uy.T @ Uy
        Gxz = Ux.T @ Uz + Uz.T @ Ux

        def parts(V, th):
            X, Z = mx + Ux @ V, mz + Uz @ V
            c, s = np.cos(th), np.sin(th)
            ex = (S[:d] - (c * X + s * Z)) * M[:d]
            ey = (S[d:] - (my + Uy @ V)) * M[d:]
            return X, Z, c, s, ex, ey

        def loss(V, th):
            *_, ex, ey = parts(V, th)
            return (ex ** 2).sum(0) + (ey ** 2).sum(0) + lam * np.abs(V).sum(0)

        V = np.zeros((k, m))
        best_V, best_th, best = V.copy(), theta.copy(), loss(V, theta)
        for _ in range(iters):
            X, Z, c, s, ex, ey = parts(V, theta)
            gv = -2.0 * (Ux.T @ (c * ex) + Uz.T @ (s * ex) + Uy.T @ ey)
            G = (c ** 2)[:, None, None] * Gxx + (c * s)[:, None, None] * Gxz \
                + (s ** 2)[:, None, None] * Gzz + Gyy
            L = 2.0 * np.linalg.eigvalsh(G)[:, -1] + 1e-12
            V = _soft(V - gv / L, lam / L)
            if nonneg:
                V = np.clip(V, 0.0, 1.0)

            X, Z, c, s, ex, ey = parts(V, theta)
            dpx = -s * X + c * Z
            gth = -2.0 * (ex * dpx).sum(0)
            curv = 2.0 * (M[:d] * dpx ** 2).sum(0) + 1e-12
            step = np.clip(-gth / curv, -0.5, 0.5)
            cur = loss(V, theta)
            for _ in range(6):
                cand = wrap_angle(theta + step)
                new = loss(V, cand)
                ok = new <= cur
                theta = np.where(ok, cand, theta)
                cur = np.where(ok, new, cur)
                step = np.where(ok, 0.0, step * 0.5)
                if not np.any(step):
                    break
            better = cur < best
            best = np.where(better, cur, best)
            best_V[:, better] = V[:, better]
            best_th[better] = theta[better]
        V, theta = best_V, best_th
        pred = model.predict(V, theta)
    else:
        if model.clustered:
            clusters = assign_clusters(theta, model.p)
        else:
            clusters = np.zeros(m, dtype=int)
        V = np.zeros((k, m))
        for a in np.unique(clusters):
            cols = np.flatnonzero(clusters == a)
            B = model.basis(a if model.clustered else None)
            mu = model.cluster_mean(a if model.clustered else None)
            Sa, Ma = S[:, cols], M[:, cols]
            L = 2.0 * np.linalg.norm(B, 2) ** 2 + 1e-12
            W = np.zeros((k, cols.size))
            for _ in range(iters):
                E = (Sa - mu[:, None] - B @ W) * Ma
                W = _soft(W + 2.0 * (B.T @ E) / L, lam / L)
                if nonneg:
                    W = np.clip(W, 0.0, 1.0)
            V[:, cols] = W
        pred = model.predict(V, theta, clusters if model.clustered else None)
    E = (S - pred) * M
    err = np.sqrt((E ** 2).sum(axis=0) / njoints)
    return V, theta, err


def encode(model: FactorModel, pose, theta_init: float = 0.0, mask=None, iters: Optional[int] = None):
    """Encode a single 2-D pose; returns ``(v, theta, rmse)``."""
    coords = getattr(pose, "coords", pose)
    if mask is None and getattr(pose, "visibility", None) is not None and model.config.mask_visibility:
        mask = pose.visibility
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 1:
        raise PoseError("encode expects a single pose vector")
    V, th, err = encode_batch(model, coords[:, None], [theta_init],
                              None if mask is None else np.asarray(mask)[:, None], iters)
    return V[:, 0], float(th[0]), float(err[0])
