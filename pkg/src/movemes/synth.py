"""Synthetic pose data with known bases, coefficients and viewing angles.

Every generated pose is ``mean + U_true v`` in a canonical 3-D frame, rotated
by its pan angle, projected orthographically and perturbed by i.i.d. noise.
A noisy copy of the canonical 3-D poses stands in for the output of an
external 3-D pose estimator (``init3d``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .pose import TWO_PI, PoseSet, Skeleton, lsp_skeleton, pose_scale, project_to_2d, wrap_angle

# canonical frame: x to the subject's left, y up, z towards the camera
_MEAN_JOINTS = {
    "right_ankle": (-0.15, -0.90, 0.00),
    "right_knee": (-0.13, -0.48, 0.12),
    "right_hip": (-0.11, -0.02, 0.00),
    "left_hip": (0.11, -0.02, 0.00),
    "left_knee": (0.13, -0.48, 0.12),
    "left_ankle": (0.15, -0.90, 0.00),
    "right_wrist": (-0.30, 0.05, 0.25),
    "right_elbow": (-0.26, 0.25, 0.08),
    "right_shoulder": (-0.19, 0.48, 0.00),
    "left_shoulder": (0.19, 0.48, 0.00),
    "left_elbow": (0.26, 0.25, 0.08),
    "left_wrist": (0.30, 0.05, 0.25),
    "neck": (0.00, 0.50, 0.00),
    "head_top": (0.00, 0.78, 0.04),
}

# localized displacements, one dict per moveme: joint -> (dx, dy, dz)
_MOVEMES = (
    # right arm reaching forward and up
    {"right_wrist": (0.05, 0.50, 0.30), "right_elbow": (0.02, 0.25, 0.20)},
    # left leg kick
    {"left_knee": (0.00, 0.15, 0.30), "left_ankle": (0.00, 0.30, 0.50)},
    # left arm overhead
    {"left_elbow": (0.05, 0.35, -0.05), "left_wrist": (0.05, 0.70, -0.10)},
    # right leg stepping back
    {"right_knee": (0.00, 0.05, -0.20), "right_ankle": (0.00, 0.15, -0.45)},
    # upper body bending forward
    {"neck": (0.0, -0.05, 0.20), "head_top": (0.0, -0.08, 0.30),
     "right_shoulder": (0.0, -0.04, 0.18), "left_shoulder": (0.0, -0.04, 0.18)},
    # right arm swinging across the body
    {"right_wrist": (0.40, 0.00, 0.25), "right_elbow": (0.15, 0.00, 0.15)},
    # both arms up
    {"right_wrist": (0.0, 0.6, 0.0), "right_elbow": (0.0, 0.3, 0.0),
     "left_wrist": (0.0, 0.6, 0.0), "left_elbow": (0.0, 0.3, 0.0)},
    # left arm punching forward
    {"left_wrist": (-0.05, 0.10, 0.45), "left_elbow": (0.0, 0.05, 0.20)},
)

ARM_JOINTS = ("right_wrist", "right_elbow", "right_shoulder", "left_shoulder", "left_elbow", "left_wrist")
LEG_JOINTS = ("right_ankle", "right_knee", "right_hip", "left_hip", "left_knee", "left_ankle")


def _block(joints: dict, skeleton: Skeleton) -> np.ndarray:
    d = skeleton.d
    out = np.zeros(3 * d)
    for name, xyz in joints.items():
        i = skeleton.joint_names.index(name)
        out[i], out[d + i], out[2 * d + i] = xyz
    return out


def fixture_mean() -> np.ndarray:
    """Canonical 3-D mean pose of the LSP skeleton, block layout."""
    return _block(_MEAN_JOINTS, lsp_skeleton())


def fixture_bases(k: int = 4) -> np.ndarray:
    """First ``k`` hand-designed movemes as unit-norm columns of a (42, k) matrix."""
    if not 1 <= k <= len(_MOVEMES):
        raise ValueError(f"fixture provides 1..{len(_MOVEMES)} movemes, asked for {k}")
    sk = lsp_skeleton()
    U = np.stack([_block(m, sk) for m in _MOVEMES[:k]], axis=1)
    return U / np.linalg.norm(U, axis=0)


@dataclass(frozen=True)
class CoeffClass:
    """Activity class: which bases it uses and their magnitude range."""

    active: tuple
    low: float = 0.2
    high: float = 1.0
    arc: Optional[tuple] = None  # viewing-angle interval (radians), None for uniform

    def __post_init__(self):
        object.__setattr__(self, "active", tuple(int(a) for a in self.active))
        if not self.active:
            raise ValueError("a class needs at least one active basis")
        if not 0.0 <= self.low <= self.high <= 1.0:
            raise ValueError("coefficient range must satisfy 0 <= low <= high <= 1")


def overlapping_classes(k: int, n_classes: Optional[int] = None) -> tuple:
    """Class c activates bases c and c+1 (mod k)."""
    n_classes = k if n_classes is None else n_classes
    if k == 1:
        return tuple(CoeffClass((0,)) for _ in range(n_classes))
    return tuple(CoeffClass((c % k, (c + 1) % k)) for c in range(n_classes))


def disjoint_classes(k: int) -> tuple:
    """Class c activates only basis c."""
    return tuple(CoeffClass((c,)) for c in range(k))


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic dataset.

    ``noise_sigma`` and ``init3d_sigma`` are standard deviations per
    coordinate, as fractions of the pose scale (mean torso bone length of
    the 3-D mean pose).
    """

    skeleton: Skeleton = field(default_factory=lsp_skeleton)
    U_true: np.ndarray = field(default_factory=fixture_bases)
    mean_true: np.ndarray = field(default_factory=fixture_mean)
    n: int = 2000
    classes: tuple = field(default_factory=lambda: overlapping_classes(4))
    noise_sigma: float = 0.01
    init3d_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        U = np.asarray(self.U_true, dtype=float)
        mu = np.asarray(self.mean_true, dtype=float)
        d = self.skeleton.d
        if U.ndim != 2 or U.shape[0] != 3 * d:
            raise ValueError(f"U_true must be (3d, k) = ({3 * d}, k), got {U.shape}")
        if mu.shape != (3 * d,):
            raise ValueError("mean_true must have 3d entries")
        if not np.allclose(np.linalg.norm(U, axis=0), 1.0, atol=1e-9):
            raise ValueError("U_true columns must have unit norm")
        if self.noise_sigma < 0 or self.init3d_sigma < 0:
            raise ValueError("noise levels must be non-negative")
        if self.n < 0:
            raise ValueError("n must be non-negative")
        classes = tuple(c if isinstance(c, CoeffClass) else CoeffClass(**c) for c in self.classes)
        if not classes:
            raise ValueError("need at least one class")
        for c in classes:
            if max(c.active) >= U.shape[1] or min(c.active) < 0:
                raise ValueError(f"class uses basis {max(c.active)} but k_true = {U.shape[1]}")
        object.__setattr__(self, "U_true", U)
        object.__setattr__(self, "mean_true", mu)
        object.__setattr__(self, "classes", classes)

    @property
    def k_true(self) -> int:
        return self.U_true.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def scale(self) -> float:
        return pose_scale(self.skeleton, self.mean_true[:, None])

    def to_dict(self) -> dict:
        return {
            "skeleton": self.skeleton.to_dict(),
            "U_true": self.U_true.tolist(),
            "mean_true": self.mean_true.tolist(),
            "n": self.n,
            "classes": [
                {"active": list(c.active), "low": c.low, "high": c.high,
                 "arc": None if c.arc is None else list(c.arc)}
                for c in self.classes
            ],
            "noise_sigma": self.noise_sigma,
            "init3d_sigma": self.init3d_sigma,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        """Build a spec from a (possibly partial) mapping; missing keys use the fixture."""
        data = dict(data)
        kw = {}
        if "skeleton" in data:
            kw["skeleton"] = Skeleton.from_dict(data.pop("skeleton"))
        k_true = data.pop("k_true", None)
        if "U_true" in data:
            kw["U_true"] = np.asarray(data.pop("U_true"), dtype=float)
        elif k_true is not None:
            kw["U_true"] = fixture_bases(int(k_true))
        if "mean_true" in data:
            kw["mean_true"] = np.asarray(data.pop("mean_true"), dtype=float)
        k = (kw["U_true"] if "U_true" in kw else fixture_bases()).shape[1]
        classes = data.pop("classes", None)
        if classes == "disjoint":
            kw["classes"] = disjoint_classes(k)
        elif classes is None or classes == "overlapping":
            kw["classes"] = overlapping_classes(k, data.pop("n_classes", None))
        else:
            kw["classes"] = tuple(
                CoeffClass(c["active"], c.get("low", 0.2), c.get("high", 1.0),
                           None if c.get("arc") is None else tuple(c["arc"]))
                for c in classes)
        data.pop("n_classes", None)
        return cls(**kw, **data)


@dataclass
class Truth:
    V: np.ndarray          # (k_true, n) coefficients
    theta: np.ndarray      # (n,) viewing angles
    labels: np.ndarray     # (n,) class index
    poses3d: np.ndarray    # (3d, n) clean canonical 3-D poses
    init3d: np.ndarray     # (3d, n) simulated estimator output
    scale: float
    noise_abs: float
    t: Optional[np.ndarray] = None  # positions along the sequence line


def _sample_angles(rng, cls: CoeffClass, size: int) -> np.ndarray:
    if cls.arc is None:
        return rng.uniform(0.0, TWO_PI, size)
    lo, hi = cls.arc
    return wrap_angle(rng.uniform(lo, hi, size))


def _observe(spec: SynthSpec, rng, V, theta, labels, t=None):
    X3 = spec.mean_true[:, None] + spec.U_true @ V
    S = project_to_2d(X3, theta)
    scale = spec.scale
    noise = spec.noise_sigma * scale
    if noise > 0:
        S = S + rng.normal(0.0, noise, S.shape)
    init3d = X3
    if spec.init3d_sigma > 0:
        init3d = X3 + rng.normal(0.0, spec.init3d_sigma * scale, X3.shape)
    truth = Truth(V, wrap_angle(theta), labels, X3, init3d, scale, noise, t)
    return S, truth


def class_name(c: int) -> str:
    return f"class{c}"


def generate(spec: SynthSpec):
    """Draw ``spec.n`` poses; returns ``(PoseSet, Truth)``."""
    rng = np.random.default_rng(spec.seed)
    labels = rng.integers(0, spec.n_classes, spec.n)
    V = np.zeros((spec.k_true, spec.n))
    theta = np.zeros(spec.n)
    for c, cls in enumerate(spec.classes):
        cols = np.flatnonzero(labels == c)
        act = np.array(cls.active)
        V[np.ix_(act, cols)] = rng.uniform(cls.low, cls.high, (act.size, cols.size))
        theta[cols] = _sample_angles(rng, cls, cols.size)
    S, truth = _observe(spec, rng, V, theta, labels)
    poses = PoseSet(spec.skeleton, S, labels=np.array([class_name(c) for c in labels], dtype=object),
                    gt_angles=truth.theta, ids=[f"p{j:06d}" for j in range(spec.n)])
    return poses, truth


def _line(rng, cls: CoeffClass, k: int, direction=None):
    act = np.array(cls.active)
    span = cls.high - cls.low
    if direction is None:
        u = rng.uniform(0.3, 1.0, act.size)
        w = np.zeros(k)
        w[act] = span * u / u.max()
    else:
        w = np.asarray(direction, dtype=float)
    v0 = np.zeros(k)
    v0[act] = cls.low
    return v0, w


def generate_sequences(spec: SynthSpec, per_class: int, m: int = 4, classes: Optional[Sequence[int]] = None,
                       direction=None):
    """``per_class`` chronological sequences of ``m`` poses for each class.

    Frame ``i`` of a sequence has true coefficients ``v0 + t_i w`` with
    ``t_1 < ... < t_m``; every frame gets an independent viewing angle.
    Returns ``(PoseSet, Truth, sequences)`` where ``sequences`` lists the pose
    indices of each sequence in true order.  A zero ``direction`` makes all
    frames identical (a degenerate sequence).
    """
    if m < 2:
        raise ValueError("sequences need at least two frames")
    rng = np.random.default_rng(spec.seed)
    classes = list(range(spec.n_classes)) if classes is None else list(classes)
    k = spec.k_true
    n = per_class * m * len(classes)
    V = np.zeros((k, n))
    theta = np.zeros(n)
    t_all = np.zeros(n)
    labels = np.zeros(n, dtype=int)
    seq_ids, frames, sequences = [], [], []
    j = 0
    for c in classes:
        cls = spec.classes[c]
        for q in range(per_class):
            v0, w = _line(rng, cls, k, direction)
            t = (np.arange(m) + 0.5 + rng.uniform(-0.3, 0.3, m)) / m
            idx = list(range(j, j + m))
            V[:, idx] = v0[:, None] + np.outer(w, t)
            theta[idx] = _sample_angles(rng, cls, m)
            t_all[idx] = t
            labels[idx] = c
            seq_ids += [f"{class_name(c)}-s{q:04d}"] * m
            frames += list(range(m))
            sequences.append(idx)
            j += m
    S, truth = _observe(spec, rng, V, theta, labels, t_all)
    poses = PoseSet(spec.skeleton, S, labels=np.array([class_name(c) for c in labels], dtype=object),
                    gt_angles=truth.theta, ids=[f"q{i:06d}" for i in range(n)],
                    sequences=tuple(seq_ids), frames=np.array(frames))
    return poses, truth, sequences


def generate_sequence(spec: SynthSpec, cls: int, m: int = 4, direction=None):
    """A single ordered sequence of class ``cls``; see `generate_sequences`."""
    poses, truth, seqs = generate_sequences(spec, 1, m, classes=[cls], direction=direction)
    return poses, truth, seqs[0]


def with_overrides(spec: SynthSpec, **kw) -> SynthSpec:
    return replace(spec, **kw)
