"""Skeletons, pose containers and pan-rotation geometry.

Coordinates are stored in block layout: a 2-D pose is ``[x_1..x_d, y_1..y_d]``
and a 3-D pose is ``[x_1..x_d, y_1..y_d, z_1..z_d]``.  A dataset is kept as a
``(2d, n)`` matrix with one pose per column.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

TWO_PI = 2.0 * np.pi

LSP_JOINTS = (
    "right_ankle", "right_knee", "right_hip",
    "left_hip", "left_knee", "left_ankle",
    "right_wrist", "right_elbow", "right_shoulder",
    "left_shoulder", "left_elbow", "left_wrist",
    "neck", "head_top",
)

LSP_BONES = (
    (0, 1), (1, 2), (2, 12), (12, 3), (3, 4), (4, 5),
    (12, 8), (8, 7), (7, 6),
    (12, 9), (9, 10), (10, 11),
    (12, 13),
)

# hip -> neck bones define the torso; their mean length is the pose scale.
LSP_TORSO_BONES = ((2, 12), (12, 3))


class PoseError(ValueError):
    """Invalid pose, skeleton or geometric argument."""


@dataclass(frozen=True)
class Skeleton:
    """Joint names plus the bone tree connecting them.

    Bones are undirected edges of a spanning tree; traversal starts at joint 0.
    ``torso`` lists the bones whose mean length defines the pose scale.
    """

    joint_names: tuple
    bones: tuple
    torso: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "joint_names", tuple(str(j) for j in self.joint_names))
        object.__setattr__(self, "bones", tuple((int(a), int(b)) for a, b in self.bones))
        object.__setattr__(self, "torso", tuple((int(a), int(b)) for a, b in self.torso))
        d = len(self.joint_names)
        if d < 2:
            raise PoseError(f"skeleton needs at least 2 joints, got {d}")
        if len(set(self.joint_names)) != d:
            raise PoseError("joint names must be unique")
        if len(self.bones) != d - 1:
            raise PoseError(f"a {d}-joint tree needs {d - 1} bones, got {len(self.bones)}")
        for a, b in self.bones + self.torso:
            if not (0 <= a < d and 0 <= b < d) or a == b:
                raise PoseError(f"invalid bone ({a}, {b}) for {d} joints")
        if len(self._traversal()) != d - 1:
            raise PoseError("bones do not form a single connected tree")

    @property
    def d(self) -> int:
        return len(self.joint_names)

    def _traversal(self):
        adj = {i: [] for i in range(len(self.joint_names))}
        for a, b in self.bones:
            adj[a].append(b)
            adj[b].append(a)
        seen = {0}
        order = []
        queue = deque([0])
        while queue:
            p = queue.popleft()
            for c in adj[p]:
                if c not in seen:
                    seen.add(c)
                    order.append((p, c))
                    queue.append(c)
        return order

    @property
    def traversal(self) -> list:
        """(parent, child) pairs in breadth-first order from the root joint 0."""
        return self._traversal()

    def bone_index(self, bone) -> int:
        a, b = bone
        for i, (p, c) in enumerate(self.bones):
            if (p, c) == (a, b) or (p, c) == (b, a):
                return i
        raise PoseError(f"bone {bone} not in skeleton")

    def to_dict(self) -> dict:
        return {
            "joints": list(self.joint_names),
            "bones": [list(b) for b in self.bones],
            "torso": [list(b) for b in self.torso],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Skeleton":
        return cls(data["joints"], [tuple(b) for b in data["bones"]],
                   [tuple(b) for b in data.get("torso", [])])

    def hash(self) -> str:
        blob = json.dumps({"joints": list(self.joint_names),
                           "bones": [list(b) for b in self.bones]}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def lsp_skeleton() -> Skeleton:
    """The 14-joint skeleton of the Leeds Sports Pose annotations."""
    return Skeleton(LSP_JOINTS, LSP_BONES, LSP_TORSO_BONES)


@dataclass(frozen=True)
class Pose2D:
    coords: np.ndarray
    visibility: Optional[np.ndarray] = None

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float)
        if c.ndim != 1 or c.size % 2 or not np.all(np.isfinite(c)):
            raise PoseError("Pose2D coords must be a finite vector of length 2d")
        object.__setattr__(self, "coords", c)
        vis = np.ones(c.size // 2, bool) if self.visibility is None else np.asarray(self.visibility, bool)
        if vis.shape != (c.size // 2,):
            raise PoseError("visibility mask must have one entry per joint")
        object.__setattr__(self, "visibility", vis)

    @property
    def d(self) -> int:
        return self.coords.size // 2

    def joints(self) -> np.ndarray:
        """(d, 2) array of joint positions."""
        return self.coords.reshape(2, -1).T


@dataclass(frozen=True)
class Pose3D:
    coords: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float)
        if c.ndim != 1 or c.size % 3 or not np.all(np.isfinite(c)):
            raise PoseError("Pose3D coords must be a finite vector of length 3d")
        object.__setattr__(self, "coords", c)

    @property
    def d(self) -> int:
        return self.coords.size // 3

    def joints(self) -> np.ndarray:
        return self.coords.reshape(3, -1).T


@dataclass(frozen=True)
class PoseSet:
    """A dataset of ``n`` 2-D poses stored as the ``(2d, n)`` matrix ``S``.

    ``labels``, ``gt_angles`` (radians), ``sequences`` and ``frames`` are
    optional per-pose annotations.  ``issues`` collects records of poses
    dropped by preprocessing.
    """

    skeleton: Skeleton
    S: np.ndarray
    visibility: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    gt_angles: Optional[np.ndarray] = None
    ids: Optional[tuple] = None
    sequences: Optional[tuple] = None
    frames: Optional[np.ndarray] = None
    issues: tuple = field(default=())

    def __post_init__(self):
        S = np.asarray(self.S, dtype=float)
        d = self.skeleton.d
        if S.ndim != 2 or S.shape[0] != 2 * d:
            raise PoseError(f"S must have shape (2*{d}, n), got {S.shape}")
        if not np.all(np.isfinite(S)):
            raise PoseError("S contains non-finite coordinates")
        n = S.shape[1]
        object.__setattr__(self, "S", S)
        vis = np.ones((d, n), bool) if self.visibility is None else np.asarray(self.visibility, bool)
        if vis.shape != (d, n):
            raise PoseError("visibility must have shape (d, n)")
        object.__setattr__(self, "visibility", vis)
        ids = tuple(str(i) for i in range(n)) if self.ids is None else tuple(str(i) for i in self.ids)
        if len(ids) != n or len(set(ids)) != n:
            raise PoseError("ids must be unique, one per pose")
        object.__setattr__(self, "ids", ids)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=object)
            if labels.shape != (n,):
                raise PoseError("labels must have one entry per pose")
            object.__setattr__(self, "labels", labels)
        if self.gt_angles is not None:
            ang = np.asarray(self.gt_angles, dtype=float)
            if ang.shape != (n,):
                raise PoseError("gt_angles must have one entry per pose")
            object.__setattr__(self, "gt_angles", wrap_angle(ang))
        if self.sequences is not None:
            if len(self.sequences) != n:
                raise PoseError("sequences must have one entry per pose")
            object.__setattr__(self, "sequences", tuple(self.sequences))
        if self.frames is not None:
            object.__setattr__(self, "frames", np.asarray(self.frames))

    @property
    def n(self) -> int:
        return self.S.shape[1]

    @property
    def d(self) -> int:
        return self.skeleton.d

    def pose(self, j: int) -> Pose2D:
        return Pose2D(self.S[:, j], self.visibility[:, j])

    def coord_mask(self) -> np.ndarray:
        """Visibility expanded to the (2d, n) coordinate layout."""
        return np.vstack([self.visibility, self.visibility])

    def mean_pose(self, masked: bool = False) -> np.ndarray:
        return mean_pose(self, masked=masked)

    def subset(self, idx) -> "PoseSet":
        idx = np.asarray(idx, dtype=int)
        pick = lambda a: None if a is None else a[idx]
        return replace(
            self,
            S=self.S[:, idx],
            visibility=self.visibility[:, idx],
            labels=pick(self.labels),
            gt_angles=pick(self.gt_angles),
            ids=tuple(self.ids[i] for i in idx),
            sequences=None if self.sequences is None else tuple(self.sequences[i] for i in idx),
            frames=pick(self.frames),
        )

    def pose_scale(self) -> float:
        return pose_scale(self.skeleton, self.S)


def wrap_angle(theta):
    """Wrap angles into [0, 2*pi)."""
    out = np.mod(theta, TWO_PI)
    # mod can return exactly 2*pi for tiny negative inputs
    out = np.where(out >= TWO_PI, 0.0, out)
    return float(out) if np.ndim(theta) == 0 else out


def angle_difference(a, b):
    """Signed difference ``a - b`` wrapped into (-pi, pi]."""
    diff = np.mod(np.asarray(a, float) - np.asarray(b, float) + np.pi, TWO_PI) - np.pi
    return np.where(diff == -np.pi, np.pi, diff)


def rotation_matrix(theta: float) -> np.ndarray:
    """Rotation about the vertical (y) axis by ``theta`` radians."""
    theta = float(theta)
    if not math.isfinite(theta):
        raise PoseError(f"rotation angle must be finite, got {theta}")
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def project_to_2d(pose3d, theta) -> np.ndarray:
    """Rotate a block-layout 3-D pose by ``theta`` and drop the depth block.

    ``pose3d`` may be a single ``(3d,)`` vector (or `Pose3D`) with a scalar
    angle, or a ``(3d, n)`` matrix with ``n`` angles.
    """
    if isinstance(pose3d, Pose3D):
        pose3d = pose3d.coords
    P = np.asarray(pose3d, dtype=float)
    if P.shape[0] % 3:
        raise PoseError(f"3-D pose length must be a multiple of 3, got {P.shape[0]}")
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise PoseError("rotation angle must be finite")
    if P.ndim == 2 and theta.ndim == 1 and theta.shape[0] != P.shape[1]:
        raise PoseError("need one angle per pose column")
    d = P.shape[0] // 3
    x, y, z = P[:d], P[d:2 * d], P[2 * d:]
    return np.concatenate([np.cos(theta) * x + np.sin(theta) * z, y], axis=0)


def lift_to_3d(pose2d, theta) -> np.ndarray:
    """Place a 2-D pose on the image plane and un-rotate it to the canonical frame.

    The result projects back onto ``pose2d`` at ``theta``.
    """
    P = np.asarray(pose2d, dtype=float)
    d = P.shape[0] // 2
    x, y = P[:d], P[d:]
    theta = np.asarray(theta, dtype=float)
    return np.concatenate([np.cos(theta) * x, y, np.sin(theta) * x], axis=0)


def bone_lengths(skeleton: Skeleton, S: np.ndarray) -> np.ndarray:
    """(n_bones, n) matrix of bone lengths for block-layout poses (2-D or 3-D)."""
    S = np.asarray(S, dtype=float)
    d = skeleton.d
    dims = S.shape[0] // d
    J = S.reshape(dims, d, -1)
    a = np.array([b[0] for b in skeleton.bones])
    b = np.array([b[1] for b in skeleton.bones])
    return np.sqrt(((J[:, b] - J[:, a]) ** 2).sum(axis=0))


def pose_scale(skeleton: Skeleton, S: np.ndarray) -> float:
    """Mean torso bone length over the poses in ``S``."""
    torso = skeleton.torso or skeleton.bones
    L = bone_lengths(skeleton, S)
    rows = [skeleton.bone_index(b) for b in torso]
    return float(L[rows].mean())


@dataclass(frozen=True)
class PoseIssue:
    pose_id: str
    reason: str


def normalize_bone_lengths(poses: PoseSet, tol: float = 0.0) -> PoseSet:
    """Rescale every bone to its dataset-average length, keeping directions.

    Poses with a zero-length bone are excluded from the output and reported in
    ``issues``; the averages are taken over the remaining poses.
    """
    sk = poses.skeleton
    L = bone_lengths(sk, poses.S)
    bad = np.any(L <= tol, axis=0)
    issues = list(poses.issues)
    for j in np.flatnonzero(bad):
        zero = [sk.bones[i] for i in np.flatnonzero(L[:, j] <= tol)]
        issues.append(PoseIssue(poses.ids[j], f"zero-length bone(s) {zero}"))
    keep = np.flatnonzero(~bad)
    out = poses.subset(keep)
    if keep.size == 0:
        return replace(out, issues=tuple(issues))
    avg = L[:, keep].mean(axis=1)

    d = sk.d
    J = out.S.reshape(2, d, -1)
    new = np.empty_like(J)
    new[:, 0] = J[:, 0]
    for p, c in sk.traversal:
        vec = J[:, c] - J[:, p]
        length = np.sqrt((vec ** 2).sum(axis=0))
        new[:, c] = new[:, p] + avg[sk.bone_index((p, c))] * vec / length
    return replace(out, S=new.reshape(2 * d, -1), issues=tuple(issues))


def center_poses(poses: PoseSet, joints: Optional[Sequence[int]] = None) -> PoseSet:
    """Translate each pose so the centroid of ``joints`` sits at the origin.

    Pan rotation acts about the vertical axis through the origin, so image
    coordinates with arbitrary translation should be centered before fitting
    a 3-D model.  Defaults to the joints of the torso bones.
    """
    sk = poses.skeleton
    if joints is None:
        joints = sorted({j for bone in sk.torso for j in bone}) or [0]
    joints = list(joints)
    d = sk.d
    J = poses.S.reshape(2, d, -1)
    c = J[:, joints].mean(axis=1, keepdims=True)
    return replace(poses, S=(J - c).reshape(2 * d, -1))


def mean_pose(poses: PoseSet, masked: bool = False) -> np.ndarray:
    """Elementwise mean pose; with ``masked`` only visible joints contribute."""
    if poses.n < 1:
        raise PoseError("mean pose of an empty set")
    if not masked:
        return poses.S.mean(axis=1)
    M = poses.coord_mask()
    counts = M.sum(axis=1)
    if np.any(counts == 0):
        j = int(np.flatnonzero(counts == 0)[0]) % poses.d
        raise PoseError(f"joint {poses.skeleton.joint_names[j]!r} is visible in no pose")
    return (poses.S * M).sum(axis=1) / counts
