"""Dataset, model and report files.

Datasets are JSON documents::

    {"schema_version": 1,
     "skeleton": {"joints": [...], "bones": [[parent, child], ...], "torso": [...]},
     "poses": [{"id": "...", "activity": "tennis", "angle_gt_degrees": 12.0,
                "sequence": "serve-01", "frame": 0,
                "joints": [[x, y, visible], ...]}, ...]}

``activity``, ``angle_gt_degrees``, ``sequence`` and ``frame`` are optional.
Floats are written with Python's shortest round-trip representation, so
values survive a save/load cycle bit for bit.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .models import FactorModel, TrainConfig
from .pose import PoseIssue, PoseSet, Skeleton, bone_lengths

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODEL_FORMAT = "movemes-model"
MODEL_VERSION = 1


class DataError(ValueError):
    """A file does not follow the documented schema."""


def deg2rad(x):
    return np.asarray(x, dtype=float) * (np.pi / 180.0)


def rad2deg(x):
    return np.asarray(x, dtype=float) * (180.0 / np.pi)


def _dump(obj, path) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n")


def _load_json(path, what: str):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a valid {what} file ({exc})") from exc
    except OSError as exc:
        raise DataError(f"{path}: cannot read {what} file ({exc.strerror})") from exc


# ----------------------------------------------------------------------------
# datasets


def dataset_to_dict(poses: PoseSet) -> dict:
    d = poses.d
    records = []
    for j in range(poses.n):
        x, y = poses.S[:d, j], poses.S[d:, j]
        rec = {
            "id": poses.ids[j],
            "joints": [[float(x[i]), float(y[i]), int(poses.visibility[i, j])] for i in range(d)],
        }
        if poses.labels is not None and poses.labels[j] is not None:
            rec["activity"] = str(poses.labels[j])
        if poses.gt_angles is not None:
            rec["angle_gt_degrees"] = float(rad2deg(poses.gt_angles[j]) % 360.0)
        if poses.sequences is not None and poses.sequences[j] is not None:
            rec["sequence"] = str(poses.sequences[j])
            rec["frame"] = int(poses.frames[j])
        records.append(rec)
    return {"schema_version": SCHEMA_VERSION, "skeleton": poses.skeleton.to_dict(), "poses": records}


def save_dataset(poses: PoseSet, path) -> None:
    _dump(dataset_to_dict(poses), path)


def _fail(path, where, msg):
    raise DataError(f"{path}: {where}: {msg}")


def dataset_from_dict(doc: dict, path="<dataset>") -> PoseSet:
    if not isinstance(doc, dict):
        _fail(path, "$", "expected an object")
    if doc.get("schema_version") != SCHEMA_VERSION:
        _fail(path, "schema_version", f"unsupported version {doc.get('schema_version')!r}")
    try:
        skeleton = Skeleton.from_dict(doc["skeleton"])
    except (KeyError, TypeError, ValueError) as exc:
        _fail(path, "skeleton", str(exc))
    records = doc.get("poses")
    if not isinstance(records, list):
        _fail(path, "poses", "expected a list")
    d = skeleton.d
    n = len(records)
    S = np.zeros((2 * d, n))
    vis = np.ones((d, n), bool)
    ids, labels, angles, seqs, frames = [], [], [], [], []
    seen = set()
    for j, rec in enumerate(records):
        where = f"poses[{j}]"
        if not isinstance(rec, dict) or "id" not in rec or "joints" not in rec:
            _fail(path, where, "each pose needs 'id' and 'joints'")
        pid = str(rec["id"])
        if pid in seen:
            _fail(path, where, f"duplicate pose id {pid!r}")
        seen.add(pid)
        joints = rec["joints"]
        if not isinstance(joints, list) or len(joints) != d:
            got = len(joints) if isinstance(joints, list) else "?"
            _fail(path, where, f"pose {pid!r} has {got} joints, skeleton has {d}")
        for i, jt in enumerate(joints):
            if not isinstance(jt, (list, tuple)) or len(jt) not in (2, 3):
                _fail(path, f"{where}.joints[{i}]", f"pose {pid!r}: expected [x, y, visible]")
            x, y = jt[0], jt[1]
            if not all(isinstance(c, (int, float)) and math.isfinite(c) for c in (x, y)):
                _fail(path, f"{where}.joints[{i}]", f"pose {pid!r}: non-finite coordinate")
            S[i, j], S[d + i, j] = x, y
            vis[i, j] = bool(jt[2]) if len(jt) == 3 else True
        ids.append(pid)
        labels.append(rec.get("activity"))
        ang = rec.get("angle_gt_degrees")
        if ang is not None and not (isinstance(ang, (int, float)) and 0.0 <= ang < 360.0):
            _fail(path, f"{where}.angle_gt_degrees", f"pose {pid!r}: angle must lie in [0, 360)")
        angles.append(ang)
        seqs.append(rec.get("sequence"))
        frames.append(rec.get("frame", -1))

    have_labels = any(l is not None for l in labels)
    have_angles = n > 0 and all(a is not None for a in angles)
    if any(a is not None for a in angles) and not have_angles:
        log.warning("%s: angle_gt_degrees present on only some poses; ignoring angles", path)
    have_seq = any(s is not None for s in seqs)
    poses = PoseSet(
        skeleton, S, visibility=vis,
        labels=np.array(labels, dtype=object) if have_labels else None,
        gt_angles=deg2rad(angles) if have_angles else None,
        ids=ids,
        sequences=tuple(seqs) if have_seq else None,
        frames=np.array(frames) if have_seq else None,
    )
    if n:
        L = bone_lengths(skeleton, S)
        degenerate = np.flatnonzero(np.any(L == 0, axis=0))
        if degenerate.size:
            issues = tuple(PoseIssue(ids[j], "zero-length bone") for j in degenerate)
            poses = replace(poses, issues=issues)
            log.warning("%s: %d of %d poses have zero-length bones", path, degenerate.size, n)
    return poses


def load_dataset(path) -> PoseSet:
    """Read a dataset file; angles are converted to radians."""
    return dataset_from_dict(_load_json(path, "dataset"), path)


def filter_activities(poses: PoseSet, excluded: Iterable[str]) -> PoseSet:
    """Drop poses whose activity label is listed in ``excluded``."""
    excluded = list(excluded)
    if not excluded:
        return poses
    if poses.labels is None:
        raise DataError("cannot filter activities of an unlabeled dataset")
    present = set(poses.labels.tolist())
    for lab in excluded:
        if lab not in present:
            log.warning("activity %r not present in dataset; ignored", lab)
    keep = [j for j, l in enumerate(poses.labels) if l not in set(excluded)]
    return poses.subset(keep)


# ----------------------------------------------------------------------------
# synthetic truth and 3-D initialization


def save_truth(truth, ids: Sequence[str], path) -> None:
    _dump({
        "schema_version": SCHEMA_VERSION,
        "ids": list(ids),
        "V_true": truth.V.tolist(),
        "theta_true_degrees": (rad2deg(truth.theta) % 360.0).tolist(),
        "labels": [int(c) for c in truth.labels],
        "scale": truth.scale,
        "noise_abs": truth.noise_abs,
        "t": None if truth.t is None else truth.t.tolist(),
    }, path)


def load_truth(path) -> dict:
    doc = _load_json(path, "truth")
    for key in ("ids", "V_true", "theta_true_degrees"):
        if key not in doc:
            raise DataError(f"{path}: truth file lacks {key!r}")
    doc["V_true"] = np.asarray(doc["V_true"], dtype=float)
    doc["theta_true"] = deg2rad(doc["theta_true_degrees"])
    return doc


def save_init3d(poses3d: np.ndarray, ids: Sequence[str], skeleton: Skeleton, path) -> None:
    """Write canonical-frame 3-D pose estimates, one per dataset pose."""
    d = skeleton.d
    P = np.asarray(poses3d, dtype=float)
    _dump({
        "schema_version": SCHEMA_VERSION,
        "skeleton": skeleton.to_dict(),
        "poses": [{"id": pid, "joints": [[float(P[i, j]), float(P[d + i, j]), float(P[2 * d + i, j])]
                                         for i in range(d)]}
                  for j, pid in enumerate(ids)],
    }, path)


def load_init3d(path, poses: PoseSet) -> np.ndarray:
    """3-D estimates aligned to the pose ids of ``poses``, as a (3d, n) matrix."""
    doc = _load_json(path, "init3d")
    d = poses.d
    by_id = {}
    for j, rec in enumerate(doc.get("poses", [])):
        joints = rec.get("joints", [])
        if len(joints) != d:
            raise DataError(f"{path}: poses[{j}] has {len(joints)} joints, skeleton has {d}")
        by_id[str(rec["id"])] = np.asarray(joints, dtype=float).T.reshape(-1)
    missing = [pid for pid in poses.ids if pid not in by_id]
    if missing:
        raise DataError(f"{path}: no 3-D estimate for pose {missing[0]!r} ({len(missing)} missing)")
    return np.stack([by_id[pid] for pid in poses.ids], axis=1)


# ----------------------------------------------------------------------------
# models


def model_to_dict(model: FactorModel) -> dict:
    arr = lambda a: None if a is None else np.asarray(a).tolist()
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "variant": model.variant,
        "k": model.k,
        "skeleton": model.skeleton.to_dict(),
        "skeleton_hash": model.skeleton.hash(),
        "U": arr(model.U),
        "U_y": arr(model.U_y),
        "V": arr(model.V),
        "mean": arr(model.mean),
        "theta": arr(model.theta),
        "clusters": arr(model.clusters),
        "config": model.config.to_dict(),
        "loss_trace": model.loss_trace,
    }


def model_from_dict(doc: dict, path="<model>") -> FactorModel:
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise DataError(f"{path}: not a model file")
    if doc.get("version") != MODEL_VERSION:
        raise DataError(f"{path}: model format version {doc.get('version')!r}, expected {MODEL_VERSION}")
    try:
        skeleton = Skeleton.from_dict(doc["skeleton"])
        if skeleton.hash() != doc["skeleton_hash"]:
            raise DataError(f"{path}: skeleton hash does not match the stored skeleton")
        opt = lambda key, dtype=float: None if doc.get(key) is None else np.asarray(doc[key], dtype=dtype)
        model = FactorModel(
            doc["variant"], skeleton, np.asarray(doc["U"], float), np.asarray(doc["V"], float),
            np.asarray(doc["mean"], float), theta=opt("theta"), clusters=opt("clusters", int),
            U_y=opt("U_y"), config=TrainConfig.from_dict(doc["config"]),
            loss_trace=list(doc.get("loss_trace", [])),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: malformed model file ({exc})") from exc
    if model.k != doc["k"]:
        raise DataError(f"{path}: stored k={doc['k']} does not match V")
    return model


def save_model(model: FactorModel, path) -> None:
    # write-then-rename so a crash never leaves a half-written model behind
    tmp = f"{path}.tmp"
    _dump(model_to_dict(model), tmp)
    os.replace(tmp, path)


def load_model(path) -> FactorModel:
    return model_from_dict(_load_json(path, "model"), path)


def check_compatible(model: FactorModel, poses: PoseSet) -> None:
    if model.skeleton.hash() != poses.skeleton.hash():
        raise DataError("model and dataset use different skeletons (hash mismatch)")


# ----------------------------------------------------------------------------
# reports


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return str(int(x))
    return x


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def write_json(path, obj) -> None:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.generic):
            return o.item()
        raise TypeError(f"cannot serialize {type(o).__name__}")

    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=default) + "\n")


TRACE_HEADER = ("epoch", "iter", "recon_error", "reg", "total")


def write_loss_trace(trace: Sequence[dict], path) -> None:
    write_csv(path, TRACE_HEADER, ([r[h] for h in TRACE_HEADER] for r in trace))


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
