"""``movemes`` command-line interface.

Subcommands::

    movemes synth  [--spec FILE] [overrides] --out DIR
    movemes train  DATASET --model lfa3d [--config FILE] [flags] --out DIR
    movemes encode MODEL DATASET --out DIR
    movemes eval   MODEL DATASET --protocol {classify,reorder,angles,generalize,interp,embed} --out DIR

Every run writes its outputs plus ``manifest.json`` into one run directory.
Without ``--out`` the directory is ``$MOVEMES_OUT_DIR/<command>-<digest>``
(``./runs`` when the variable is unset), where the digest covers the
resolved configuration and the input file hashes.

Exit codes: 0 success, 1 usage error, 2 data error, 3 divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import io as mio
from .evaluation import (ProtocolError, angle_recovery, classify_activities, export_embedding_features,
                         generalization_curve, moveme_interpolation, reorder_sequences, sequences_from_poses)
from .models import ANGLE_INITS, CLUSTERED, VARIANTS, ModelError, TrainConfig, encode_batch, objective
from .optim import DivergenceError, init_angles, train
from .pose import PoseError, center_poses, normalize_bone_lengths
from .synth import SynthSpec, generate, generate_sequences

log = logging.getLogger("movemes")

OUT_DIR_ENV = "MOVEMES_OUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
PROTOCOLS = ("classify", "reorder", "angles", "generalize", "interp", "embed")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------------------
# run bookkeeping


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """One invocation: its resolved config, inputs and output directory."""

    def __init__(self, command: str, config: dict, inputs: dict, out: Optional[str]):
        self.command = command
        self.config = config
        self.inputs = {k: {"path": str(v), "sha256": file_hash(v)} for k, v in inputs.items() if v}
        if out is None:
            blob = json.dumps({"c": config, "i": {k: v["sha256"] for k, v in self.inputs.items()}},
                              sort_keys=True).encode()
            out = Path(os.environ.get(OUT_DIR_ENV, "runs")) / f"{command}-{hashlib.sha256(blob).hexdigest()[:10]}"
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.outputs: list = []
        self.started = time.time()

    def path(self, name: str) -> Path:
        p = self.dir / name
        self.outputs.append(str(p))
        return p

    def finish(self) -> Path:
        import sklearn

        manifest = {
            "command": self.command,
            "config": self.config,
            "seed": self.config.get("seed"),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "versions": {"movemes": __version__, "numpy": np.__version__, "scikit-learn": sklearn.__version__,
                         "python": platform.python_version()},
            "wall_clock": {"started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(self.started)),
                           "elapsed_s": round(time.time() - self.started, 3)},
        }
        p = self.dir / "manifest.json"
        mio.write_json(p, manifest)
        return p


def _read_config(path) -> dict:
    if not path:
        return {}
    doc = mio._load_json(path, "config")
    if not isinstance(doc, dict):
        raise mio.DataError(f"{path}: config must be a JSON object")
    return doc


# ----------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    doc = _read_config(args.spec)
    for key in ("n", "noise_sigma", "init3d_sigma", "seed", "k_true", "classes"):
        val = getattr(args, key)
        if val is not None:
            doc[key] = val
    seq = doc.pop("sequences", None)
    if args.sequences is not None:
        seq = {"per_class": args.sequences, "m": args.frames}
    try:
        spec = SynthSpec.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise mio.DataError(f"invalid synthetic spec: {exc}") from exc
    config = {"spec": spec.to_dict(), "sequences": seq, "seed": spec.seed}
    run = Run("synth", config, {"spec": args.spec}, args.out)
    if seq:
        poses, truth, _ = generate_sequences(spec, int(seq["per_class"]), int(seq.get("m", 4)))
    else:
        poses, truth = generate(spec)
    mio.save_dataset(poses, run.path("dataset.json"))
    mio.save_truth(truth, poses.ids, run.path("truth.json"))
    mio.save_init3d(truth.init3d, poses.ids, spec.skeleton, run.path("init3d.json"))
    run.finish()
    print(f"wrote {poses.n} poses to {run.dir}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# train

_TRAIN_FLAGS = {
    "k": "k", "clusters": "p", "angle_init": "angle_init", "seed": "seed", "lr_uv": "lr_UV",
    "lr_theta": "lr_theta", "lambda_u": "lambda_U", "lambda_v": "lambda_V", "lambda_spat": "lambda_spat",
    "epochs": "epochs", "iters": "iters_per_epoch", "angle_steps": "angle_steps", "nonneg": "nonneg_V",
    "mask_visibility": "mask_visibility", "encode_iters": "encode_iters",
}


def resolve_config(args) -> tuple:
    """(variant, TrainConfig): flags override the config file, which overrides defaults."""
    doc = _read_config(getattr(args, "config", None))
    variant = doc.pop("variant", None)
    if getattr(args, "model", None):
        variant = args.model
    variant = variant or "lfa3d"
    if variant not in VARIANTS:
        raise UsageError(f"unknown model variant {variant!r}")
    for flag, key in _TRAIN_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            doc[key] = val
    if args.clusters is not None and variant not in CLUSTERED:
        raise UsageError(f"--clusters applies to clustered variants {CLUSTERED}, not {variant}")
    try:
        cfg = TrainConfig.from_dict(doc)
    except (TypeError, ModelError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    return variant, cfg


def _prepare(poses, args):
    if getattr(args, "exclude", None):
        poses = mio.filter_activities(poses, args.exclude)
    if getattr(args, "normalize_bones", False):
        poses = normalize_bone_lengths(poses)
        for issue in poses.issues:
            log.warning("excluded pose %s: %s", issue.pose_id, issue.reason)
    if getattr(args, "center", False):
        poses = center_poses(poses)
    return poses


def cmd_train(args) -> int:
    variant, cfg = resolve_config(args)
    poses = _prepare(mio.load_dataset(args.dataset), args)
    init3d = mio.load_init3d(args.init3d, poses) if args.init3d else None
    config = {"variant": variant, **cfg.to_dict(), "exclude": args.exclude or [],
              "normalize_bones": args.normalize_bones, "center": args.center}
    run = Run("train", config, {"dataset": args.dataset, "init3d": args.init3d}, args.out)
    try:
        model = train(poses, cfg, variant, init3d=init3d, trace_path=run.path("loss_trace.csv"))
    except DivergenceError as exc:
        if exc.last_model is not None:
            mio.save_model(exc.last_model, run.path("model.last_good.json"))
        run.finish()
        raise
    mio.save_model(model, run.path("model.json"))
    obj = objective(model, poses)
    mio.write_json(run.path("objective.json"), obj._asdict())
    run.finish()
    print(f"objective {obj.total!r} = reconstruction {obj.recon_error!r} + regularization {obj.reg!r}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# encode


def _load_pair(args):
    model = mio.load_model(args.model)
    poses = _prepare(mio.load_dataset(args.dataset), args)
    mio.check_compatible(model, poses)
    return model, poses


def cmd_encode(args) -> int:
    model, poses = _load_pair(args)
    mode = args.angle_init or model.config.angle_init
    config = {"angle_init": mode, "seed": args.seed, "iters": args.iters or model.config.encode_iters}
    run = Run("encode", config, {"model": args.model, "dataset": args.dataset}, args.out)
    theta0 = init_angles(poses, mode, model.config.p, np.random.default_rng(args.seed))
    mask = poses.visibility if model.config.mask_visibility else None
    V, theta, err = encode_batch(model, poses.S, theta0, mask, iters=args.iters)
    header = ["pose_id", "theta", "rmse"] + [f"v{i + 1}" for i in range(model.k)]
    rows = ([poses.ids[j], float(theta[j]), float(err[j])] + [float(x) for x in V[:, j]] for j in range(poses.n))
    mio.write_csv(run.path("codes.csv"), header, rows)
    run.finish()
    print(f"encoded {poses.n} poses; mean rmse {float(np.mean(err))!r}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# eval


def _classify(model, poses, args, run):
    if poses.labels is None:
        raise ProtocolError("classification needs activity labels in the dataset")
    res = classify_activities(model, poses.labels, folds=args.folds, seed=args.seed)
    mio.write_json(run.path("classification.json"), {
        "classes": res.classes, "mean_accuracy": res.mean_accuracy, "fold_accuracies": res.fold_accuracies,
        "per_class_accuracy": res.per_class_accuracy, "chance": 1.0 / len(res.classes)})
    mio.write_csv(run.path("confusion.csv"), ["true"] + list(res.classes),
                  ([c] + [int(x) for x in row] for c, row in zip(res.classes, res.confusion)))
    return f"mean accuracy {res.mean_accuracy:.4f} over {len(res.classes)} classes"


def _reorder(model, poses, args, run):
    if model.variant == "svd-rot":
        raise ProtocolError(
            "reordering is not defined for svd-rot: its per-cluster coefficients live in different "
            "bases, so frames seen from different angles cannot be compared")
    names, seqs, groups = sequences_from_poses(poses)
    res = reorder_sequences(model, seqs, trials=args.trials, seed=args.seed, groups=groups)
    summary = res.summary()
    summary["by_group"] = {str(g): r.summary() for g, r in res.by_group.items()}
    mio.write_json(run.path("reorder.json"), summary)
    return f"{res.exact_count}/{res.n_sequences} exact, mean swaps {res.mean_swaps:.4f}"


def _angles(model, poses, args, run):
    gt = poses.gt_angles
    if args.truth:
        truth = mio.load_truth(args.truth)
        if list(truth["ids"]) != list(poses.ids):
            raise mio.DataError(f"{args.truth}: truth ids do not match the dataset")
        gt = truth["theta_true"]
    m = angle_recovery(model, gt)
    mio.write_json(run.path("angles.json"), {"rmse": m.rmse, "cos_sim": m.cos_sim, "n": m.n, "units": "degrees"})
    return f"angle rmse {m.rmse:.4f} deg, cos sim {m.cos_sim:.6f}"


def _generalize(model, poses, args, run):
    init3d = mio.load_init3d(args.init3d, poses) if args.init3d else None
    rows = generalization_curve(poses, model.config, args.fractions, repeats=args.repeats, seed=args.seed,
                                init3d=init3d, jobs=args.jobs)
    mio.write_csv(run.path("generalization.csv"),
                  ["fraction", "train_rmse_mean", "train_rmse_sd", "test_rmse_mean", "test_rmse_sd"],
                  ([r.fraction, r.train_rmse_mean, r.train_rmse_sd, r.test_rmse_mean, r.test_rmse_sd] for r in rows))
    return f"{len(rows)} fractions x {args.repeats} repeats"


def _interp(model, poses, args, run):
    frames = moveme_interpolation(model, args.basis, args.alphas, theta=args.theta, cluster=args.cluster)
    names = model.skeleton.joint_names
    d = model.d

    def rows():
        for f in frames:
            xy = f.pose2d.coords
            xyz = None if f.pose3d is None else f.pose3d.coords
            for i in range(d):
                z = [float("nan")] * 3 if xyz is None else [xyz[i], xyz[d + i], xyz[2 * d + i]]
                yield [f.alpha, names[i], xy[i], xy[d + i]] + z

    mio.write_csv(run.path("interp.csv"), ["alpha", "joint", "x2d", "y2d", "x3d", "y3d", "z3d"], rows())
    return f"{len(frames)} frames of basis {args.basis}"


def _embed(model, poses, args, run):
    if model.n != poses.n:
        raise ProtocolError("embedding export needs the dataset the model was trained on")
    export_embedding_features(model, run.path("embedding.csv"), poses.ids, poses.labels)
    return f"{model.n} x {model.k} features"


_PROTOCOLS = {"classify": _classify, "reorder": _reorder, "angles": _angles, "generalize": _generalize,
              "interp": _interp, "embed": _embed}


def cmd_eval(args) -> int:
    model, poses = _load_pair(args)
    if args.protocol in ("classify", "reorder", "angles") and model.n != poses.n:
        raise ProtocolError(f"{args.protocol} evaluates training coefficients; the dataset has {poses.n} poses "
                            f"but the model was trained on {model.n}")
    keys = {"classify": ("folds", "seed"), "reorder": ("trials", "seed"), "angles": ("truth",),
            "generalize": ("fractions", "repeats", "seed", "jobs", "init3d"),
            "interp": ("basis", "alphas", "theta", "cluster"), "embed": ()}[args.protocol]
    config = {"protocol": args.protocol, "seed": args.seed, **{k: getattr(args, k) for k in keys}}
    config.pop("jobs", None)  # parallelism does not change results
    run = Run(f"eval-{args.protocol}", config,
              {"model": args.model, "dataset": args.dataset, "truth": args.truth, "init3d": args.init3d}, args.out)
    msg = _PROTOCOLS[args.protocol](model, poses, args, run)
    run.finish()
    print(msg)
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def _floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="movemes", description="Latent factor models of human pose with viewpoint recovery.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset with known factors")
    s.add_argument("--spec", help="JSON synthetic spec (partial specs fill in from the built-in fixture)")
    s.add_argument("--n", type=int)
    s.add_argument("--noise", dest="noise_sigma", type=float, help="noise sd as a fraction of pose scale")
    s.add_argument("--init3d-sigma", type=float, help="sd of simulated 3-D estimates, fraction of pose scale")
    s.add_argument("--k-true", type=int)
    s.add_argument("--classes", choices=("overlapping", "disjoint"))
    s.add_argument("--seed", type=int)
    s.add_argument("--sequences", type=_positive, help="emit this many ordered sequences per class")
    s.add_argument("--frames", type=_positive, default=4, help="poses per sequence")
    s.add_argument("--out")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="fit a factor model")
    t.add_argument("dataset")
    t.add_argument("--model", choices=VARIANTS)
    t.add_argument("--config", help="JSON file of training hyperparameters")
    t.add_argument("--init3d", help="3-D pose estimates for lfa3d initialization")
    t.add_argument("--k", type=_positive)
    t.add_argument("--clusters", type=_positive, help="angle clusters p (svd-rot, lfa2d)")
    t.add_argument("--angle-init", choices=ANGLE_INITS)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr-uv", type=float)
    t.add_argument("--lr-theta", type=float)
    t.add_argument("--lambda-u", type=float)
    t.add_argument("--lambda-v", type=float)
    t.add_argument("--lambda-spat", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--iters", type=int, help="SGD iterations per epoch")
    t.add_argument("--angle-steps", type=int, help="angle gradient steps per epoch")
    t.add_argument("--encode-iters", type=int)
    t.add_argument("--nonneg", action="store_true", default=None)
    t.add_argument("--mask-visibility", action="store_true", default=None)
    _add_prep(t)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="encode poses with a trained model")
    e.add_argument("model")
    e.add_argument("dataset")
    e.add_argument("--angle-init", choices=ANGLE_INITS)
    e.add_argument("--iters", type=int)
    e.add_argument("--seed", type=int, default=0)
    _add_prep(e)
    e.add_argument("--out")
    e.set_defaults(func=cmd_encode)

    v = sub.add_parser("eval", help="run an evaluation protocol")
    v.add_argument("model")
    v.add_argument("dataset")
    v.add_argument("--protocol", required=True, choices=PROTOCOLS)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--folds", type=_positive, default=5)
    v.add_argument("--trials", type=_positive, default=1)
    v.add_argument("--truth", help="truth sidecar with ground-truth angles")
    v.add_argument("--fractions", type=_floats, default=[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])
    v.add_argument("--repeats", type=_positive, default=5)
    v.add_argument("--init3d")
    v.add_argument("--jobs", type=_positive, default=1)
    v.add_argument("--basis", type=int, default=0)
    v.add_argument("--alphas", type=_floats, default=[0.0, 0.25, 0.5, 0.75, 1.0])
    v.add_argument("--theta", type=float, default=0.0, help="viewing angle (radians) for interp")
    v.add_argument("--cluster", type=int, default=0)
    _add_prep(v)
    v.add_argument("--out")
    v.set_defaults(func=cmd_eval)
    return p


def _add_prep(p):
    p.add_argument("--exclude", action="append", metavar="ACTIVITY", help="drop poses with this activity label")
    p.add_argument("--normalize-bones", action="store_true", help="rescale bones to their dataset averages")
    p.add_argument("--center", action="store_true", help="center each pose on its torso joints")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"movemes: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"movemes: numerical failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (mio.DataError, PoseError, ModelError, ProtocolError) as exc:
        print(f"movemes: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
