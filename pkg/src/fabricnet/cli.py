"""Command line interface.

Subcommands: synth, train, eval, flops, gradcheck. Exit codes: 0 on
success, 1 for invalid arguments or configuration (including failed
gradient checks), 2 for data problems at runtime (missing or corrupt
files, shape mismatches against a checkpoint).

Commands that write artifacts emit a ``run_manifest.json`` before doing
any work: the resolved config, seed, package version, content hashes of
file inputs and a start timestamp, enough to reproduce the run. It is
rewritten with outputs and results once the command finishes.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import os
import sys

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import export_dataset, gen_synthetic, load_dataset
from .errors import (
    CheckpointError,
    FabricNetError,
    ImageDecodeError,
    ManifestError,
    ShapeError,
    SpecParseError,
    ValidationError,
)
from .gradcheck import OP_CHECKS, check_model, check_op
from .metrics import report_csv, report_text
from .model import (
    DEFAULT_SPEC_TEXT,
    assemble_fabricnet,
    assemble_monolithic,
    fabricnet_accounting,
    init_params,
    parse_ensemble_spec,
)
from .training import TrainConfig, evaluate, run_fold

_THREAD_LIMIT = None


def _apply_threads(n):
    """Best-effort cap on BLAS threads; silently a no-op if unavailable."""
    global _THREAD_LIMIT
    if n is None:
        env = os.environ.get("FABRICNET_THREADS")
        if not env:
            return
        try:
            n = int(env)
        except ValueError:
            raise ValidationError(f"FABRICNET_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise ValidationError(f"thread count must be >= 1, got {n}")
    try:
        import threadpoolctl

        _THREAD_LIMIT = threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        pass


def _blob_sha1(path):
    """Content hash in git blob form: sha1('blob <len>\\0' + bytes)."""
    with open(path, "rb") as fh:
        data = fh.read()
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def _utcnow():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _write_run_manifest(out_dir, record):
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, default=float)
        fh.write("\n")
    return path


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; invalid usage is exit 1 here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _size_pair(text):
    try:
        if "x" in text:
            h, w = (int(p) for p in text.split("x", 1))
        else:
            h = w = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected SIZE or HxW, got {text!r}") from None
    return (h, w)


def build_parser():
    parser = _Parser(prog="fabricnet", description="Class-based ensemble image classifier.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--size", type=int, default=120)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--max-labels", type=int, default=3, help="largest label set per sample")
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a manifest dataset")
    p.add_argument("--data", required=True, help="manifest CSV path")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--middle", type=int, default=2, help="middle flow count in the shared head")
    p.add_argument("--spec", default=DEFAULT_SPEC_TEXT, help="per-class submodel spec")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--fold-index", type=int, default=0, help="which cross-validation round to train")
    p.add_argument("--runs", type=int, default=3, help="independently seeded repeats of the fold")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--image-size", type=_size_pair, default=(120, 120), help="decode size: SIZE or HxW")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="manifest CSV path")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", default=None, help="optional directory for report files")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="report parameter and FLOP counts")
    p.add_argument("--classes", type=int, default=50)
    p.add_argument("--middle", type=int, default=2)
    p.add_argument("--spec", default=DEFAULT_SPEC_TEXT)
    p.add_argument("--input", type=int, default=120, help="square input size in pixels")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward rules")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=("32", "64", "both"), default="64")
    p.add_argument("--op", default=None, choices=sorted(OP_CHECKS), help="check one op only")
    p.set_defaults(func=cmd_gradcheck)

    return parser


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise ValidationError(f"output directory {args.out} is not empty; pass --force to overwrite")
    os.makedirs(args.out, exist_ok=True)
    record = {
        "command": "synth",
        "package_version": __version__,
        "started": _utcnow(),
        "seed": args.seed,
        "config": {
            "classes": args.classes,
            "samples": args.samples,
            "size": args.size,
            "noise": args.noise,
            "max_labels": args.max_labels,
            "out": os.path.abspath(args.out),
        },
        "inputs": {},
    }
    _write_run_manifest(args.out, record)
    images, labels = gen_synthetic(
        args.classes, args.samples, max_labels_per_sample=args.max_labels,
        seed=args.seed, size=args.size, noise=args.noise,
    )
    manifest = export_dataset(args.out, images, labels)
    record["finished"] = _utcnow()
    record["outputs"] = {"manifest": manifest, "manifest_sha1": _blob_sha1(manifest)}
    _write_run_manifest(args.out, record)
    print(json.dumps({"manifest": manifest, "samples": int(len(images)), "classes": int(args.classes)}))
    return 0


def cmd_train(args):
    _apply_threads(args.threads)
    spec = parse_ensemble_spec(args.spec)
    config = TrainConfig(
        batch_size=args.batch,
        max_epochs=args.epochs,
        lr=args.lr,
        k_folds=args.folds,
        seed=args.seed,
        threshold=args.threshold,
        augment=not args.no_augment,
    ).validate()
    if args.fold_index < 0 or args.fold_index >= args.folds:
        raise ValidationError(f"--fold-index must lie in [0, {args.folds}), got {args.fold_index}")
    if args.runs < 1:
        raise ValidationError(f"--runs must be >= 1, got {args.runs}")

    x, y, vocabulary, _ = load_dataset(args.data, size=args.image_size)
    if len(vocabulary) != args.classes:
        raise ValidationError(
            f"--classes {args.classes} does not match the manifest vocabulary ({len(vocabulary)} names)"
        )
    input_shape = x.shape[1:]
    os.makedirs(args.out, exist_ok=True)
    record = {
        "command": "train",
        "package_version": __version__,
        "started": _utcnow(),
        "seed": config.seed,
        "config": {
            "data": os.path.abspath(args.data),
            "classes": args.classes,
            "middle": args.middle,
            "spec": spec.canonical,
            "epochs": config.max_epochs,
            "batch": config.batch_size,
            "lr": config.lr,
            "folds": config.k_folds,
            "fold_index": args.fold_index,
            "runs": args.runs,
            "threshold": config.threshold,
            "augment": config.augment,
            "image_size": list(args.image_size),
            "input_shape": [int(d) for d in input_shape],
        },
        "inputs": {
            "manifest": {"path": os.path.abspath(args.data), "sha1": _blob_sha1(args.data)},
            "n_images": int(len(x)),
        },
    }
    _write_run_manifest(args.out, record)

    def make_model(seed):
        net = assemble_fabricnet(args.classes, middle_count=args.middle, spec=spec, input_shape=input_shape)
        return init_params(net, seed)

    result = run_fold(
        make_model, x, y, config, fold_index=args.fold_index, runs=args.runs, history_dir=args.out
    )

    checkpoints = []
    for j, state in enumerate(result["states"]):
        run_report = result["runs"][j]
        meta = {
            "kind": "fabricnet",
            "n_classes": args.classes,
            "classes": vocabulary,
            "middle_count": args.middle,
            "input_shape": [int(d) for d in input_shape],
            "threshold": config.threshold,
            "seed": int(run_report["seed"]),
            "run": j,
            "best_epoch": int(run_report["best_epoch"]),
        }
        path = os.path.join(args.out, f"model_run{j}.fabnet")
        save_checkpoint(path, state, meta=meta, spec_text=spec.canonical)
        checkpoints.append(path)
    best_run = max(range(args.runs), key=lambda j: (result["runs"][j]["best_val_f1"], -j))
    primary = os.path.join(args.out, "model.fabnet")
    meta = {
        "kind": "fabricnet",
        "n_classes": args.classes,
        "classes": vocabulary,
        "middle_count": args.middle,
        "input_shape": [int(d) for d in input_shape],
        "threshold": config.threshold,
        "seed": int(result["runs"][best_run]["seed"]),
        "run": best_run,
        "best_epoch": int(result["runs"][best_run]["best_epoch"]),
    }
    save_checkpoint(primary, result["states"][best_run], meta=meta, spec_text=spec.canonical)

    report = {
        "fold_index": args.fold_index,
        "aggregate": result["aggregate"],
        "runs": result["runs"],
    }
    report_path = os.path.join(args.out, "report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, default=float)
        fh.write("\n")

    record["finished"] = _utcnow()
    record["outputs"] = {
        "checkpoint": primary,
        "run_checkpoints": checkpoints,
        "report": report_path,
        "histories": [os.path.join(args.out, f"history_run{j}.csv") for j in range(args.runs)],
    }
    record["results"] = result["aggregate"]
    _write_run_manifest(args.out, record)
    print(json.dumps({"checkpoint": primary, "aggregate": result["aggregate"]}, default=float))
    return 0


def cmd_eval(args):
    _apply_threads(args.threads)
    ckpt = load_checkpoint(args.checkpoint)
    try:
        kind = ckpt.meta["kind"]
        n_classes = int(ckpt.meta["n_classes"])
        input_shape = tuple(int(d) for d in ckpt.meta["input_shape"])
        middle_count = int(ckpt.meta["middle_count"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint lacks usable model metadata: {exc}") from None
    if kind == "fabricnet":
        graph = assemble_fabricnet(
            n_classes, middle_count=middle_count, spec=parse_ensemble_spec(ckpt.spec),
            input_shape=input_shape,
        )
    elif kind == "monolithic":
        graph = assemble_monolithic(n_classes, middle_count=middle_count, input_shape=input_shape)
    else:
        raise CheckpointError(f"unknown model kind {kind!r} in checkpoint")
    graph.load_state(ckpt.state)

    x, y, vocabulary, _ = load_dataset(args.data, size=input_shape[:2])
    if len(vocabulary) != n_classes:
        raise ShapeError(
            f"checkpoint expects {n_classes} classes but the manifest vocabulary has {len(vocabulary)}"
        )
    report = evaluate(graph, x, y, args.threshold, args.batch)
    text = report_text(report)
    csv_blob = report_csv(report, header=True)
    print(text)
    print(csv_blob)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        record = {
            "command": "eval",
            "package_version": __version__,
            "started": _utcnow(),
            "seed": None,
            "config": {
                "checkpoint": os.path.abspath(args.checkpoint),
                "data": os.path.abspath(args.data),
                "threshold": args.threshold,
                "batch": args.batch,
            },
            "inputs": {
                "checkpoint_sha1": _blob_sha1(args.checkpoint),
                "manifest_sha1": _blob_sha1(args.data),
            },
            "results": report,
        }
        with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        with open(os.path.join(args.out, "report.csv"), "w", encoding="utf-8") as fh:
            fh.write(csv_blob + "\n")
        record["finished"] = _utcnow()
        _write_run_manifest(args.out, record)
    return 0


def cmd_flops(args):
    if args.input < 32:
        raise ValidationError(f"--input must be >= 32, got {args.input}")
    net = assemble_fabricnet(
        args.classes, middle_count=args.middle,
        spec=parse_ensemble_spec(args.spec), input_shape=(args.input, args.input, 3),
    )
    out = {
        "classes": args.classes,
        "middle": args.middle,
        "spec": net.spec.canonical,
        "input_shape": [args.input, args.input, 3],
    }
    out.update(fabricnet_accounting(net))
    print(json.dumps(out))
    return 0


def cmd_gradcheck(args):
    dtypes = ("64", "32") if args.dtype == "both" else (args.dtype,)
    ok = True
    for dtype in dtypes:
        if args.op:
            reports = [check_op(args.op, dtype=dtype, seed=args.seed)]
        else:
            reports = [check_op(name, dtype=dtype, seed=args.seed) for name in OP_CHECKS]
            reports.append(check_model(dtype=dtype, seed=args.seed))
        for r in reports:
            ok = ok and r["ok"]
            status = "ok" if r["ok"] else "FAIL"
            print(
                f"{status} {r['name']} dtype={r['dtype']} max_rel_err={r['max_rel_err']:.3e} "
                f"eps={r['eps']:.1e} tol={r['tol']:.1e}"
            )
    return 0 if ok else 1


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, SpecParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ManifestError, ImageDecodeError, CheckpointError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FabricNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
