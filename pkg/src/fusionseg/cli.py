"""Command-line entry point: ``fusionseg <command> [flags]``.

Commands: synth, train, eval, predict, params, gradcheck, matrix.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import gradcheck as gc
from .data import (DatasetManifest, generate_synthetic, load_checkpoint, load_patient,
                   load_volume, normalize_intensity, predict_volume, split_patients,
                   store_volume)
from .errors import DataError, FusionSegError
from .fusion import FUNCTIONS, POINTS, FusionSpec
from .metrics import evaluate, memory_accuracy_ratio
from .model import ArchitectureSpec, build, count_parameters
from .optim import TrainConfig, TrainingHalted, TrainingLog, train
from .rng import stream

log = logging.getLogger("fusionseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(FusionSegError):
    exit_code = EXIT_USAGE


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- argument groups -------------------------------------------------------


def _arch_args(p):
    g = p.add_argument_group("architecture")
    g.add_argument("--fusion-point", choices=("none",) + POINTS, default="none")
    g.add_argument("--fusion-fn", choices=FUNCTIONS, default=None)
    g.add_argument("--arch", choices=("full", "small", "tiny"), default="full",
                   help="channel-width preset (full = 30..50 conv, 150 dense)")
    g.add_argument("--conv-dropout", type=float, default=0.02)
    g.add_argument("--dense-dropout", type=float, default=0.5)


def _train_args(p):
    d = TrainConfig()
    g = p.add_argument_group("training")
    g.add_argument("--lr", dest="learning_rate", type=float, default=d.learning_rate)
    g.add_argument("--beta1", type=float, default=d.beta1)
    g.add_argument("--beta2", type=float, default=d.beta2)
    g.add_argument("--epsilon", type=float, default=d.epsilon)
    g.add_argument("--epochs", type=int, default=d.epochs)
    g.add_argument("--batch-size", type=int, default=d.batch_size)
    g.add_argument("--l1", type=float, default=d.l1)
    g.add_argument("--l2", type=float, default=d.l2)
    g.add_argument("--patches-per-epoch", type=int, default=d.patches_per_epoch)
    g.add_argument("--test-patches", type=int, default=d.test_patches)
    g.add_argument("--tumor-fraction", type=float, default=d.tumor_fraction)
    g.add_argument("--test-count", type=int, default=50, help="patients held out for testing")


def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path, default=None,
                   help="YAML/JSON file with the same keys as the flags; flags win")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fusionseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    _common(p)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--patients", type=int, default=12)
    p.add_argument("--shape", default="48", help="N or DxHxW")

    p = sub.add_parser("train", help="train one architecture")
    _common(p)
    _arch_args(p)
    _train_args(p)
    p.add_argument("--manifest", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("eval", help="segment whole volumes with a checkpoint and score them")
    _common(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--manifest", type=Path, default=None)
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--test-count", type=int, default=50)
    p.add_argument("--out", type=Path, default=None, help="write the report as JSON here")

    p = sub.add_parser("predict", help="segment one volume")
    _common(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--manifest", type=Path, default=None)
    p.add_argument("--patient", default=None, help="patient id from --manifest")
    p.add_argument("--inputs", type=Path, nargs=4, default=None, metavar=("T1", "T1C", "T2", "FLAIR"),
                   help="four VVOL modality volumes instead of --manifest/--patient")
    p.add_argument("--out", type=Path, default=None, help="output VVOL label volume")

    p = sub.add_parser("params", help="print the per-layer parameter table")
    _common(p)
    _arch_args(p)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    _common(p)
    p.add_argument("--only", default=None,
                   help="comma-separated components (tensor,nn,fusion,model) or name substrings")
    p.add_argument("--inject-fault", choices=gc.FAULTS, default=None, help=argparse.SUPPRESS)

    p = sub.add_parser("matrix", help="train baseline + all nine fusion variants and tabulate")
    _common(p)
    _arch_args(p)
    _train_args(p)
    p.add_argument("--manifest", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--parallel-runs", type=int, default=1)
    return parser


def _load_config(path) -> dict:
    try:
        cfg = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must be a mapping of flag names to values")
    cfg = {str(k).replace("-", "_"): v for k, v in cfg.items()}
    if "lr" in cfg:
        cfg["learning_rate"] = cfg.pop("lr")
    return cfg


def parse_args(argv=None):
    """Parse flags; values from ``--config`` become defaults, so explicit flags win."""
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path, default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config is not None:
        try:
            cfg = _load_config(known.config)
        except UsageError as exc:
            parser.error(str(exc))
        subparsers = parser._subparsers._group_actions[0].choices
        dests = set()
        for sp in subparsers.values():
            own = {a.dest for a in sp._actions}
            dests |= own
            values = {k: (Path(v) if k in PATH_KEYS and v is not None else v)
                      for k, v in cfg.items() if k in own}
            sp.set_defaults(**values)
        unknown = sorted(set(cfg) - dests)
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
    return parser.parse_args(argv)


PATH_KEYS = ("manifest", "out", "checkpoint")


# -- helpers ---------------------------------------------------------------


def arch_from_args(args) -> ArchitectureSpec:
    if args.fusion_point == "none":
        if args.fusion_fn is not None:
            raise UsageError("--fusion-fn requires --fusion-point other than none")
        fusion = None
    else:
        if args.fusion_fn is None:
            raise UsageError(f"--fusion-point {args.fusion_point} needs --fusion-fn")
        fusion = FusionSpec(args.fusion_point, args.fusion_fn)
    return ArchitectureSpec.preset(args.arch, fusion=fusion, conv_dropout=args.conv_dropout,
                                   dense_dropout=args.dense_dropout)


def train_config_from_args(args) -> TrainConfig:
    return TrainConfig.from_dict(vars(args))


def run_name(spec: ArchitectureSpec, seed: int) -> str:
    if spec.fusion is None:
        return f"none-none-seed{seed}"
    return f"{spec.fusion.point}-{spec.fusion.function}-seed{seed}"


def _jsonable(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        out[k] = str(v) if isinstance(v, Path) else v
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError("missing required " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _require_file(path, what):
    if path is None or not Path(path).is_file():
        raise DataError(f"{what} not found: {path}")


def _split(manifest, test_count, seed):
    return split_patients(manifest, test_count, stream(seed, "split"))


# -- commands --------------------------------------------------------------


def cmd_synth(args):
    _require(args, "out")
    shape = [int(s) for s in str(args.shape).lower().split("x")]
    if len(shape) == 1:
        shape *= 3
    if len(shape) != 3:
        raise UsageError(f"--shape must be N or DxHxW, got {args.shape!r}")
    if args.patients < 1:
        raise UsageError("--patients must be positive")
    try:
        manifest = generate_synthetic(args.out, args.patients, tuple(shape), args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    counts = manifest.counts_by_grade
    print(f"wrote {len(manifest)} patients ({counts['LGG']} LGG, {counts['HGG']} HGG) "
          f"to {args.out / 'manifest.jsonl'}")
    return EXIT_OK


def run_training(spec: ArchitectureSpec, config: TrainConfig, manifest_path, out_root,
                 test_count: int, resolved: dict | None = None) -> dict:
    """Train one cell into ``out_root/<run name>``; returns its summary."""
    manifest = DatasetManifest.load(manifest_path)
    run_dir = Path(out_root) / run_name(spec, config.seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    train_ids, test_ids = _split(manifest, test_count, config.seed)
    if not test_ids:
        raise DataError("--test-count must be positive for training (epochs are scored on test patients)")
    _write_json(run_dir / "config.json", {
        "architecture": spec.to_dict(), "train": config.to_dict(), "test_count": test_count,
        "manifest": str(manifest_path), "args": resolved or {}})
    _write_json(run_dir / "split.json", {"train": train_ids, "test": test_ids, "seed": config.seed})
    net = build(spec, stream(config.seed, "init"))
    table = count_parameters(net)
    _write_json(run_dir / "params.json", {
        "total": table.total,
        "layers": [{"layer": r.layer, "weights": r.weights, "biases": r.biases} for r in table.rows]})
    train_patients = [load_patient(r) for r in manifest.by_id(train_ids)]
    test_patients = [load_patient(r) for r in manifest.by_id(test_ids)]
    train(net, train_patients, test_patients, config, out_dir=run_dir)
    summary = summarize_run(run_dir)
    _write_json(run_dir / "summary.json", summary)
    return summary


def summarize_run(run_dir) -> dict:
    """Best-dice epoch of a run, reconstructed from its log and parameter files."""
    run_dir = Path(run_dir)
    records = TrainingLog.read(run_dir / "log.jsonl")
    params = json.loads((run_dir / "params.json").read_text())["total"]
    cfg = json.loads((run_dir / "config.json").read_text())
    arch = ArchitectureSpec.from_dict(cfg["architecture"])
    out = {"run": run_dir.name, "point": arch.fusion.point if arch.fusion else "none",
           "function": arch.fusion.function if arch.fusion else "baseline", "params": params,
           "epochs": len(records), "dice": None, "accuracy": None, "best_epoch": None}
    if records:
        best = max(records, key=lambda r: (r.dice, -r.epoch))
        out.update(dice=best.dice, accuracy=best.accuracy, best_epoch=best.epoch)
    return out


def cmd_train(args):
    _require(args, "manifest", "out")
    spec = arch_from_args(args)
    config = train_config_from_args(args)
    _require_file(args.manifest, "manifest")
    summary = run_training(spec, config, args.manifest, args.out, args.test_count, _jsonable(args))
    print(f"{summary['run']}: best dice {summary['dice']:.4f} accuracy {summary['accuracy']:.4f} "
          f"(epoch {summary['best_epoch']}), {summary['params']} parameters")
    return EXIT_OK


def cmd_eval(args):
    _require(args, "checkpoint", "manifest")
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.manifest, "manifest")
    net = load_checkpoint(args.checkpoint)
    manifest = DatasetManifest.load(args.manifest)
    if args.split == "all":
        ids = [r.id for r in manifest]
    else:
        train_ids, test_ids = _split(manifest, args.test_count, args.seed)
        ids = test_ids if args.split == "test" else train_ids
    preds, truths, per_patient = [], [], []
    for record in manifest.by_id(ids):
        patient = load_patient(record)
        pred = predict_volume(net, patient)
        report = evaluate(pred, patient.label)
        per_patient.append({"id": record.id, "dice": report.dice_whole_tumor, "accuracy": report.accuracy})
        preds.append(pred.ravel())
        truths.append(patient.label.ravel())
        print(f"{record.id}: dice {report.dice_whole_tumor:.4f} accuracy {report.accuracy:.4f}")
    if not ids:
        raise DataError("no patients selected for evaluation")
    pooled = evaluate(np.concatenate(preds), np.concatenate(truths))
    print(f"pooled: dice {pooled.dice_whole_tumor:.4f} accuracy {pooled.accuracy:.4f}")
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        _write_json(args.out, {"checkpoint": str(args.checkpoint), "split": args.split,
                               "patients": per_patient, "pooled": pooled.to_dict()})
    return EXIT_OK


def cmd_predict(args):
    _require(args, "checkpoint", "out")
    _require_file(args.checkpoint, "checkpoint")
    net = load_checkpoint(args.checkpoint)
    if args.inputs is not None:
        raw = [load_volume(p)[0] for p in args.inputs]
        if len({v.shape for v in raw}) != 1:
            raise DataError("modality volumes have different shapes")
        image = np.stack([normalize_intensity(v) for v in raw])
    else:
        if args.manifest is None or args.patient is None:
            raise UsageError("predict needs --inputs or both --manifest and --patient")
        _require_file(args.manifest, "manifest")
        (record,) = DatasetManifest.load(args.manifest).by_id([args.patient])
        image = load_patient(record).image
    labels = predict_volume(net, image)
    store_volume(args.out, labels)
    print(f"wrote {labels.shape} label volume to {args.out}")
    return EXIT_OK


def cmd_params(args):
    spec = arch_from_args(args)
    table = count_parameters(build(spec))
    if args.json:
        print(json.dumps({"variant": spec.variant, "total": table.total,
                          "layers": [{"layer": r.layer, "weights": r.weights, "biases": r.biases,
                                      "total": r.total} for r in table.rows]}, indent=2))
    else:
        print(f"# {spec.variant} ({args.arch})")
        print(table.format())
    return EXIT_OK


def cmd_gradcheck(args):
    select = None if args.only is None else args.only.split(",")
    if args.inject_fault:
        with gc.inject_fault(args.inject_fault):
            results = gc.run_checks(select, args.seed)
    else:
        results = gc.run_checks(select, args.seed)
    print(gc.format_report(results))
    failed = [r for r in results if not r.passed]
    if failed:
        print("FAILED: " + ", ".join(f"{r.component}/{r.name}" for r in failed))
        return EXIT_NUMERIC
    return EXIT_OK


MATRIX_HEADER = ("point", "function", "dice", "accuracy", "params", "ratio")


def matrix_specs(base: ArchitectureSpec):
    """Baseline first, then early/middle/late x max/sum/conv."""
    yield replace(base, fusion=None)
    for point in POINTS:
        for fn in FUNCTIONS:
            yield replace(base, fusion=FusionSpec(point, fn))


def _matrix_cell(job):
    spec, config, manifest, out, test_count, resolved = job
    try:
        run_training(spec, config, manifest, out, test_count, resolved)
        return run_name(spec, config.seed), None
    except TrainingHalted as exc:
        return run_name(spec, config.seed), f"numeric failure: {exc}"


def collect_matrix(out_dir, specs, seed, failures=None) -> list[dict]:
    """Build the results rows from the per-run directories."""
    failures = failures or {}
    rows = []
    for spec in specs:
        name = run_name(spec, seed)
        run_dir = Path(out_dir) / name
        try:
            row = summarize_run(run_dir)
        except (OSError, KeyError, ValueError):
            row = {"run": name, "point": spec.fusion.point if spec.fusion else "none",
                   "function": spec.fusion.function if spec.fusion else "baseline",
                   "params": None, "dice": None, "accuracy": None}
        row["status"] = "failed" if name in failures or row.get("dice") is None else "ok"
        if name in failures:
            row["error"] = failures[name]
        rows.append(row)
    base = rows[0]
    for row in rows:
        ok = row["status"] == "ok" and base["status"] == "ok" and row["accuracy"] and base["accuracy"]
        row["ratio"] = (memory_accuracy_ratio(row["accuracy"], row["params"], base["accuracy"], base["params"])
                        if ok else None)
    return rows


def format_matrix(rows) -> str:
    def cell(v, fmt):
        return "-" if v is None else format(v, fmt)
    lines = [f"{'point':<7} {'function':<9} {'dice':>7} {'accuracy':>9} {'params':>9} {'ratio':>7}"]
    for r in rows:
        lines.append(f"{r['point']:<7} {r['function']:<9} {cell(r['dice'], '.4f'):>7} "
                     f"{cell(r['accuracy'], '.4f'):>9} {cell(r['params'], 'd'):>9} {cell(r['ratio'], '.4f'):>7}")
    return "\n".join(lines)


def cmd_matrix(args):
    _require(args, "manifest", "out")
    base = arch_from_args(args) if args.fusion_point == "none" else None
    if base is None:
        raise UsageError("matrix runs every fusion cell; do not pass --fusion-point/--fusion-fn")
    config = train_config_from_args(args)
    _require_file(args.manifest, "manifest")
    DatasetManifest.load(args.manifest)
    args.out.mkdir(parents=True, exist_ok=True)
    specs = list(matrix_specs(base))
    resolved = _jsonable(args)
    jobs = [(spec, config, args.manifest, args.out, args.test_count, resolved) for spec in specs]
    if args.parallel_runs > 1:
        with ProcessPoolExecutor(max_workers=args.parallel_runs) as pool:
            outcomes = list(pool.map(_matrix_cell, jobs))
    else:
        outcomes = []
        for job in jobs:
            log.info("matrix: training %s", run_name(job[0], config.seed))
            outcomes.append(_matrix_cell(job))
    failures = {name: err for name, err in outcomes if err}
    rows = collect_matrix(args.out, specs, config.seed, failures)
    text = format_matrix(rows)
    (args.out / "results.txt").write_text(text + "\n")
    with open(args.out / "results.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps({k: r.get(k) for k in MATRIX_HEADER + ("run", "status")}, sort_keys=True) + "\n")
    print(text)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
    "params": cmd_params, "gradcheck": cmd_gradcheck, "matrix": cmd_matrix,
}


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except TrainingHalted as exc:
        print(f"fusionseg: training halted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FusionSegError as exc:
        print(f"fusionseg: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
