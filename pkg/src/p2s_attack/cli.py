"""Command-line entry point: p2s-attack <subcommand> [options].

Subcommands: gen-data, train-victim, attack, eval, repro. Options may also be
given in a JSON file via --config; explicit flags win over file values.
Exit codes: 0 ok, 2 usage, 3 data error, 4 numeric failure.
"""

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackConfig, AttackOutcome, attack_clouds, build_fields
from .data_io import (
    DatasetManifest,
    append_jsonl,
    atomic_write_text,
    build_synthetic_dataset,
    read_jsonl,
    write_report,
    write_xyz,
)
from .errors import DataError, NumericError, P2SError
from .metrics import aggregate
from .victim import TrainConfig, VictimModel, accuracy, train

log = logging.getLogger("p2s_attack")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SIGNS = {"+": 1, "-": -1, "off": 0}
SIGN_NAMES = {v: k for k, v in SIGNS.items()}
# IFGM bounds the Frobenius norm of the whole displacement, PGD each coordinate
DEFAULT_BUDGET = {"ifgm": 3.0, "pgd": 0.3}
REPRO_ITERS = 40


class UsageError(P2SError):
    exit_code = EXIT_USAGE


def _add_attack_options(p):
    p.add_argument("--field", choices=("kde", "learned"), default="kde")
    p.add_argument("--field-steps", type=int, default=2000, help="score-net training steps (learned field)")
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--alpha", type=float, default=0.01, help="per-point step length")
    p.add_argument("--iters", type=int, default=500, help="maximum iterations")
    p.add_argument(
        "--stop", choices=("success", "fixed"), default="success",
        help="halt each cloud at its first misclassification, or always run --iters steps",
    )
    p.add_argument("--budget", type=float, default=None, help="default depends on --method")
    p.add_argument("--emd", choices=("approx", "exact"), default="approx")


def build_parser():
    parser = argparse.ArgumentParser(prog="p2s-attack", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help="worker processes (default: all cores)")
    common.add_argument("--config", type=Path, default=None, help="JSON file of option values")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic labelled dataset")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--test-fraction", type=float, default=0.3)

    p = sub.add_parser("train-victim", parents=[common], help="train the point-cloud classifier")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="model weights file")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=8)

    p = sub.add_parser("attack", parents=[common], help="attack one split of a dataset")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--method", choices=("ifgm", "pgd"), default="ifgm")
    p.add_argument("--p2s", choices=tuple(SIGNS), default="+", help="field guidance: toward (+), away (-), off")
    p.add_argument("--limit", type=int, default=None, help="attack only the first N clouds")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _add_attack_options(p)

    p = sub.add_parser("eval", parents=[common], help="aggregate run logs into a report")
    p.add_argument("runs", type=Path, nargs="+", help="run log(s) written by 'attack'")
    p.add_argument("--out", type=Path, required=True, help="report path (.csv and .json are written)")

    p = sub.add_parser("repro", parents=[common], help="generate, train, attack with all variants, report")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--limit", type=int, default=None, help="attack only the first N test clouds")
    p.add_argument("--ifgm-budget", type=float, default=DEFAULT_BUDGET["ifgm"])
    p.add_argument("--pgd-budget", type=float, default=DEFAULT_BUDGET["pgd"])
    _add_attack_options(p)
    # the ablation compares variants at an equal iteration count
    p.set_defaults(budget=None, stop="fixed", iters=REPRO_ITERS)
    return parser


def _given_dests(subparser, argv):
    """Destinations whose flags appear literally on the command line."""
    flags = {a.split("=", 1)[0] for a in argv if a.startswith("-")}
    return {a.dest for a in subparser._actions if flags & set(a.option_strings)}


def parse_args(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        values = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(values, dict):
        raise UsageError("config file must hold a JSON object")
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    types = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config")}
    unknown = sorted(k.replace("-", "_") for k in values if k.replace("-", "_") not in types)
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {unknown}")
    given = _given_dests(subparser, argv)
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest in given:
            continue
        action = types[dest]
        if value is not None and action.type is not None:
            value = action.type(value)
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config {key}={value!r} not in {sorted(action.choices)}")
        setattr(args, dest, value)
    return args


def _threads(args):
    return args.threads if args.threads else (os.cpu_count() or 1)


def _validate(args):
    for name in ("alpha", "theta", "budget", "ifgm_budget", "pgd_budget"):
        value = getattr(args, name, None)
        if value is not None and not (value > 0 or (name == "theta" and value == 0)):
            raise UsageError(f"--{name.replace('_', '-')} must be positive")
    for name in ("iters", "epochs", "points", "per_class", "field_steps"):
        value = getattr(args, name, None)
        if value is not None and value < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be >= 1")
    if getattr(args, "threads", None) is not None and args.threads < 1:
        raise UsageError("--threads must be >= 1")


# --- subcommands -----------------------------------------------------------------


def cmd_gen_data(args):
    try:
        manifest = build_synthetic_dataset(
            args.out, args.classes, args.per_class, args.points, args.seed, args.test_fraction
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    log.info("wrote %d clouds to %s", len(manifest.entries), args.out)
    print(json.dumps({"manifest": str(args.out / "manifest.json"), "sha256": manifest.digest()}))
    return manifest


def cmd_train_victim(args):
    manifest = DatasetManifest.load(args.manifest)
    train_set, test_set = manifest.load_split("train"), manifest.load_split("test")
    if not train_set:
        raise DataError("manifest has no training clouds")
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    model = VictimModel.init(len(manifest.classes), seed=args.seed)
    model, history = train(model, train_set, cfg)
    test_acc = accuracy(model, test_set)
    model.save(args.out, meta={"classes": manifest.classes, "seed": args.seed, "test_accuracy": test_acc})
    log_path = Path(str(args.out) + ".log.jsonl")
    if log_path.exists():
        log_path.unlink()
    for epoch, (loss, acc) in enumerate(zip(history.loss, history.accuracy)):
        append_jsonl(log_path, {"epoch": epoch, "loss": loss, "train_accuracy": acc})
    log.info("train accuracy %.3f, test accuracy %.3f", history.accuracy[-1] if history.accuracy else 0, test_acc)
    print(json.dumps({"model": str(args.out), "test_accuracy": test_acc}))
    return model, history


def _attack_config(args, method, sign, budget):
    return AttackConfig(
        method=method,
        theta=args.theta,
        field_sign=sign,
        alpha=args.alpha,
        max_iters=args.iters,
        budget=budget,
        seed=args.seed,
        stop_on_success=args.stop == "success",
    )


def _run_variant(model, clouds, cfg, args, fields=None):
    start = time.perf_counter()
    outcomes = attack_clouds(model, clouds, cfg, args.field, args.field_steps, _threads(args), args.emd, fields)
    log.info("%s: %d clouds in %.1f s", cfg.name, len(clouds), time.perf_counter() - start)
    return outcomes


def cmd_attack(args):
    manifest = DatasetManifest.load(args.manifest)
    model = VictimModel.load(args.model)
    clouds = manifest.load_split(args.split)[: args.limit]
    if not clouds:
        raise DataError(f"split {args.split!r} is empty")
    cfg = _attack_config(args, args.method, SIGNS[args.p2s], args.budget or DEFAULT_BUDGET[args.method])
    outcomes = _run_variant(model, clouds, cfg, args)
    out = Path(args.out)
    run_log = out / f"{cfg.name}.jsonl"
    header = {"kind": "config", "attack": cfg.name, "config": json.loads(cfg.to_json()), "field": args.field}
    atomic_write_text(run_log, json.dumps(header, sort_keys=True) + "\n")
    for o in outcomes:
        append_jsonl(run_log, {"kind": "outcome", **o.record()})
        if not o.skipped:
            write_xyz(out / cfg.name / f"{o.cloud_id}.xyz", o.adv_points)
    report = aggregate(outcomes)
    print(json.dumps({"run_log": str(run_log), "asr": report.asr, "attacked": report.attacked}))
    return outcomes


def _outcomes_from_log(records):
    return [
        AttackOutcome(
            r["cloud_id"], r["label"], r["clean_pred"], None, r["adv_pred"], r["success"],
            r["iterations"], r["skipped"], r["metrics"], r.get("displacement", {}),
        )
        for r in records
        if r.get("kind") == "outcome"
    ]


def cmd_eval(args):
    rows, configs = [], []
    for path in args.runs:
        records = read_jsonl(path)
        head = next((r for r in records if r.get("kind") == "config"), None)
        if head is None:
            raise DataError(f"{path}: run log has no config record")
        rows.append((head["attack"], aggregate(_outcomes_from_log(records))))
        configs.append({"attack": head["attack"], "config": head["config"], "field": head.get("field")})
    csv_path, json_path = write_report(rows, {"runs": configs}, args.out)
    print(json.dumps({"csv": str(csv_path), "json": str(json_path)}))
    return rows


ORDERED_METRICS = ("cd", "hd")


def ordering_checks(reports):
    """Directional checks on {attack name: MetricsReport}; returns [(label, passed)]."""
    checks = []
    for method in ("ifgm", "pgd"):
        plus, base, minus = (reports.get(method + s) for s in ("+p2s", "", "-p2s"))
        if base is None:
            continue
        for m in ORDERED_METRICS:
            b = getattr(base, m)
            if plus is not None:
                p = getattr(plus, m)
                checks.append((f"{method}: {m} with field < without", p is not None and b is not None and p < b))
            if minus is not None:
                n = getattr(minus, m)
                checks.append((f"{method}: {m} without field < reversed field", b is not None and n is not None and b < n))
        if plus is not None:
            checks.append((f"{method}: equal ASR with and without field", plus.asr == base.asr))
    return checks


def cmd_repro(args):
    out = Path(args.out)
    data_dir = out / "data"
    manifest = build_synthetic_dataset(data_dir, args.classes, args.per_class, args.points, args.seed)
    manifest = DatasetManifest.load(data_dir / "manifest.json")
    train_set, test_set = manifest.load_split("train"), manifest.load_split("test")
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed)
    model, _ = train(VictimModel.init(len(manifest.classes), seed=args.seed), train_set, cfg)
    model.save(out / "victim.p2sw", meta={"classes": manifest.classes, "seed": args.seed})
    clean_acc = accuracy(model, test_set)
    log.info("victim test accuracy %.3f", clean_acc)
    clouds = test_set[: args.limit]
    budgets = {"ifgm": args.ifgm_budget, "pgd": args.pgd_budget}
    fields = build_fields(clouds, args.field, args.seed, args.field_steps, _threads(args))
    rows, reports = [], {}
    for method in ("ifgm", "pgd"):
        for sign in (0, 1, -1):
            cfg = _attack_config(args, method, sign, budgets[method])
            outcomes = _run_variant(model, clouds, cfg, args, fields)
            run_log = out / "runs" / f"{cfg.name}.jsonl"
            atomic_write_text(run_log, "")
            for o in outcomes:
                append_jsonl(run_log, {"kind": "outcome", **o.record()})
            rep = aggregate(outcomes)
            rows.append((cfg.name, rep))
            reports[cfg.name] = rep
    checks = ordering_checks(reports)
    metadata = {
        "seed": args.seed,
        "field": args.field,
        "theta": args.theta,
        "alpha": args.alpha,
        "iters": args.iters,
        "stop": args.stop,
        "budgets": budgets,
        "manifest_sha256": manifest.digest(),
        "clean_test_accuracy": clean_acc,
        "attacked_clouds": len(clouds),
        "ordering_checks": [{"check": c, "passed": bool(ok)} for c, ok in checks],
        "version": __version__,
    }
    write_report(rows, metadata, out / "report")
    for label, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {label}")
    return reports, checks


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-victim": cmd_train_victim,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "repro": cmd_repro,
}


def _fail(exc, code):
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get("P2S_LOG_LEVEL", "WARNING").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        args = parse_args(argv)
        _validate(args)
        COMMANDS[args.command](args)
    except SystemExit as exc:  # argparse usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        return _fail(exc, EXIT_USAGE)
    except DataError as exc:
        return _fail(exc, EXIT_DATA)
    except NumericError as exc:
        return _fail(exc, EXIT_NUMERIC)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        return _fail(exc, EXIT_DATA)
    except ValueError as exc:
        return _fail(exc, EXIT_USAGE)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
