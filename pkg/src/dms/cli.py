"""Command-line entry point: ``dms <subcommand> ...``.

Exit status is 0 on success, 1 on invalid input (bad config, missing or
malformed files, failed gradient check) and 2 when a search misses its
resource target or training diverges.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np
from pydantic import ValidationError

from . import artifacts
from .config import ConfigError, echo_config, format_errors, parse_config
from .data import make_task
from .network import ArchitectureDescription, build_supernet, discrete_from_description, export_pruned
from .resource import fit_latency_model, read_latency_table
from .search import (DivergenceError, TargetMissError, evaluate, pretrain, retrain, run_pipeline)

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2

log = logging.getLogger("dms")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _run_dir(path):
    cfg_path = os.path.join(path, "config.json")
    if not os.path.isfile(cfg_path):
        raise ConfigError(f"{path}: not a run directory (no config.json)")
    return parse_config(cfg_path)


# ---------------------------------------------------------------- subcommands


def cmd_search(args):
    cfg = parse_config(args.config)
    out_dir = args.out or cfg.out_dir
    if not out_dir:
        raise ConfigError("no output directory: pass --out or set out_dir in the config")
    updates = {"out_dir": os.path.abspath(out_dir)}
    if args.seed is not None:
        updates["hyperparams"] = cfg.hyperparams.model_copy(update={"seed": args.seed})
    cfg = cfg.model_copy(update=updates)
    os.makedirs(out_dir, exist_ok=True)
    with artifacts.DirectoryLock(out_dir):
        echo_config(cfg, out_dir)
        try:
            desc, report = run_pipeline(cfg.pipeline_config(), out_dir)
        except TargetMissError as exc:
            print(f"target missed: {exc}", file=sys.stderr)
            print(f"final r_c: {exc.report.get('r_c_end')}", file=sys.stderr)
            return EXIT_FAILED
        except DivergenceError as exc:
            _write_json(os.path.join(out_dir, "divergence.json"), exc.dump)
            print(f"diverged: {exc}", file=sys.stderr)
            return EXIT_FAILED
    print(f"{report['resource_kind']}: {report['counted']:.6g} (target {report['r_final']:.6g}, "
          f"{100 * report['relative_error']:+.2f}%)")
    for d in desc.dims:
        print(f"  {d.name}: {d.k}/{d.n_max}")
    return EXIT_OK


def cmd_pretrain(args):
    cfg = parse_config(args.config)
    hp = cfg.hyperparams
    data = make_task(cfg.task)
    model = pretrain(cfg.model, data, hp, args.epochs, seed=args.seed)
    artifacts.save_checkpoint(args.out, model, {"pretrain_epochs": args.epochs})
    metrics = evaluate(model, data.x_val, data.y_val, data.task)
    print(f"wrote {args.out}; validation {json.dumps(metrics, sort_keys=True)}")
    return EXIT_OK


def cmd_retrain(args):
    cfg = _run_dir(args.run)
    hp = cfg.hyperparams
    if args.epochs is not None:
        hp = hp.model_copy(update={"retrain_epochs": args.epochs})
    desc = ArchitectureDescription.load(os.path.join(args.run, "architecture.json"))
    data = make_task(cfg.task)
    with artifacts.DirectoryLock(args.run):
        model, metrics = retrain(desc, data, hp, seed=args.seed)
        artifacts.save_checkpoint(os.path.join(args.run, "model.npz"), model,
                                  {"architecture": desc.to_dict(), "discrete": True})
        _write_json(os.path.join(args.run, "retrain.json"), {"retrain_epochs": hp.retrain_epochs, **metrics})
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def load_discrete(path):
    """Discrete model stored by ``search``/``retrain`` (architecture embedded in the checkpoint)."""
    ckpt = artifacts.load_checkpoint(path)
    if "architecture" not in ckpt["meta"]:
        raise artifacts.SchemaError(f"{path}: not a discrete model checkpoint")
    desc = ArchitectureDescription.from_dict(ckpt["meta"]["architecture"])
    model = discrete_from_description(desc)
    model.load_state_dict(ckpt["params"])
    return model, desc


def cmd_eval(args):
    cfg = _run_dir(args.run)
    model, _ = load_discrete(args.checkpoint or os.path.join(args.run, "model.npz"))
    data = make_task(cfg.task)
    x, y = getattr(data, f"x_{args.split}"), getattr(data, f"y_{args.split}")
    print(json.dumps({args.split: evaluate(model, x, y, data.task)}, sort_keys=True))
    return EXIT_OK


def cmd_export(args):
    ckpt = artifacts.load_checkpoint(args.checkpoint)
    model = build_supernet(ckpt["meta"]["spec"])
    artifacts.restore(model, ckpt)
    if not model.ops:
        raise ConfigError(f"{args.checkpoint}: model has no searchable dimensions")
    desc, _ = export_pruned(model, {"checkpoint": os.path.basename(args.checkpoint)})
    desc.save(args.out)
    for d in desc.dims:
        print(f"{d.name}: {d.k}/{d.n_max}")
    return EXIT_OK


def cmd_fit_latency(args):
    fits = fit_latency_model(read_latency_table(args.table))
    _write_json(args.out, {layer: fit.to_dict() for layer, fit in fits.items()})
    for layer, fit in sorted(fits.items()):
        print(f"{layer}: R^2 {fit.r2:.4f}, latency_max {fit.latency_max:.4g}s")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import run_suite

    report = run_suite(args.seeds, composite=not args.primitives_only)
    print("\n".join(report.lines()))
    print(f"max relative error: {max(report.primitive_max, report.composite_max):.3e}")
    return EXIT_OK if report.passed else EXIT_INVALID


def _metric(block):
    if not block:
        return None
    test = block.get("test", {})
    return test.get("accuracy", test.get("mse"))


def report_rows(run_dirs):
    rows = []
    for run in run_dirs:
        rep = _read_json(os.path.join(run, "report.json"))
        metrics_path = os.path.join(run, "metrics.jsonl")
        epochs = len(artifacts.read_metrics(metrics_path)) if os.path.exists(metrics_path) else 0
        searched, uniform = _metric(rep.get("searched")), _metric(rep.get("uniform"))
        rows.append({
            "run": run, "pipeline": rep["pipeline"], "seed": rep["seed"], "kind": rep["resource_kind"],
            "epochs": epochs, "target": rep["r_final"], "counted": rep["counted"],
            "rel_err": rep["relative_error"], "searched": searched, "uniform": uniform,
            "delta": None if searched is None or uniform is None else searched - uniform,
        })
    return rows


def format_report(rows):
    def f(v, spec):
        return "-" if v is None else format(v, spec)

    header = ("run", "pipeline", "seed", "kind", "epochs", "target", "counted", "rel_err",
              "searched", "uniform", "delta")
    lines = [header]
    for r in rows:
        lines.append((r["run"], r["pipeline"], str(r["seed"]), r["kind"], str(r["epochs"]), f(r["target"], ".6g"),
                      f(r["counted"], ".6g"), f(100 * r["rel_err"], "+.2f") + "%", f(r["searched"], ".4f"),
                      f(r["uniform"], ".4f"), f(r["delta"], "+.4f")))
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    out = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in lines]
    deltas = [r["delta"] for r in rows if r["delta"] is not None]
    if deltas:
        out.append(f"median delta (searched - uniform): {float(np.median(deltas)):+.4f} over {len(deltas)} run(s)")
    return "\n".join(out) + "\n"


def cmd_report(args):
    text = format_report(report_rows(args.runs))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser():
    p = _Parser(prog="dms", description="Differentiable width/depth search under resource budgets.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("search", help="run a pipeline (search, export, retrain)")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="output directory (overrides out_dir in the config)")
    s.add_argument("--seed", type=int, help="override hyperparams.seed")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("pretrain", help="train the unmasked supernet, for pipelines p and p-")
    s.add_argument("--config", required=True)
    s.add_argument("--epochs", type=int, required=True)
    s.add_argument("--out", required=True, help="checkpoint path (.npz)")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("retrain", help="retrain a run's exported architecture from scratch")
    s.add_argument("--run", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_retrain)

    s = sub.add_parser("eval", help="evaluate a run's final model")
    s.add_argument("--run", required=True)
    s.add_argument("--checkpoint", help="discrete model checkpoint (default: RUN/model.npz)")
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export", help="export the architecture held by a supernet checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("fit-latency", help="fit per-layer quadratic latency models to a table")
    s.add_argument("--table", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_latency)

    s = sub.add_parser("gradcheck", help="finite-difference check of every differentiable operation")
    s.add_argument("--seeds", type=int, default=100)
    s.add_argument("--primitives-only", action="store_true")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("report", help="compare searched and uniform-baseline results across runs")
    s.add_argument("runs", nargs="+")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def run_command(argv):
    """Parse ``argv`` and run one subcommand; returns the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (TargetMissError, DivergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except ValidationError as exc:
        print(f"error: invalid input\n{format_errors(exc)}", file=sys.stderr)
    except (ConfigError, artifacts.SchemaError, ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_INVALID


def main(argv=None):
    sys.exit(run_command(sys.argv[1:] if argv is None else argv))
