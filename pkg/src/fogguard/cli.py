"""Command-line entry point: ``fogguard <subcommand> ...``.

Exit codes: 0 success, 1 check failed (chaos verdict), 2 configuration
error, 3 data error, 4 runtime/daemon error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import platform
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import config as cfgmod
from .bundle import load_bundle, save_bundle
from .data import class_weights
from .inference import accuracy
from .resiliency import (
    average_accuracy,
    model_evaluator,
    monte_carlo_average_accuracy,
)
from .topology import TopologyError
from .training import train

log = logging.getLogger("fogguard")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, category: str, message: str):
        super().__init__(message)
        self.code = code
        self.category = category


def _address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host, int(port)


def _peer(text: str) -> tuple[str, tuple[str, int]]:
    node, sep, addr = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected node=host:port, got {text!r}")
    return node, _address(addr)


# -- shared plumbing --------------------------------------------------------


def _prepare(args) -> dict:
    try:
        cfg = cfgmod.load_config(args.config)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, "config error", str(exc))
    if getattr(args, "out", None):
        cfg["output_dir"] = args.out
    if getattr(args, "data", None):
        cfg["dataset"]["path"] = args.data
    if getattr(args, "epochs", None):
        cfg["training"]["epochs"] = args.epochs
    if getattr(args, "seeds", None):
        cfg["seeds"] = list(args.seeds)
    if getattr(args, "tiers", None):
        cfg["reliability"]["tiers"] = list(args.tiers)
    if getattr(args, "guess_mode", None):
        cfg["evaluation"]["guess_mode"] = args.guess_mode
    if getattr(args, "mode", None):
        cfg["evaluation"]["mode"] = args.mode
    if getattr(args, "samples", None):
        cfg["evaluation"]["samples"] = args.samples
    manifest = _manifest_path(cfg)
    if args.command != "train" and manifest.exists():
        # score the models with the settings they were trained under
        cfg["training"] = json.loads(manifest.read_text())["config"]["training"]
    errors = cfgmod.validate_config(cfg)
    if errors:
        raise CliError(EXIT_CONFIG, "config error", "\n  ".join(["invalid configuration:", *errors]))
    return cfg


def _load_data(cfg):
    try:
        return cfgmod.load_data(cfg)
    except FileNotFoundError as exc:
        raise CliError(EXIT_DATA, "data error", str(exc))
    except ValueError as exc:
        raise CliError(EXIT_DATA, "data error", str(exc))


def _manifest_path(cfg) -> Path:
    return Path(cfg["output_dir"]) / "manifest.json"


def _read_manifest(cfg) -> dict:
    path = _manifest_path(cfg)
    if path.exists():
        return json.loads(path.read_text())
    return {
        "config_hash": cfgmod.config_hash(cfg),
        "config": cfg,
        "versions": {"fogguard": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "models": {},
        "reports": {},
    }


def _write_manifest(cfg, manifest) -> None:
    path = _manifest_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


# -- commands ---------------------------------------------------------------


def cmd_train(cfg: dict, variant: str, seed: int, dataset=None) -> dict:
    """Train one variant with one seed; writes a model bundle and a manifest entry."""
    dataset = dataset if dataset is not None else _load_data(cfg)
    dnn = cfgmod.build_graph(cfg, variant)
    weights = None
    if cfg["training"].get("loss") == "weighted_cross_entropy":
        weights = class_weights(dataset)
    tcfg = cfgmod.training_config(cfg, seed, weights)
    model = train(dnn, dataset, tcfg)
    x_test, y_test = dataset.split_inputs("test", model.dnn)
    test_acc = accuracy(model.dnn, x_test, y_test)
    out = Path(cfg["output_dir"]) / "models" / variant / f"seed{seed}"
    chash = cfgmod.config_hash(cfg)
    save_bundle(
        out, model.dnn, cfg["topology"], cfgmod.VARIANTS[variant],
        variant=variant, seed=seed, config_hash=chash, best_epoch=model.best_epoch,
        val_accuracy=model.val_accuracy, test_accuracy=test_acc, history=model.history,
        split_seed=cfg["dataset"].get("split_seed", 0),
    )
    entry = {
        "path": str(out), "best_epoch": model.best_epoch, "val_accuracy": model.val_accuracy,
        "test_accuracy": test_acc, "skip_hyperconnections": len(model.dnn.skip_connections),
    }
    manifest = _read_manifest(cfg)
    if manifest["config_hash"] != chash:
        raise CliError(EXIT_CONFIG, "config error",
                       f"{_manifest_path(cfg)} belongs to config {manifest['config_hash']}, not {chash}")
    manifest.setdefault("models", {}).setdefault(variant, {})[str(seed)] = entry
    _write_manifest(cfg, manifest)
    return entry


def _report_for(cfg, dnn, x, y, reliability, seed, evaluator):
    ev = cfg["evaluation"]
    if ev["mode"] == "exact":
        rep = average_accuracy(dnn, x, y, reliability, ev["guess_mode"], seed, evaluator)
    else:
        rep = monte_carlo_average_accuracy(
            dnn, x, y, reliability, int(ev["samples"]), int(ev.get("mc_seed", 0)), ev["guess_mode"], evaluator
        )
    return rep


def cmd_resiliency(cfg: dict, models: Optional[dict] = None, dataset=None) -> list[dict]:
    """One report per (variant, seed, tier) plus a cross-seed aggregate table."""
    manifest = _read_manifest(cfg)
    models = models or manifest.get("models", {})
    if not models:
        raise CliError(EXIT_CONFIG, "config error", f"no trained models recorded in {_manifest_path(cfg)}")
    dataset = dataset if dataset is not None else _load_data(cfg)
    chash = cfgmod.config_hash(cfg)
    settings = cfgmod.reliability_settings(cfg)
    out_root = Path(cfg["output_dir"]) / "reports"
    per_tier: dict[tuple[str, str], list[float]] = {}
    for variant in sorted(models):
        for seed in sorted(models[variant], key=int):
            try:
                dnn, meta = load_bundle(models[variant][seed]["path"])
            except (OSError, ValueError, TopologyError) as exc:
                raise CliError(EXIT_CONFIG, "model error", f"{variant} seed {seed}: {exc}")
            x, y = dataset.split_inputs("test", dnn)
            evaluator = model_evaluator(dnn, x, y, cfg["evaluation"]["guess_mode"], int(seed))
            for tier, r in settings.items():
                if len(r) != len(dnn.fallible_order):
                    raise CliError(EXIT_CONFIG, "model error", f"tier {tier} does not match model topology")
                rep = _report_for(cfg, dnn, x, y, r, int(seed), evaluator)
                rep.meta = {"config_hash": chash, "seed": int(seed), "variant": variant, "tier": tier}
                stem = out_root / variant / f"seed{seed}" / tier
                stem.parent.mkdir(parents=True, exist_ok=True)
                rep.write(stem)
                per_tier.setdefault((variant, tier), []).append(rep.average_accuracy)
                manifest.setdefault("reports", {}).setdefault(variant, {}).setdefault(str(seed), {})[tier] = {
                    "csv": str(stem.with_suffix(".csv")), "average_accuracy": rep.average_accuracy,
                }
    rows = []
    order = list(settings)
    for (variant, tier), vals in sorted(per_tier.items(), key=lambda kv: (kv[0][0], order.index(kv[0][1]))):
        a = np.array(vals)
        rows.append({
            "variant": variant, "tier": tier, "mean": float(a.mean()),
            "std": float(a.std(ddof=1)) if len(a) > 1 else 0.0, "n_seeds": len(a),
            "values": " ".join(repr(float(v)) for v in a),
        })
    write_table(out_root / "aggregate.csv", rows, {"config_hash": chash, "guess_mode": cfg["evaluation"]["guess_mode"]})
    _write_manifest(cfg, manifest)
    return rows


def write_table(path: Path, rows: Sequence[dict], meta: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    for k, v in meta.items():
        buf.write(f"# {k}={v}\n")
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    path.write_text(buf.getvalue())


def read_table(path: Path) -> tuple[list[dict], dict]:
    meta, lines = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            k, _, v = line[2:].partition("=")
            meta[k] = v
        elif line:
            lines.append(line)
    return list(csv.DictReader(lines)), meta


def cmd_report(cfg: dict) -> dict:
    """Deltas table and bar chart from the aggregate resiliency table."""
    out_root = Path(cfg["output_dir"]) / "reports"
    agg = out_root / "aggregate.csv"
    if not agg.exists():
        raise CliError(EXIT_CONFIG, "config error", f"{agg} not found; run `fogguard resiliency` first")
    rows, meta = read_table(agg)
    for r in rows:
        r["mean"], r["std"] = float(r["mean"]), float(r["std"])
    by = {(r["variant"], r["tier"]): r for r in rows}
    deltas = []
    for tier in dict.fromkeys(r["tier"] for r in rows):
        if ("vanilla", tier) in by and ("deepfogguard", tier) in by:
            deltas.append({
                "tier": tier,
                "vanilla": by[("vanilla", tier)]["mean"],
                "deepfogguard": by[("deepfogguard", tier)]["mean"],
                "gap_pp": 100 * (by[("deepfogguard", tier)]["mean"] - by[("vanilla", tier)]["mean"]),
            })
    write_table(out_root / "summary.csv", deltas, meta)
    from .plotting import resiliency_bars, training_curves

    figure = resiliency_bars(rows, out_root / "average_accuracy.png", cfg.get("name", ""), meta)
    histories = {}
    manifest = _read_manifest(cfg)
    for variant, seeds in manifest.get("models", {}).items():
        for seed, entry in seeds.items():
            mpath = Path(entry["path"]) / "model.json"
            if mpath.exists():
                histories[f"{variant} seed {seed}"] = json.loads(mpath.read_text()).get("history", [])
    if histories:
        training_curves(histories, out_root / "training_curves.png")
    return {"summary": str(out_root / "summary.csv"), "figure": str(figure), "deltas": deltas}


def cmd_evaluate(cfg: dict, model_dir, failed: Sequence[str] = (), split: str = "test") -> dict:
    dnn, meta = load_bundle(model_dir)
    unknown = set(failed) - set(dnn.fallible_order)
    if unknown:
        raise CliError(EXIT_CONFIG, "config error", f"cannot fail {sorted(unknown)}: not fallible nodes")
    dataset = _load_data(cfg)
    x, y = dataset.split_inputs(split, dnn)
    bits = tuple(0 if n in failed else 1 for n in dnn.fallible_order)
    acc = accuracy(dnn, x, y, bits, cfg["evaluation"]["guess_mode"], int(meta.get("seed", 0)))
    return {"model": str(model_dir), "split": split, "failed": sorted(failed), "accuracy": acc,
            "config_hash": cfgmod.config_hash(cfg)}


def _runtime_inputs(cfg, dnn, instances: int):
    dataset = _load_data(cfg)
    x, y = dataset.split_inputs("test", dnn)
    if isinstance(x, dict):
        x = {k: v[:instances] for k, v in x.items()}
    else:
        x = x[:instances]
    return x, y[:instances]


def cmd_chaos(cfg: dict, model_dir, plan: Sequence[str], instances: int = 100, settle: int = 0,
              out_dir=None, timeouts: Optional[dict] = None) -> dict:
    """Distributed run under a chaos plan, judged against the in-process simulator."""
    from .runtime.pipeline import ChaosError, ChaosPlan, compare_with_simulator, run_pipeline

    dnn, meta = load_bundle(model_dir)
    try:
        chaos = ChaosPlan.parse(plan)
        chaos.validate(dnn)
    except (ChaosError, ValueError, KeyError) as exc:
        raise CliError(EXIT_CONFIG, "chaos plan error", str(exc))
    x, y = _runtime_inputs(cfg, dnn, instances)
    out_dir = Path(out_dir or Path(cfg["output_dir"]) / "chaos")
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        outcomes = run_pipeline(model_dir, dnn, x, instances, chaos, log_dir=out_dir, **(timeouts or {}))
    except RuntimeError as exc:
        raise CliError(EXIT_RUNTIME, "runtime error", str(exc))
    verdict = compare_with_simulator(dnn, x, outcomes, settle=settle, chaos=chaos)
    chash = cfgmod.config_hash(cfg)
    write_table(out_dir / "transcript.csv", verdict.rows,
                {"config_hash": chash, "seed": meta.get("seed"), "plan": " ".join(plan)})
    result = {
        "verdict": "pass" if verdict.passed else "fail", "max_deviation": verdict.max_deviation,
        "compared": verdict.compared, "mismatches": verdict.mismatches,
        "random_guesses": sum(r["random_guess"] for r in verdict.rows),
        "accuracy": float(np.mean([
            (1.0 / dnn.spec.output_dim) if r["random_guess"] else float(r["predicted"] == yy)
            for r, yy in zip(verdict.rows, y)
        ])),
        "config_hash": chash, "seed": meta.get("seed"), "plan": list(plan),
    }
    (out_dir / "verdict.json").write_text(json.dumps(result, indent=2, sort_keys=True, default=float))
    return result


# -- argument parsing -------------------------------------------------------


def _add_common(p, data=True):
    p.add_argument("config", help="experiment config file, or 'health' / 'camera' for the shipped ones")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    if data:
        p.add_argument("--data", help="dataset path (overrides dataset.path)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fogguard", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train Vanilla and/or deepFogGuard models")
    _add_common(p)
    p.add_argument("--variant", choices=["vanilla", "deepfogguard", "both"], default="both")
    p.add_argument("--seed", dest="seeds", type=int, action="append", help="repeatable; default: config seeds")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("evaluate", help="accuracy of one model under a failure combination")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--failed", default="", help="comma-separated ids of failed nodes")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])

    p = sub.add_parser("resiliency", help="average accuracy per reliability tier for all trained models")
    _add_common(p)
    p.add_argument("--tiers", nargs="+")
    p.add_argument("--mode", choices=["exact", "mc"])
    p.add_argument("--samples", type=int)
    p.add_argument("--guess-mode", choices=["expectation", "sampled"])

    p = sub.add_parser("report", help="summary table and figures from resiliency results")
    _add_common(p, data=False)

    p = sub.add_parser("serve-node", help="run one physical node daemon")
    p.add_argument("--model", required=True, help="model bundle directory")
    p.add_argument("--node-id", required=True)
    p.add_argument("--listen", type=_address, required=True)
    p.add_argument("--peer", type=_peer, action="append", default=[], help="node=host:port, repeatable")
    p.add_argument("--coordinator", type=_address, required=True)
    p.add_argument("--round-timeout", type=float, default=0.2)
    p.add_argument("--heartbeat-interval", type=float, default=0.05)
    p.add_argument("--suspicion-timeout", type=float, default=0.3)

    for name, helptext in (("run-distributed", "stream test instances through local node daemons"),
                           ("chaos", "distributed run with fault injection, checked against the simulator")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--model", required=True)
        p.add_argument("--instances", type=int, default=100)
        p.add_argument("--plan", "--chaos", dest="plan", nargs="*", default=[],
                       help="actions like kill:f2@50 revive:f2@80")
        p.add_argument("--settle", type=int, default=0, help="instances after each action left unjudged")
        p.add_argument("--round-timeout", type=float, default=0.2)
        p.add_argument("--instance-timeout", type=float, default=0.6)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return _dispatch(args)
    except CliError as exc:
        print(f"{exc.category}: {exc}", file=sys.stderr)
        return exc.code
    except KeyboardInterrupt:
        return 130


def _dispatch(args) -> int:
    if args.command == "serve-node":
        from .runtime.daemon import serve_node

        try:
            serve_node(args.model, args.node_id, args.listen, dict(args.peer), args.coordinator,
                       args.round_timeout, args.heartbeat_interval, args.suspicion_timeout)
        except (OSError, ValueError, KeyError, TopologyError) as exc:
            raise CliError(EXIT_CONFIG, "config error", f"serve-node {args.node_id}: {exc}")
        return EXIT_OK

    cfg = _prepare(args)
    if args.command == "train":
        variants = ["vanilla", "deepfogguard"] if args.variant == "both" else [args.variant]
        dataset = _load_data(cfg)
        for seed in cfg["seeds"]:
            for variant in variants:
                entry = cmd_train(cfg, variant, seed, dataset)
                print(json.dumps({"variant": variant, "seed": seed, **entry}))
    elif args.command == "evaluate":
        failed = [f for f in args.failed.split(",") if f]
        print(json.dumps(cmd_evaluate(cfg, args.model, failed, args.split)))
    elif args.command == "resiliency":
        for row in cmd_resiliency(cfg):
            print(json.dumps(row))
    elif args.command == "report":
        print(json.dumps(cmd_report(cfg), indent=2))
    elif args.command in ("run-distributed", "chaos"):
        timeouts = {"round_timeout": args.round_timeout, "instance_timeout": args.instance_timeout}
        result = cmd_chaos(cfg, args.model, args.plan, args.instances, args.settle, args.out and Path(args.out) / args.command, timeouts)
        print(json.dumps(result, default=float))
        if args.command == "chaos" and result["verdict"] != "pass":
            return EXIT_CHECK_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
