"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 threshold failure under ``--check``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import experiments as ex
from .alignment import TactileForceAdapter
from .baseline import ForceRegressionBaseline
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DatasetFormatError, DatasetManifest, compute_normalization, load_dataset, save_dataset
from .errors import ConfigError, NumericalError
from .policy import FlowMatchingPolicy, collect_demonstrations, evaluate_policy
from .sim import RAW_HZ, generate_dataset

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_THRESHOLD = 0, 1, 2, 3

logger = logging.getLogger("tactforce")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    try:
        doc = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as err:
        raise ConfigError(f"cannot parse config {path}: {err}") from err
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a key-value document")
    return doc


def _resolve(args) -> tuple[dict, int, Path]:
    try:
        override = load_config(args.config)
    except OSError as err:
        raise ConfigError(str(err)) from err
    cfg = ex.merge_config(ex.DEFAULT_CONFIG, override)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = Path(args.out)
    ex.write_config_snapshot(out, {"command": args.command, **cfg,
                                   "args": {k: v for k, v in vars(args).items() if k != "func"}})
    return cfg, int(cfg["seed"]), out


def _write_report(out: Path, report: dict, name: str = "report.json") -> Path:
    path = out / name
    path.write_text(json.dumps(report, indent=2, default=ex._jsonable))
    return path


def _episodes(cfg: dict, seed: int, data_dir: str | None):
    """(train, test) episodes: from a saved dataset (seeded 90/10 split) or generated."""
    if data_dir is None:
        return ex.make_datasets(cfg, seed)
    _, eps = load_dataset(data_dir)
    test = eps[-cfg["data"]["test_episodes"]:] if len(eps) > cfg["data"]["test_episodes"] else []
    if not test:
        raise ConfigError("dataset too small to hold out test episodes")
    return eps[:len(eps) - len(test)], test


def _save_episodes(episodes, path: Path):
    manifest = DatasetManifest(episodes=[], force_hz=RAW_HZ, normalization=compute_normalization(episodes))
    return save_dataset(manifest, episodes, path)


def _report_checks(results) -> int:
    code = EXIT_OK
    for r in results:
        print(r.line())
        if not r.passed:
            code = EXIT_THRESHOLD
    return code


# verbs -------------------------------------------------------------------------------

def cmd_gen(args, cfg, seed, out):
    d = cfg["data"]
    n = args.episodes or d["episodes"]
    sensors = args.sensors.split(",") if args.sensors else d["sensors"]
    indenters = args.indenters.split(",") if args.indenters else d["indenters"]
    duration = args.duration or d["duration"]
    eps = generate_dataset(n, sensors, indenters, duration, seed=seed)
    _save_episodes(eps, out / "dataset")
    print(f"wrote {n} episodes to {out / 'dataset'}")
    return EXIT_OK


def cmd_train_adapter(args, cfg, seed, out):
    train, test = _episodes(cfg, seed, args.data)
    log = ex.MetricsLog(out / "metrics.jsonl")
    adapter = ex.train_adapter(cfg, train, seed, log=log)
    save_checkpoint(adapter, out / "adapter.pt", cfg)
    metrics = ex.evaluate_adapter(adapter, train, test, cfg, seed)
    log.append(metrics)
    _write_report(out, {"kind": "adapter", "metrics": metrics, "history": adapter.history_})
    print(json.dumps(metrics, default=ex._jsonable))
    return _report_checks([ex.check_alignment(metrics)]) if args.check else EXIT_OK


def cmd_train_baseline(args, cfg, seed, out):
    train, test = _episodes(cfg, seed, args.data)
    log = ex.MetricsLog(out / "metrics.jsonl")
    model = ForceRegressionBaseline(**{**cfg["baseline"], "random_state": seed})
    model.fit(train, callback=lambda rec: log.append(rec, step=rec["step"]))
    save_checkpoint(model, out / "baseline.pt", cfg)
    metrics = {"wrench_rmse": model.wrench_rmse(test),
               "top1": model.retrieval(test, cfg["eval"]["batch_size"], seed)[0]}
    log.append(metrics)
    _write_report(out, {"kind": "baseline", "metrics": metrics, "history": model.history_})
    print(json.dumps(metrics))
    return EXIT_OK


def cmd_eval_adapter(args, cfg, seed, out):
    adapter, _ = load_checkpoint(args.checkpoint, TactileForceAdapter.__name__)
    train, test = _episodes(cfg, seed, args.data)
    metrics = ex.evaluate_adapter(adapter, train, test, cfg, seed)
    _write_report(out, {"kind": "adapter_eval", "metrics": metrics})
    print(json.dumps(metrics, default=ex._jsonable))
    return _report_checks([ex.check_alignment(metrics)]) if args.check else EXIT_OK


def cmd_train_policy(args, cfg, seed, out):
    adapter, _ = load_checkpoint(args.adapter, TactileForceAdapter.__name__)
    if args.demos:
        _, demos = load_dataset(args.demos)
    else:
        demos = collect_demonstrations(ex.grip_env(adapter), cfg["policy"]["demo_episodes"], seed)
        _save_episodes(demos, out / "demos")
    policies = ex.train_policies(adapter, demos, cfg, seed)
    for name, pol in policies.items():
        save_checkpoint(pol, out / f"policy_{name}.pt", cfg)
    print(f"trained {', '.join(policies)} policies on {len(demos)} demonstrations")
    return EXIT_OK


def cmd_eval_policy(args, cfg, seed, out):
    adapter, _ = load_checkpoint(args.adapter, TactileForceAdapter.__name__)
    env = ex.grip_env(adapter)
    p = cfg["policy"]
    results, log = {}, ex.MetricsLog(out / "episodes.jsonl")
    for path in args.policy:
        pol, _ = load_checkpoint(path, FlowMatchingPolicy.__name__)
        name = "tactile" if pol.use_tactile else "proprio"
        res = evaluate_policy(pol.as_policy(seed), env, p["eval_episodes"], p["eval_seed"])
        for rec in res["records"]:
            log.append({"policy": name, **rec}, episode=rec["episode"])
        results[name] = {"success_rate": res["success_rate"], "ci95": res["ci95"]}
    _write_report(out, {"kind": "policy_eval", "results": results})
    print(json.dumps(results))
    if args.check:
        if set(results) != {"tactile", "proprio"}:
            raise ConfigError("--check needs one tactile and one proprio policy")
        gap = results["tactile"]["success_rate"] - results["proprio"]["success_rate"]
        return _report_checks([ex.CheckResult("policy_gap", gap >= 0.15, f"tactile - proprio = {gap:.3f}")])
    return EXIT_OK


def cmd_ablate(args, cfg, seed, out):
    variant = args.variant or cfg["ablation"]["variant"]
    sigma = args.sigma_frac if args.sigma_frac is not None else cfg["ablation"]["sigma_frac"]
    spec = ex.AblationSpec(variant, sigma)
    seeds = [seed + s for s in cfg["ablation"]["seeds"]]
    report = ex.run_ablation(spec, cfg, seeds, log=ex.MetricsLog(out / "metrics.jsonl"))
    _write_report(out, report)
    for p in report["pairs"]:
        print(json.dumps({"seed": p["seed"], **p["delta"]}))
    if not args.check:
        return EXIT_OK
    check = {"no_history": ex.check_no_history, "shared_codebook": ex.check_shared_codebook,
             "label_noise": ex.check_label_noise}.get(variant)
    if check is None:
        raise ConfigError(f"no acceptance threshold defined for variant {variant!r}")
    return _report_checks([check(report)])


def cmd_cross_sensor(args, cfg, seed, out):
    held_out = args.held_out or cfg["cross_sensor"]["held_out"]
    train_sensors = args.train_sensors.split(",") if args.train_sensors else \
        [s for s in cfg["data"]["sensors"] if s != held_out]
    seeds = [seed + s for s in cfg["cross_sensor"]["seeds"]]
    report = ex.run_cross_sensor(train_sensors, held_out, cfg, seeds, log=ex.MetricsLog(out / "metrics.jsonl"))
    _write_report(out, report)
    return _report_checks([ex.check_cross_sensor(report)]) if args.check else EXIT_OK


def cmd_data_efficiency(args, cfg, seed, out):
    adapter, _ = load_checkpoint(args.adapter, TactileForceAdapter.__name__)
    budgets = [int(b) for b in args.budgets.split(",")] if args.budgets else cfg["efficiency"]["budgets"]
    report = ex.run_data_efficiency(budgets, cfg, adapter, seed, log=ex.MetricsLog(out / "metrics.jsonl"))
    _write_report(out, report)
    for name, curve in report["curves"].items():
        print(name, [(e["budget"], round(e["success_rate"], 3)) for e in curve])
    return _report_checks([ex.check_data_efficiency(report)]) if args.check else EXIT_OK


def cmd_plots(args, cfg, seed, out):
    reports = [json.loads(Path(p).read_text()) for p in args.reports]
    paths = ex.emit_plots(reports, out)
    print(f"wrote {len(paths)} plot files")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen, "train-adapter": cmd_train_adapter, "train-baseline": cmd_train_baseline,
    "eval-adapter": cmd_eval_adapter, "train-policy": cmd_train_policy, "eval-policy": cmd_eval_policy,
    "ablate": cmd_ablate, "cross-sensor": cmd_cross_sensor, "data-efficiency": cmd_data_efficiency,
    "plots": cmd_plots,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tactforce", description="Tactile-force alignment experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    parsers = {}
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON key-value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default=f"runs/{name}")
        p.add_argument("--check", action="store_true", help="enforce acceptance thresholds (exit 3 on failure)")
        parsers[name] = p
    parsers["gen"].add_argument("--episodes", type=int)
    parsers["gen"].add_argument("--sensors")
    parsers["gen"].add_argument("--indenters")
    parsers["gen"].add_argument("--duration", type=float)
    for name in ("train-adapter", "train-baseline", "eval-adapter"):
        parsers[name].add_argument("--data", help="dataset directory written by `gen`")
    parsers["eval-adapter"].add_argument("--checkpoint", required=True)
    for name in ("train-policy", "eval-policy", "data-efficiency"):
        parsers[name].add_argument("--adapter", required=True, help="frozen adapter checkpoint")
    parsers["train-policy"].add_argument("--demos", help="demonstration dataset directory")
    parsers["eval-policy"].add_argument("--policy", nargs="+", required=True)
    parsers["ablate"].add_argument("--variant", choices=ex.ABLATION_VARIANTS)
    parsers["ablate"].add_argument("--sigma-frac", type=float)
    parsers["cross-sensor"].add_argument("--held-out")
    parsers["cross-sensor"].add_argument("--train-sensors")
    parsers["data-efficiency"].add_argument("--budgets", help="comma-separated ascending episode budgets")
    parsers["plots"].add_argument("--reports", nargs="*", default=[])
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg, seed, out = _resolve(args)
        return COMMANDS[args.command](args, cfg, seed, out)
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, DatasetFormatError, FileNotFoundError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
