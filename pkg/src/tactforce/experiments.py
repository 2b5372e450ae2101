"""Experiment orchestration: configs, metric logs, paired comparisons and plots."""

from __future__ import annotations

import copy
import json
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .alignment import TactileForceAdapter, fit_wrench_probe, wrench_rmse
from .baseline import ForceRegressionBaseline
from .data import Episode, compute_normalization, split_episodes, stack_windows
from .errors import ConfigError, LeakageError
from .policy import (FlowMatchingPolicy, GripEnv, GripEnvConfig, collect_demonstrations,
                     demonstrations_to_arrays, evaluate_policy)
from .sim import SENSORS, dataset_viscous_floor, generate_dataset, inject_label_noise

METRICS_SCHEMA_VERSION = 1

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "data": {"episodes": 200, "test_episodes": 50, "sensors": list(SENSORS), "indenters": None,
             "duration": 4.0},
    "adapter": {"window": 5, "n_codes_p": 32, "n_codes_w": 32, "n_steps": 5000, "batch_size": 64,
                "learning_rate": 1e-3, "temperature": 0.07, "lambda_quant": 1.0, "lambda_recon": 1.0},
    "baseline": {"window": 5, "n_steps": 5000, "batch_size": 64, "learning_rate": 1e-3},
    "eval": {"batch_size": 64, "probe_alpha": 1.0, "probe_stride": 2},
    "policy": {"horizon": 8, "n_steps": 3000, "batch_size": 256, "hidden": 128,
               "demo_episodes": 200, "eval_episodes": 200, "eval_seed": 10_000},
    "cross_sensor": {"held_out": "m7x9", "seeds": [0, 1, 2]},
    "ablation": {"variant": "no_history", "sigma_frac": 1.0, "seeds": [0]},
    "efficiency": {"budgets": [100, 200]},
}

ABLATION_VARIANTS = ("no_history", "small_codebook", "shared_codebook", "label_noise")
BUDGET_KEYS = ("n_steps", "batch_size", "random_state")


def merge_config(base: dict, override: dict | None) -> dict:
    """Recursive dict merge; unknown top-level sections are rejected."""
    out = copy.deepcopy(base)
    for key, val in (override or {}).items():
        if key not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[key], dict) and isinstance(val, dict):
            for k, v in val.items():
                out[key][k] = copy.deepcopy(v)
        else:
            out[key] = copy.deepcopy(val)
    return out


def write_config_snapshot(out_dir, config: dict, name: str = "config.json") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(json.dumps(config, indent=2, sort_keys=True, default=_jsonable))
    return path


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


class MetricsLog:
    """Append-only line-delimited metric records for one run."""

    def __init__(self, path, run_id: str | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.run_id = run_id or uuid.uuid4().hex[:12]
        self._t0 = time.perf_counter()

    def append(self, metrics: dict, step: int | None = None, episode: int | None = None):
        rec = {"schema": METRICS_SCHEMA_VERSION, "run_id": self.run_id,
               "wall_s": round(time.perf_counter() - self._t0, 4)}
        if step is not None:
            rec["step"] = int(step)
        if episode is not None:
            rec["episode"] = int(episode)
        rec["metrics"] = metrics
        with self.path.open("a") as fh:
            fh.write(json.dumps(rec, default=_jsonable) + "\n")

    @staticmethod
    def read(path) -> list[dict]:
        with Path(path).open() as fh:
            return [json.loads(line) for line in fh if line.strip()]


# data --------------------------------------------------------------------------------

def make_datasets(config: dict, seed: int, sensors: Sequence[str] | None = None):
    """(train, test) episode lists; the test set uses a disjoint generator seed."""
    d = config["data"]
    sensors = list(sensors or d["sensors"])
    train = generate_dataset(d["episodes"], sensors, d["indenters"], d["duration"], seed=seed)
    test = generate_dataset(d["test_episodes"], sensors, d["indenters"], d["duration"], seed=seed + 1_000_003)
    return train, test


# adapter evaluation -----------------------------------------------------------------

def _windows_from(episodes, window: int, stride: int, first_end: int):
    """Windows whose final frame index is >= ``first_end`` (aligns targets across N)."""
    wb = stack_windows(episodes, window, 1)
    keep = (wb.start + window - 1 >= first_end) & ((wb.start + window - 1 - first_end) % stride == 0)
    return wb.take(np.flatnonzero(keep))


def probe_rmse(adapter, train_eps, test_eps, alpha: float = 1.0, stride: int = 2, first_end: int = 4) -> float:
    """Ridge probe from frozen embeddings to the final-frame wrench, RMSE on ``test_eps``."""
    tr = _windows_from(train_eps, adapter.window, stride, first_end)
    te = _windows_from(test_eps, adapter.window, 1, first_end)
    probe = fit_wrench_probe(adapter.transform(tr.images), tr.wrenches[:, -1], alpha)
    return wrench_rmse(probe.predict(adapter.transform(te.images)), te.wrenches[:, -1])


def evaluate_adapter(adapter: TactileForceAdapter, train_eps, test_eps, config: dict, seed: int = 0) -> dict:
    ev = config["eval"]
    top1, top5 = adapter.retrieval(test_eps, ev["batch_size"], seed)
    return {"top1": top1, "top5": top5,
            "probe_rmse": probe_rmse(adapter, train_eps, test_eps, ev["probe_alpha"], ev["probe_stride"]),
            "recon_error": adapter.reconstruction_error(test_eps),
            "perplexity": adapter.code_perplexity(test_eps)}


def train_adapter(config: dict, episodes, seed: int, log: MetricsLog | None = None, **overrides):
    params = {**config["adapter"], **overrides, "random_state": seed}
    adapter = TactileForceAdapter(**params)
    cb = (lambda rec: log.append(rec, step=rec["step"])) if log is not None else None
    return adapter.fit(episodes, callback=cb)


def check_paired(ref: dict, var: dict, allowed: Sequence[str] = ()):
    """Refuse comparisons whose budgets or non-ablated settings differ."""
    for key in BUDGET_KEYS:
        if ref.get(key) != var.get(key):
            raise ConfigError(f"mismatched budgets: {key} {ref.get(key)} != {var.get(key)}")
    diff = [k for k in set(ref) | set(var) if ref.get(k) != var.get(k) and k not in allowed]
    if diff:
        raise ConfigError(f"variant changes more than the ablated factor: {sorted(diff)}")


@dataclass
class AblationSpec:
    variant: str
    sigma_frac: float = 1.0
    reference_id: str | None = None

    def __post_init__(self):
        if self.variant not in ABLATION_VARIANTS:
            raise ConfigError(f"unknown ablation variant {self.variant!r}; choose from {ABLATION_VARIANTS}")
        if self.sigma_frac < 0:
            raise ConfigError("sigma_frac must be >= 0")

    def overrides(self) -> dict:
        return {"no_history": {"window": 1},
                "small_codebook": {"n_codes_p": 4, "n_codes_w": 4},
                "shared_codebook": {"shared_codebook": True},
                "label_noise": {}}[self.variant]


def noisy_training_set(episodes: Sequence[Episode], sigma_frac: float, val_fraction: float, seed: int):
    """Label noise scaled by the per-channel std of the (clean) training split."""
    train_eps, _ = split_episodes(episodes, val_fraction, seed)
    stats = compute_normalization(train_eps)
    return [inject_label_noise(ep, sigma_frac, stats, seed=seed * 100_003 + i) for i, ep in enumerate(episodes)]


def run_ablation(spec: AblationSpec, config: dict, seeds: Sequence[int] | None = None,
                 references: dict | None = None, data: dict | None = None,
                 log: MetricsLog | None = None) -> dict:
    """Train the variant against a matched reference for each seed; report paired deltas.

    ``references`` maps seed -> fitted reference adapter (trained when absent);
    ``data`` maps seed -> (train, test) episodes. Variants are evaluated on
    clean held-out data.
    """
    seeds = list(seeds if seeds is not None else config["ablation"]["seeds"])
    references = dict(references or {})
    data = dict(data or {})
    pairs = []
    for seed in seeds:
        train, test = data.get(seed) or make_datasets(config, seed)
        ref = references.get(seed) or train_adapter(config, train, seed)
        var_train = train
        if spec.variant == "label_noise":
            var_train = noisy_training_set(train, spec.sigma_frac, ref.val_fraction, seed)
        var = train_adapter(config, var_train, seed, **spec.overrides())
        check_paired(ref.get_params(), var.get_params(), allowed=list(spec.overrides()))
        m_ref = evaluate_adapter(ref, train, test, config, seed)
        m_var = evaluate_adapter(var, train, test, config, seed)
        delta = {k: m_var[k] - m_ref[k] for k in ("top1", "top5", "probe_rmse", "recon_error")}
        pair = {"seed": seed, "reference": m_ref, "variant": m_var, "delta": delta,
                "reference_history": ref.history_, "variant_history": var.history_}
        if spec.variant == "no_history":
            pair["viscous_floor"] = dataset_viscous_floor(test)
        pairs.append(pair)
        if log is not None:
            log.append({"seed": seed, **{f"delta_{k}": v for k, v in delta.items()}})
    return {"kind": "ablation", "variant": spec.variant, "sigma_frac": spec.sigma_frac,
            "reference_id": spec.reference_id, "seeds": seeds, "pairs": pairs}


# cross-sensor --------------------------------------------------------------------------

def check_no_leakage(episodes: Sequence[Episode], held_out: str):
    leaked = sorted({i for i, ep in enumerate(episodes) if ep.sensor_id == held_out})
    if leaked:
        raise LeakageError(f"held-out sensor {held_out!r} found in {len(leaked)} training episodes")


def _ratio(seen: float, unseen: float, higher_is_better: bool) -> float:
    num, den = (seen, unseen) if higher_is_better else (unseen, seen)
    return float(num / den) if den > 0 else float("inf")


def run_cross_sensor(train_sensors: Sequence[str], held_out: str, config: dict,
                     seeds: Sequence[int] | None = None, log: MetricsLog | None = None) -> dict:
    """Adapter vs regression baseline on a held-out sensor, seen vs unseen in training.

    Per seed, each method is trained twice on the same trajectory seeds: once on
    ``train_sensors`` only (unseen) and once with ``held_out`` added to the sensor
    rotation (seen). Both are tested on the same held-out-sensor episodes, so the
    ratios isolate the effect of never having trained on that sensor. Ratios are
    >1 when unseen is worse (top-1 seen/unseen; RMSE unseen/seen).
    """
    if held_out not in SENSORS:
        raise ConfigError(f"unknown sensor {held_out!r}")
    seeds = list(seeds if seeds is not None else config["cross_sensor"]["seeds"])
    d, ev = config["data"], config["eval"]
    runs = []
    for seed in seeds:
        sets = {"unseen": generate_dataset(d["episodes"], train_sensors, d["indenters"], d["duration"], seed=seed),
                "seen": generate_dataset(d["episodes"], [*train_sensors, held_out], d["indenters"], d["duration"],
                                         seed=seed)}
        check_no_leakage(sets["unseen"], held_out)
        test = generate_dataset(d["test_episodes"], [held_out], d["indenters"], d["duration"], seed=seed + 1_000_003)
        base_params = {**config["baseline"], "random_state": seed}
        if base_params["n_steps"] != config["adapter"]["n_steps"] or \
                base_params["batch_size"] != config["adapter"]["batch_size"]:
            raise ConfigError("mismatched budgets between adapter and baseline")
        res = {"seed": seed}
        for cond, train in sets.items():
            adapter = train_adapter(config, train, seed)
            baseline = ForceRegressionBaseline(**base_params).fit(train)
            res[f"adapter_top1_{cond}"] = adapter.retrieval(test, ev["batch_size"], seed)[0]
            res[f"adapter_rmse_{cond}"] = probe_rmse(adapter, train, test, ev["probe_alpha"], ev["probe_stride"])
            res[f"baseline_top1_{cond}"] = baseline.retrieval(test, ev["batch_size"], seed)[0]
            te = _windows_from(test, baseline.window, 1, 4)
            res[f"baseline_rmse_{cond}"] = wrench_rmse(baseline.predict(te.images), te.wrenches[:, -1])
            res[f"adapter_history_{cond}"] = adapter.history_
            res[f"baseline_history_{cond}"] = baseline.history_
        for method in ("adapter", "baseline"):
            res[f"{method}_ratio_top1"] = _ratio(res[f"{method}_top1_seen"], res[f"{method}_top1_unseen"], True)
            res[f"{method}_ratio_rmse"] = _ratio(res[f"{method}_rmse_seen"], res[f"{method}_rmse_unseen"], False)
        runs.append(res)
        if log is not None:
            log.append({k: v for k, v in res.items() if "history" not in k})
    return {"kind": "cross_sensor", "train_sensors": list(train_sensors), "held_out": held_out,
            "seeds": seeds, "runs": runs}


# data efficiency ------------------------------------------------------------------

def train_policies(adapter, demos: Sequence[Episode], config: dict, seed: int) -> dict:
    """Tactile-conditioned and proprioception-only policies on the same demonstrations."""
    p = config["policy"]
    window = adapter.window
    obs, actions = demonstrations_to_arrays(demos, adapter.transform, window)
    params = dict(horizon=p["horizon"], n_steps=p["n_steps"], batch_size=p["batch_size"], hidden=p["hidden"],
                  random_state=seed)
    return {"tactile": FlowMatchingPolicy(use_tactile=True, **params).fit(obs, actions),
            "proprio": FlowMatchingPolicy(use_tactile=False, **params).fit(obs, actions)}


def grip_env(adapter) -> GripEnv:
    return GripEnv(GripEnvConfig(window=adapter.window), tactile_encoder=adapter.transform)


def run_data_efficiency(budgets: Sequence[int], config: dict, adapter: TactileForceAdapter, seed: int = 0,
                        log: MetricsLog | None = None) -> dict:
    """Success-rate curves of both policies over nested demonstration budgets."""
    budgets = [int(b) for b in budgets]
    if not budgets or any(b <= 0 for b in budgets):
        raise ConfigError("episode budgets must be positive")
    if budgets != sorted(budgets):
        raise ConfigError("episode budgets must be sorted ascending")
    p = config["policy"]
    env = grip_env(adapter)
    demos = collect_demonstrations(env, budgets[-1], seed)
    curves: dict[str, list] = {"tactile": [], "proprio": []}
    for b in budgets:
        policies = train_policies(adapter, demos[:b], config, seed)
        for name, pol in policies.items():
            res = evaluate_policy(pol.as_policy(seed), env, p["eval_episodes"], p["eval_seed"])
            entry = {"budget": b, "success_rate": res["success_rate"], "ci95": res["ci95"],
                     "fm_history": pol.history_}
            curves[name].append(entry)
            if log is not None:
                log.append({"policy": name, "budget": b, "success_rate": res["success_rate"],
                            "ci95": res["ci95"]})
    return {"kind": "data_efficiency", "budgets": budgets, "seed": seed, "curves": curves}


# plots ---------------------------------------------------------------------------------

def report_series(report: dict) -> dict[str, dict[str, tuple[list, list]]]:
    """Plot-ready series: {figure name: {series label: (x, y)}}."""
    figs: dict[str, dict] = {}
    kind = report.get("kind")
    if "series" in report:
        return {report.get("name", "report"): {k: (list(v[0]), list(v[1])) for k, v in report["series"].items()}}

    def add_history(prefix: str, history: list):
        if not history:
            return
        steps = [h["step"] for h in history]
        for key in history[0]:
            if key.startswith("l_") or key in ("mse_wrench", "mse_pmap", "fm_loss"):
                figs.setdefault(f"{prefix}_loss", {})[key] = (steps, [h[key] for h in history])
            elif key.startswith("perplexity"):
                figs.setdefault(f"{prefix}_perplexity", {})[key] = (steps, [h[key] for h in history])
            elif key == "probe_top1":
                figs.setdefault(f"{prefix}_retrieval", {})[key] = (steps, [h[key] for h in history])

    if kind == "ablation":
        for pair in report["pairs"]:
            add_history(f"ablation_{report['variant']}_seed{pair['seed']}_reference", pair["reference_history"])
            add_history(f"ablation_{report['variant']}_seed{pair['seed']}_variant", pair["variant_history"])
    elif kind == "cross_sensor":
        for run in report["runs"]:
            for cond in ("seen", "unseen"):
                add_history(f"cross_sensor_seed{run['seed']}_adapter_{cond}", run[f"adapter_history_{cond}"])
                add_history(f"cross_sensor_seed{run['seed']}_baseline_{cond}", run[f"baseline_history_{cond}"])
    elif kind == "data_efficiency":
        figs["data_efficiency"] = {name: ([e["budget"] for e in c], [e["success_rate"] for e in c])
                                   for name, c in report["curves"].items()}
    elif kind == "adapter":
        add_history("adapter", report.get("history", []))
    return figs


def emit_plots(reports: Sequence[dict], out_dir) -> list[Path]:
    """One PNG per figure; returns written paths (none for an empty report list)."""
    written = []
    if not reports:
        return written
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for report in reports:
        for fig_name, series in report_series(report).items():
            fig, ax = plt.subplots(figsize=(5, 3.2))
            for label, (x, y) in series.items():
                ax.plot(x, y, marker="o" if len(x) < 20 else None, label=label)
            ax.set_title(fig_name, fontsize=9)
            ax.legend(fontsize=7)
            fig.tight_layout()
            path = out / f"{fig_name}.png"
            fig.savefig(path, dpi=100, metadata={"Software": None})
            plt.close(fig)
            written.append(path)
    return written


# acceptance thresholds ------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def check_alignment(metrics: dict, min_top1: float = 0.5, min_perplexity: float = 4.0) -> CheckResult:
    perp = metrics["perplexity"]
    ok = metrics["top1"] >= min_top1 and all(v >= min_perplexity for v in perp.values())
    detail = f"top1={metrics['top1']:.3f} (>= {min_top1}), perplexity " + \
        ", ".join(f"{k}={v:.2f}" for k, v in perp.items()) + f" (>= {min_perplexity})"
    return CheckResult("alignment", ok, detail)


def check_no_history(report: dict, floor_fraction: float = 0.5) -> CheckResult:
    gaps = [p["delta"]["probe_rmse"] for p in report["pairs"]]
    floors = [p["viscous_floor"] for p in report["pairs"]]
    gap, floor = float(np.mean(gaps)), float(np.mean(floors))
    ok = gap > 0 and gap >= floor_fraction * floor
    return CheckResult("no_history", ok, f"probe RMSE gap {gap:.3f} N vs {floor_fraction} x floor {floor:.3f} N")


def check_shared_codebook(report: dict, min_seeds: int = 3) -> CheckResult:
    deltas = [p["delta"]["recon_error"] for p in report["pairs"]]
    ok = len(deltas) >= min_seeds and all(d > 0 for d in deltas)
    return CheckResult("shared_codebook", ok,
                       "shared - split recon error per seed: " + ", ".join(f"{d:.3f}" for d in deltas))


def check_label_noise(report: dict, min_drop: float = 0.10, tolerance: float | None = None) -> CheckResult:
    """sigma_frac > 0: top-1 must drop by more than ``min_drop``; sigma_frac == 0: the
    change must stay within ``tolerance`` (default: 2 x std of reference top-1 across seeds,
    0 with a single seed)."""
    deltas = np.array([p["delta"]["top1"] for p in report["pairs"]])
    if report["sigma_frac"] > 0:
        drop = float(-deltas.mean())
        return CheckResult("label_noise", drop > min_drop, f"top1 drop {drop:.3f} (> {min_drop})")
    if tolerance is None:
        refs = np.array([p["reference"]["top1"] for p in report["pairs"]])
        tolerance = 2 * float(refs.std(ddof=1)) if len(refs) > 1 else 0.0
    change = float(np.abs(deltas).max())
    return CheckResult("label_noise_identity", change <= tolerance, f"|top1 change| {change:.4f} (<= {tolerance:.4f})")


def check_cross_sensor(report: dict, min_seeds: int = 3) -> CheckResult:
    runs = report["runs"]
    mean = {k: float(np.mean([r[k] for r in runs])) for k in
            ("adapter_ratio_top1", "baseline_ratio_top1", "adapter_ratio_rmse", "baseline_ratio_rmse")}
    ok = (len(runs) >= min_seeds and mean["adapter_ratio_top1"] < mean["baseline_ratio_top1"]
          and mean["adapter_ratio_rmse"] < mean["baseline_ratio_rmse"])
    detail = (f"degradation top1 adapter {mean['adapter_ratio_top1']:.3f} vs baseline {mean['baseline_ratio_top1']:.3f}; "
              f"rmse adapter {mean['adapter_ratio_rmse']:.3f} vs baseline {mean['baseline_ratio_rmse']:.3f} "
              f"({len(runs)} seeds)")
    return CheckResult("cross_sensor", ok, detail)


def check_data_efficiency(report: dict, min_gap: float = 0.15) -> CheckResult:
    tac, pro = report["curves"]["tactile"], report["curves"]["proprio"]
    gap = tac[-1]["success_rate"] - pro[-1]["success_rate"]
    ok = gap >= min_gap and tac[0]["success_rate"] >= pro[-1]["success_rate"]
    detail = (f"full budget tactile {tac[-1]['success_rate']:.3f} vs proprio {pro[-1]['success_rate']:.3f} "
              f"(gap >= {min_gap}); smallest-budget tactile {tac[0]['success_rate']:.3f} >= proprio full")
    return CheckResult("data_efficiency", ok, detail)
