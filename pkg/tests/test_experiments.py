import json

import numpy as np
import pytest

from tactforce import experiments as ex
from tactforce.errors import ConfigError, LeakageError
from tactforce.policy import GripEnv

TINY_ADAPTER = dict(n_codes_p=4, n_codes_w=4, code_dim_p=8, code_dim_w=8, force_hidden=16, embed_dim=16,
                    depth=1, heads=2, temporal_depth=1, temporal_heads=2, batch_size=16, n_steps=6, log_every=3)


@pytest.fixture
def tiny_config():
    return ex.merge_config(ex.DEFAULT_CONFIG, {
        "data": {"episodes": 8, "test_episodes": 4, "sensors": ["plain", "m7x7", "m7x9"], "duration": 1.0},
        "adapter": TINY_ADAPTER,
        "baseline": {"n_steps": 6, "batch_size": 16, "embed_dim": 16, "depth": 1, "heads": 2,
                     "temporal_depth": 1, "temporal_heads": 2, "log_every": 3},
        "eval": {"batch_size": 8},
        "policy": {"n_steps": 5, "hidden": 16, "demo_episodes": 4, "eval_episodes": 6},
    })


class TestConfig:
    def test_merge_is_deep_and_pure(self):
        cfg = ex.merge_config(ex.DEFAULT_CONFIG, {"adapter": {"n_steps": 7}})
        assert cfg["adapter"]["n_steps"] == 7 and cfg["adapter"]["window"] == 5
        assert ex.DEFAULT_CONFIG["adapter"]["n_steps"] == 5000

    def test_unknown_section(self):
        with pytest.raises(ConfigError):
            ex.merge_config(ex.DEFAULT_CONFIG, {"adaptor": {}})

    def test_snapshot_round_trip(self, tmp_path):
        path = ex.write_config_snapshot(tmp_path / "run", {"a": np.float64(1.5), "b": (1, 2)})
        assert json.loads(path.read_text()) == {"a": 1.5, "b": [1, 2]}

    def test_metrics_log_schema(self, tmp_path):
        log = ex.MetricsLog(tmp_path / "m.jsonl", run_id="abc")
        log.append({"x": np.float32(1.0)}, step=3)
        log.append({"y": 2}, episode=1)
        recs = ex.MetricsLog.read(tmp_path / "m.jsonl")
        assert [r["run_id"] for r in recs] == ["abc", "abc"]
        assert recs[0]["schema"] == ex.METRICS_SCHEMA_VERSION and recs[0]["step"] == 3
        assert recs[1]["episode"] == 1 and "wall_s" in recs[1]


class TestPairing:
    def test_mismatched_budgets(self):
        with pytest.raises(ConfigError, match="mismatched budgets"):
            ex.check_paired({"n_steps": 10, "window": 5}, {"n_steps": 20, "window": 5})

    def test_extra_difference(self):
        with pytest.raises(ConfigError):
            ex.check_paired({"n_steps": 10, "window": 5, "depth": 2}, {"n_steps": 10, "window": 1, "depth": 3},
                            allowed=["window"])

    def test_allowed_difference(self):
        ex.check_paired({"n_steps": 10, "window": 5}, {"n_steps": 10, "window": 1}, allowed=["window"])

    @pytest.mark.parametrize("variant,override", [("no_history", {"window": 1}),
                                                  ("small_codebook", {"n_codes_p": 4, "n_codes_w": 4}),
                                                  ("shared_codebook", {"shared_codebook": True}),
                                                  ("label_noise", {})])
    def test_variant_overrides(self, variant, override):
        assert ex.AblationSpec(variant).overrides() == override

    def test_bad_variant(self):
        with pytest.raises(ConfigError):
            ex.AblationSpec("no_codebook")
        with pytest.raises(ConfigError):
            ex.AblationSpec("label_noise", sigma_frac=-0.1)


def test_leakage_detected(small_dataset):
    with pytest.raises(LeakageError):
        ex.check_no_leakage(small_dataset, "m7x7")
    ex.check_no_leakage(small_dataset, "m7x9")


def test_cross_sensor_rejects_leaky_training_set(tiny_config):
    with pytest.raises(LeakageError):
        ex.run_cross_sensor(["plain", "m7x9"], "m7x9", tiny_config, seeds=[0])


def test_windows_from_aligns_final_frames(small_dataset):
    for window in (1, 5):
        wb = ex._windows_from(small_dataset[:1], window, 2, 4)
        ends = wb.start + window - 1
        assert ends[0] == 4 and (np.diff(ends) == 2).all()


def test_ablation_pairs(tiny_config):
    report = ex.run_ablation(ex.AblationSpec("no_history"), tiny_config, seeds=[0])
    pair = report["pairs"][0]
    assert pair["reference"]["top1"] >= 0 and pair["viscous_floor"] > 0
    assert set(pair["delta"]) == {"top1", "top5", "probe_rmse", "recon_error"}
    res = ex.check_no_history(report)
    assert res.line().startswith(("[PASS]", "[FAIL]"))


def test_label_noise_zero_is_identity(tiny_config):
    data = {0: ex.make_datasets(tiny_config, 0)}
    report = ex.run_ablation(ex.AblationSpec("label_noise", sigma_frac=0.0), tiny_config, seeds=[0], data=data)
    assert report["pairs"][0]["delta"]["top1"] == 0.0
    assert ex.check_label_noise(report).passed


def test_cross_sensor_report(tiny_config):
    report = ex.run_cross_sensor(["plain", "m7x7"], "m7x9", tiny_config, seeds=[0])
    run = report["runs"][0]
    for key in ("adapter_ratio_top1", "baseline_ratio_top1", "adapter_ratio_rmse", "baseline_ratio_rmse"):
        assert np.isfinite(run[key]) and run[key] > 0
    assert not ex.check_cross_sensor(report).passed  # fewer than three seeds
    figs = ex.report_series(report)
    assert {"cross_sensor_seed0_adapter_seen_loss", "cross_sensor_seed0_baseline_unseen_loss"} <= set(figs)


class TestDataEfficiency:
    def test_rejects_bad_budgets(self, tiny_config):
        for budgets in ([0, 4], [4, 2], []):
            with pytest.raises(ConfigError):
                ex.run_data_efficiency(budgets, tiny_config, adapter=None)

    def test_curves(self, tiny_config, small_dataset):
        adapter = ex.train_adapter(tiny_config, small_dataset, 0)
        report = ex.run_data_efficiency([2, 4], tiny_config, adapter, seed=0)
        assert [e["budget"] for e in report["curves"]["tactile"]] == [2, 4]
        assert all(0 <= e["success_rate"] <= 1 for c in report["curves"].values() for e in c)
        assert isinstance(ex.grip_env(adapter), GripEnv)


class TestChecks:
    def test_alignment_thresholds(self):
        assert ex.check_alignment({"top1": 0.5, "perplexity": {"p": 4.0, "w": 9.0}}).passed
        assert not ex.check_alignment({"top1": 0.49, "perplexity": {"p": 8.0, "w": 9.0}}).passed
        assert not ex.check_alignment({"top1": 0.9, "perplexity": {"p": 3.9, "w": 9.0}}).passed

    def test_shared_codebook_needs_three_seeds(self):
        pairs = [{"delta": {"recon_error": 0.1}}] * 2
        assert not ex.check_shared_codebook({"pairs": pairs}).passed
        assert ex.check_shared_codebook({"pairs": pairs * 2}).passed

    def test_data_efficiency_rule(self):
        curve = lambda *r: [{"budget": b, "success_rate": s} for b, s in zip((100, 200), r)]
        assert ex.check_data_efficiency({"curves": {"tactile": curve(0.6, 0.8), "proprio": curve(0.4, 0.5)}}).passed
        assert not ex.check_data_efficiency({"curves": {"tactile": curve(0.4, 0.8),
                                                        "proprio": curve(0.4, 0.5)}}).passed


class TestPlots:
    def test_empty_reports_write_nothing(self, tmp_path):
        assert ex.emit_plots([], tmp_path / "plots") == []
        assert not (tmp_path / "plots").exists()

    def test_single_series(self, tmp_path):
        paths = ex.emit_plots([{"name": "demo", "series": {"a": ([1, 2], [3, 4])}}], tmp_path)
        assert [p.name for p in paths] == ["demo.png"] and paths[0].stat().st_size > 0

    def test_deterministic_bytes(self, tmp_path):
        report = {"kind": "data_efficiency", "curves": {"tactile": [{"budget": 1, "success_rate": 0.5}],
                                                        "proprio": [{"budget": 1, "success_rate": 0.2}]}}
        a = ex.emit_plots([report], tmp_path / "a")[0].read_bytes()
        b = ex.emit_plots([report], tmp_path / "b")[0].read_bytes()
        assert a == b
