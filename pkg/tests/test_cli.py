import json

import pytest
import yaml

from tactforce.cli import EXIT_CONFIG, EXIT_OK, EXIT_THRESHOLD, load_config, main

TINY = {
    "data": {"episodes": 8, "test_episodes": 3, "sensors": ["plain", "m7x7"], "duration": 1.0},
    "adapter": {"n_codes_p": 4, "n_codes_w": 4, "code_dim_p": 8, "code_dim_w": 8, "force_hidden": 16,
                "embed_dim": 16, "depth": 1, "heads": 2, "temporal_depth": 1, "temporal_heads": 2,
                "batch_size": 16, "n_steps": 4, "log_every": 2},
    "baseline": {"n_steps": 4, "batch_size": 16, "embed_dim": 16, "depth": 1, "heads": 2,
                 "temporal_depth": 1, "temporal_heads": 2, "log_every": 2},
    "eval": {"batch_size": 8},
    "policy": {"n_steps": 4, "hidden": 16, "demo_episodes": 3, "eval_episodes": 5},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return str(path)


def test_load_config_formats(tmp_path):
    (tmp_path / "a.json").write_text(json.dumps({"seed": 3}))
    (tmp_path / "b.yaml").write_text("seed: 4\n")
    (tmp_path / "c.yaml").write_text("")
    assert load_config(str(tmp_path / "a.json")) == {"seed": 3}
    assert load_config(str(tmp_path / "b.yaml")) == {"seed": 4}
    assert load_config(str(tmp_path / "c.yaml")) == {}


def test_unknown_config_key_exits_1(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("trainer: {}\n")
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_missing_config_file_exits_1(tmp_path):
    assert main(["gen", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_bad_arguments_exit_1():
    with pytest.raises(SystemExit) as err:
        main(["ablate", "--variant", "bogus"])
    assert err.value.code == EXIT_CONFIG


def test_missing_checkpoint_exits_1(tmp_path, config_file):
    assert main(["eval-adapter", "--config", config_file, "--checkpoint", str(tmp_path / "none.pt"),
                 "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_wrong_checkpoint_kind_exits_1(tmp_path, config_file):
    gen = tmp_path / "gen"
    assert main(["gen", "--config", config_file, "--out", str(gen)]) == EXIT_OK
    base = tmp_path / "base"
    assert main(["train-baseline", "--config", config_file, "--data", str(gen / "dataset"),
                 "--out", str(base)]) == EXIT_OK
    assert main(["eval-adapter", "--config", config_file, "--checkpoint", str(base / "baseline.pt"),
                 "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_end_to_end_pipeline(tmp_path, config_file, capsys):
    gen, ad, pol, ev, plots = (tmp_path / n for n in ("gen", "adapter", "policy", "eval", "plots"))
    assert main(["gen", "--config", config_file, "--seed", "1", "--out", str(gen)]) == EXIT_OK
    assert (gen / "dataset" / "manifest.json").exists()
    assert main(["train-adapter", "--config", config_file, "--data", str(gen / "dataset"), "--out", str(ad)]) == EXIT_OK
    snapshot = json.loads((ad / "config.json").read_text())
    assert snapshot["command"] == "train-adapter" and snapshot["adapter"]["n_steps"] == 4
    assert (ad / "metrics.jsonl").exists() and (ad / "adapter.pt").exists()
    # a 4-step adapter cannot meet the alignment threshold
    assert main(["eval-adapter", "--config", config_file, "--data", str(gen / "dataset"),
                 "--checkpoint", str(ad / "adapter.pt"), "--check", "--out", str(tmp_path / "chk")]) == EXIT_THRESHOLD
    assert "[FAIL] alignment" in capsys.readouterr().out
    assert main(["train-policy", "--config", config_file, "--adapter", str(ad / "adapter.pt"), "--out", str(pol)]) == EXIT_OK
    assert main(["eval-policy", "--config", config_file, "--adapter", str(ad / "adapter.pt"), "--policy",
                 str(pol / "policy_tactile.pt"), str(pol / "policy_proprio.pt"), "--out", str(ev)]) == EXIT_OK
    results = json.loads((ev / "report.json").read_text())["results"]
    assert set(results) == {"tactile", "proprio"}
    assert len((ev / "episodes.jsonl").read_text().splitlines()) == 10
    assert main(["plots", "--reports", str(ad / "report.json"), "--out", str(plots)]) == EXIT_OK
    assert any(plots.glob("*.png"))


def test_data_efficiency_zero_budget_exits_1(tmp_path, config_file):
    ad = tmp_path / "adapter"
    assert main(["train-adapter", "--config", config_file, "--out", str(ad)]) == EXIT_OK
    assert main(["data-efficiency", "--config", config_file, "--adapter", str(ad / "adapter.pt"),
                 "--budgets", "0,2", "--out", str(tmp_path / "de")]) == EXIT_CONFIG


def test_plots_without_reports(tmp_path):
    out = tmp_path / "p"
    assert main(["plots", "--out", str(out)]) == EXIT_OK
    assert not list(out.glob("*.png"))
