import json
import os

import numpy as np
import pytest

from lattice.cli import RunConfig, load_run_config, main
from lattice.errors import ConfigError

TINY = {
    "version": 1, "vocab_size": 16, "seq_len": 16, "num_kv_pairs": 2,
    "num_samples": 12, "d_model": 8, "n_blocks": 1, "n_heads": 1,
    "m": 4, "d_head": 4, "epochs": 1, "batch_size": 4, "warmup_steps": 2,
}


def write_cfg(tmp_path, **extra):
    data = dict(TINY)
    data.update(extra)
    for key in ("dataset_path", "checkpoint_path", "metrics_path", "out_path"):
        data.setdefault(key, str(tmp_path / key))
    path = tmp_path / "run.json"
    path.write_text(json.dumps(data))
    return str(path)


# -- configuration loading ----------------------------------------------------


def test_defaults_without_file():
    cfg = load_run_config(None, [])
    assert cfg == RunConfig()


def test_file_values_override_defaults(tmp_path):
    cfg = load_run_config(write_cfg(tmp_path), [])
    assert cfg.vocab_size == 16 and cfg.epochs == 1


def test_set_flags_override_file(tmp_path):
    cfg = load_run_config(write_cfg(tmp_path), ["vocab_size=64", "base_lr=0.01"])
    assert cfg.vocab_size == 64
    assert cfg.base_lr == pytest.approx(0.01)
    assert cfg.seq_len == 16  # untouched file value survives


def test_env_seed_fills_gap_but_loses_to_file(tmp_path, monkeypatch):
    monkeypatch.setenv("LATTICE_SEED", "7")
    assert load_run_config(None, []).seed == 7
    assert load_run_config(write_cfg(tmp_path, seed=3), []).seed == 3
    assert load_run_config(None, ["seed=9"]).seed == 9


def test_config_rejections(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(write_cfg(tmp_path, bogus_key=1), [])
    no_version = tmp_path / "nv.json"
    no_version.write_text(json.dumps({"seed": 1}))
    with pytest.raises(ConfigError):
        load_run_config(str(no_version), [])
    bad_json = tmp_path / "bad.json"
    bad_json.write_text("{not json")
    with pytest.raises(ConfigError):
        load_run_config(str(bad_json), [])
    with pytest.raises(ConfigError):
        load_run_config(None, ["no_equals_sign"])
    with pytest.raises(ConfigError):
        load_run_config(None, ["unknown_key=1"])
    with pytest.raises(ConfigError):
        load_run_config(None, ["epochs=abc"])
    with pytest.raises(ConfigError):
        RunConfig(version=2)
    with pytest.raises(ConfigError):
        RunConfig(kind="nope")


# -- exit codes ---------------------------------------------------------------


def test_exit_code_2_on_config_error(tmp_path, capsys):
    assert main(["mqar", "gen", "--set", "kind=bogus"]) == 2
    assert "config error" in capsys.readouterr().err


def test_exit_code_3_on_missing_dataset(tmp_path, capsys):
    cfg = write_cfg(tmp_path, dataset_path=str(tmp_path / "absent.bin"))
    assert main(["mqar", "eval", "--config", cfg]) == 3
    assert "i/o error" in capsys.readouterr().err


# -- verify -------------------------------------------------------------------


def test_verify_filtered_suite_passes(capsys):
    assert main(["verify", "--filter", "delta-rule"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out


def test_verify_unknown_filter_is_config_error(capsys):
    assert main(["verify", "--filter", "no-such-suite"]) == 2


# -- gen / train / eval pipeline ----------------------------------------------


def test_full_pipeline(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    paths = json.loads(open(cfg).read())

    assert main(["mqar", "gen", "--config", cfg]) == 0
    assert os.path.exists(paths["dataset_path"])

    assert main(["mqar", "train", "--config", cfg]) == 0
    assert os.path.exists(paths["checkpoint_path"])
    with open(paths["metrics_path"]) as f:
        header = f.readline().strip().split(",")
        rows = f.readlines()
    assert header == ["step", "lr", "loss", "grad_norm", "tokens_per_sec"]
    assert len(rows) == 3  # 12 samples / batch 4, 1 epoch
    capsys.readouterr()

    assert main(["mqar", "eval", "--config", cfg]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert set(printed) >= {"model", "accuracy", "config"}
    assert 0.0 <= printed["accuracy"] <= 1.0
    written = json.loads(open(paths["out_path"]).read())
    assert written == printed


def test_eval_rejects_mismatched_dataset(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["mqar", "gen", "--config", cfg]) == 0
    assert main(["mqar", "eval", "--config", cfg, "--set", "seq_len=32"]) == 2


# -- trace ---------------------------------------------------------------------


def test_trace_writes_json_lines(tmp_path, capsys):
    out = str(tmp_path / "trace.jsonl")
    assert main(["trace", "--out", out, "--set", "seq_len=8",
                 "--set", "m=4", "--set", "d_head=6"]) == 0
    lines = [json.loads(l) for l in open(out) if l.strip()]
    assert len(lines) == 8
    for i, row in enumerate(lines):
        assert row["step"] == i
        assert row["orthogonality"] < 1e-10
        assert abs(row["slot_norm_min"] - 1.0) < 1e-9
        assert 0.0 < row["beta_min"] <= row["beta_max"] <= 1.5
        assert np.isfinite(row["loss"])


def test_trace_rejects_chunked_scan(tmp_path, capsys):
    out = str(tmp_path / "t.jsonl")
    assert main(["trace", "--out", out, "--set", "scan_kind=chunk-full"]) == 2
    assert main(["trace", "--out", out, "--set", "kind=la"]) == 2


# -- bench ----------------------------------------------------------------------


def test_bench_emits_csv(tmp_path, capsys):
    out = str(tmp_path / "bench.csv")
    assert main(["bench", "--grid", "T=16;d=4;m=4;C=4,8", "--out", out]) == 0
    lines = open(out).read().strip().splitlines()
    assert lines[0].split(",") == ["scan", "T", "d", "m", "C", "tokens_per_sec"]
    body = [l.split(",") for l in lines[1:]]
    assert {row[0] for row in body} == {"sequential", "chunk-full", "chunk-rank1"}
    assert len(body) == 5  # sequential + two kernels x two chunk sizes
    assert all(float(row[-1]) > 0 for row in body)


def test_bench_rejects_bad_grid(capsys):
    assert main(["bench", "--grid", "Z=4"]) == 2
    assert main(["bench", "--grid", "T"]) == 2
