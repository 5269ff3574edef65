import pytest

from lattice.errors import ConfigError
from lattice.verify import (CheckResult, SUITES, run_suites,
                            suite_backward, suite_baseline_consistency,
                            suite_beta_chunk, suite_chunk_equivalence,
                            suite_delta_rule, suite_gradients,
                            suite_normalization, suite_norms,
                            suite_orthogonality)


def test_check_result_pass_semantics():
    assert CheckResult("s", "n", 0.5, 1.0).passed
    assert CheckResult("s", "n", 1.0, 1.0).passed  # threshold is inclusive
    assert not CheckResult("s", "n", 1.1, 1.0).passed


def test_orthogonality_suite_small():
    rows = suite_orthogonality(n_draws=50)
    assert rows and all(r.passed for r in rows)


def test_norms_suite_small():
    rows = suite_norms(steps=300)
    assert rows and all(r.passed for r in rows)


def test_gradients_suite_small():
    rows = suite_gradients(n_instances=10)
    assert rows and all(r.passed for r in rows)


def test_chunk_equivalence_suite_small():
    rows = suite_chunk_equivalence(n_seqs=5, T=16)
    assert rows and all(r.passed for r in rows)


def test_beta_chunk_suite_small():
    rows = suite_beta_chunk(n_chunks=10)
    assert rows and all(r.passed for r in rows)


def test_delta_rule_suite_small():
    rows = suite_delta_rule(n_steps=10)
    assert rows and all(r.passed for r in rows)


def test_baseline_consistency_suite_small():
    rows = suite_baseline_consistency(n_instances=3)
    names = {r.name for r in rows}
    # every recurrence row appears with both a decay and a gradient check
    for kind in ("la", "mamba2", "gla", "deltanet", "gated-deltanet", "rwkv7",
                 "ttt"):
        assert any(kind in n for n in names)
    assert all(r.passed for r in rows)


def test_backward_suite_covers_scan_variants():
    rows = suite_backward()
    names = {r.name for r in rows}
    assert any("chunk-full" in n for n in names)
    assert any("chunk-rank1" in n for n in names)
    assert all(r.passed for r in rows)


def test_normalization_suite_margin():
    rows = suite_normalization(n_seqs=4)
    assert len(rows) == 1
    assert rows[0].value <= 0.0  # per-token tracks the oracle at least as well
    assert rows[0].passed


def test_run_suites_filter():
    rows = run_suites("delta-rule")
    assert rows and all(r.suite == "delta-rule" for r in rows)
    with pytest.raises(ConfigError):
        run_suites("not-a-suite")


def test_suite_registry_is_complete():
    assert set(SUITES) == {
        "orthogonality", "norms", "gradients", "chunk-equivalence",
        "beta-chunk", "delta-rule", "baseline-consistency", "backward",
        "normalization"}
