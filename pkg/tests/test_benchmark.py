import json

import pytest

from san.benchmark import ArmResult, BenchmarkSummary, lpt_makespan, run_benchmark
from san.config import RunConfig


def test_lpt_makespan():
    assert lpt_makespan([5, 4, 3, 3, 3], 2) == 10
    assert lpt_makespan([7], 4) == 7
    assert lpt_makespan([1, 1, 1, 1], 4) == 1
    assert lpt_makespan([], 3) == 0


def test_summary_counts_wins():
    rows = [ArmResult("baseline", 1, 0.30, 0, 0, 1), ArmResult("san", 1, 0.28, 0, 0, 1),
            ArmResult("baseline", 2, 0.30, 0, 0, 1), ArmResult("san", 2, 0.31, 0, 0, 1)]
    s = BenchmarkSummary(rows, 2.0)
    assert s.san_wins() == 1
    assert s.mean_test_err("san") == pytest.approx(0.295)


def test_tiny_benchmark_end_to_end_and_reuse(tmp_path):
    run = RunConfig.from_dict({
        "model": {"model_dim": 8, "encoder_layers": 1},
        "train": {"epochs": 2, "batch_size": 4, "warmup_steps": 2, "average_last_n": 2},
        "synth": {"n_tokens": 4, "feature_dim": 8, "n_train": 8, "n_dev": 3, "n_test": 3,
                  "confusable_pairs": [[0, 1, 0.25]]}})
    summary = run_benchmark(run, tmp_path, seeds=(1,), workers=1)
    assert {(r.arm, r.seed) for r in summary.results} == {("baseline", 1), ("san", 1)}
    assert all(0 <= r.test_err and r.seconds > 0 for r in summary.results)
    saved = json.loads((tmp_path / "summary.json").read_text())
    assert saved["san_wins"] == summary.san_wins()
    # finished arms are read back instead of retrained
    again = run_benchmark(run, tmp_path, seeds=(1,), workers=1)
    assert again.results == summary.results
