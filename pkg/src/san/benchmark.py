"""Baseline-versus-siamese benchmark on the synthetic corpus.

One corpus is generated from the run config; every (seed, arm) pair then
trains in its own process with a single BLAS thread, is decoded on the test
set, and has its last checkpoints averaged and scored on the dev set.
Finished arms leave a ``result.json`` behind, so an interrupted benchmark can
be restarted without redoing them.
"""

from __future__ import annotations

import dataclasses
import heapq
import json
import multiprocessing
import time
from dataclasses import dataclass
from pathlib import Path

from threadpoolctl import threadpool_limits

from .checkpoint import average_checkpoints, load_checkpoint
from .config import RunConfig
from .data import generate_dataset, read_dataset, write_dataset
from .evaluation import evaluate
from .training import epoch_checkpoints, train
from .vocab import token_names, write_vocab

ARMS = {"baseline": 0.0, "san": 2.0}
MODE = "attention_rescore"


@dataclass
class ArmResult:
    arm: str
    seed: int
    test_err: float
    dev_err_final: float
    dev_err_averaged: float
    seconds: float

    @classmethod
    def load(cls, path: Path) -> "ArmResult":
        return cls(**json.loads(path.read_text()))


def prepare_data(run: RunConfig, root: Path) -> Path:
    data = root / "data"
    if not (data / "test.bin").exists():
        data.mkdir(parents=True, exist_ok=True)
        for name, utts in generate_dataset(run.synth).items():
            write_dataset(utts, data / f"{name}.bin")
        write_vocab(data / "vocab.txt", token_names(run.synth.n_tokens))
    return data


def arm_config(run: RunConfig, arm: str, seed: int) -> RunConfig:
    train_cfg = dataclasses.replace(run.train, lambda3=ARMS[arm], master_seed=seed)
    return dataclasses.replace(run, train=train_cfg)


def run_arm(run: RunConfig, root: Path, arm: str, seed: int, beam: int = 4, k: int = 4) -> ArmResult:
    out = root / f"{arm}_seed{seed}"
    done = out / "result.json"
    if done.exists():
        return ArmResult.load(done)
    cfg = arm_config(run, arm, seed)
    data = root / "data"
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        result = train(cfg, data, out, timing=False)
        dev = read_dataset(data / "dev.bin", cfg.model.vocab_size, cfg.model.feature_dim)
        test = read_dataset(data / "test.bin", cfg.model.vocab_size, cfg.model.feature_dim)
        test_err = evaluate(result.params, cfg.model, test, modes=(MODE,), beam=beam, k=k).modes[MODE].err
        ckpts = epoch_checkpoints(out)
        dev_final = evaluate(load_checkpoint(ckpts[-1]), cfg.model, dev, modes=(MODE,), beam=beam, k=k).modes[MODE].err
        averaged = average_checkpoints(ckpts[-cfg.train.average_last_n:])
        dev_avg = evaluate(averaged, cfg.model, dev, modes=(MODE,), beam=beam, k=k).modes[MODE].err
    res = ArmResult(arm, seed, test_err, dev_final, dev_avg, time.perf_counter() - t0)
    done.write_text(json.dumps(dataclasses.asdict(res), indent=2))
    return res


def _run_arm_job(job):
    return run_arm(*job)


def lpt_makespan(durations: list[float], workers: int) -> float:
    """Makespan of longest-processing-time-first scheduling on ``workers`` machines."""
    loads = [0.0] * workers
    for d in sorted(durations, reverse=True):
        heapq.heapreplace(loads, loads[0] + d)
    return max(loads)


@dataclass
class BenchmarkSummary:
    results: list[ArmResult]
    wall_seconds: float

    def by_arm(self, arm: str) -> dict[int, ArmResult]:
        return {r.seed: r for r in self.results if r.arm == arm}

    def mean_test_err(self, arm: str) -> float:
        errs = [r.test_err for r in self.by_arm(arm).values()]
        return sum(errs) / len(errs)

    def san_wins(self) -> int:
        base, san = self.by_arm("baseline"), self.by_arm("san")
        return sum(san[s].test_err < base[s].test_err for s in san)

    def projected_seconds(self, workers: int = 4) -> float:
        return lpt_makespan([r.seconds for r in self.results], workers)

    def as_dict(self) -> dict:
        return {"results": [dataclasses.asdict(r) for r in self.results], "wall_seconds": self.wall_seconds,
                "mean_test_err": {a: self.mean_test_err(a) for a in ARMS}, "san_wins": self.san_wins(),
                "projected_seconds_4_workers": self.projected_seconds(4)}


def run_benchmark(run: RunConfig, root: str | Path, seeds=(1, 2, 3, 4, 5), workers: int | None = None) -> BenchmarkSummary:
    root = Path(root)
    t0 = time.perf_counter()
    prepare_data(run, root)
    jobs = [(run, root, arm, seed) for seed in seeds for arm in ARMS]
    workers = workers or min(len(jobs), multiprocessing.cpu_count())
    if workers == 1:
        results = [_run_arm_job(job) for job in jobs]
    else:
        with multiprocessing.get_context("spawn").Pool(workers) as pool:
            results = pool.map(_run_arm_job, jobs, chunksize=1)
    summary = BenchmarkSummary(results, time.perf_counter() - t0)
    (root / "summary.json").write_text(json.dumps(summary.as_dict(), indent=2))
    return summary
