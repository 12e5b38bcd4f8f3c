"""Epoch loop around :func:`train_step`: per-epoch checkpoints, a JSON-lines log, and exact resume.

Output directory layout::

    config.json                 effective configuration
    train.log                   one JSON object per step
    ckpt_epoch001.san ...       parameters after each epoch
    opt_epoch001.sanos ...      optimizer state after each epoch
    train.lock                  present while a run owns the directory

Resuming picks the newest epoch that has both files, truncates the log to
that epoch's last step and continues.  Because every random draw is keyed by
(master_seed, step) or (shuffle seed, epoch) and parameters are stored at the
precision they are trained in, a resumed run ends bitwise equal to an
uninterrupted one.
"""

from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import make_rng
from .checkpoint import (load_checkpoint, load_optimizer_state, save_checkpoint, save_optimizer_state,
                         to_f32)
from .config import RunConfig
from .data import FeatureSequence, batch_iter, read_dataset
from .errors import ConfigError, FormatError
from .model import init_params, param_shapes
from .siamese import AdamState, StepStats, lr_schedule, train_step
from .vocab import read_vocab

LOG_NAME = "train.log"
LOCK_NAME = "train.lock"
CONFIG_NAME = "config.json"
_EPOCH_RE = re.compile(r"ckpt_epoch(\d+)\.san$")


def checkpoint_path(out_dir: Path, epoch: int) -> Path:
    return Path(out_dir) / f"ckpt_epoch{epoch:03d}.san"


def optimizer_path(out_dir: Path, epoch: int) -> Path:
    return Path(out_dir) / f"opt_epoch{epoch:03d}.sanos"


def epoch_checkpoints(out_dir: str | Path) -> list[Path]:
    """Epoch checkpoints in ``out_dir`` ordered by epoch."""
    found = []
    for p in Path(out_dir).iterdir():
        m = _EPOCH_RE.fullmatch(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return [p for _, p in sorted(found)]


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    step: int
    epochs_done: int
    stats: StepStats = field(default_factory=StepStats)
    interrupted: bool = False


class RunLock:
    """Exclusive ownership of an output directory.

    A lock left behind by a process that no longer exists is taken over.
    """

    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / LOCK_NAME
        self.held = False

    def __enter__(self):
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                if not self._stale():
                    raise OSError(f"{self.path}: another training run owns this directory") from None
                self.path.unlink(missing_ok=True)
                continue
            with os.fdopen(fd, "w") as fh:
                fh.write(str(os.getpid()))
            self.held = True
            return self
        raise OSError(f"{self.path}: could not acquire lock")

    def _stale(self) -> bool:
        try:
            pid = int(self.path.read_text().strip())
        except (OSError, ValueError):
            return True
        if pid == os.getpid():
            return False
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            return True
        except PermissionError:
            return False
        return False

    def __exit__(self, *exc):
        if self.held:
            self.path.unlink(missing_ok=True)
            self.held = False


def load_training_data(data_dir: str | Path, run: RunConfig) -> list[FeatureSequence]:
    data_dir = Path(data_dir)
    vocab_file = data_dir / "vocab.txt"
    if vocab_file.exists():
        n_vocab = len(read_vocab(vocab_file))
        if n_vocab != run.model.vocab_size:
            raise ConfigError(f"model.vocab_size is {run.model.vocab_size} but {vocab_file} lists {n_vocab} symbols")
    utts = read_dataset(data_dir / "train.bin", run.model.vocab_size, run.model.feature_dim)
    if not utts:
        raise ConfigError(f"{data_dir / 'train.bin'} holds no utterances")
    return utts


def initial_state(run: RunConfig) -> tuple[dict[str, np.ndarray], int]:
    """Initial parameters (rounded to storage precision) and the batch-shuffle seed."""
    root = make_rng([run.train.master_seed, 0])
    shuffle_seed = int(root.integers(2 ** 63))
    params = {k: to_f32(v) for k, v in init_params(run.model, root).items()}
    return params, shuffle_seed


def _check_params(params: dict[str, np.ndarray], run: RunConfig, path: Path) -> None:
    shapes = param_shapes(run.model)
    if set(params) != set(shapes):
        odd = sorted(set(params) ^ set(shapes))[0]
        raise FormatError(f"{path}: parameter {odd} does not match the model configuration")
    for name, shape in shapes.items():
        if params[name].shape != tuple(shape):
            raise FormatError(f"{path}: parameter {name} has shape {params[name].shape}, expected {tuple(shape)}")
        if not np.all(np.isfinite(params[name])):
            raise FormatError(f"{path}: parameter {name} holds non-finite values")


def _same_run(saved: dict, current: dict) -> bool:
    """Configs agree apart from the epoch budget, which a resume may extend."""
    a = json.loads(json.dumps(saved))
    b = json.loads(json.dumps(current))
    a.get("train", {}).pop("epochs", None)
    b.get("train", {}).pop("epochs", None)
    return a == b


def _truncate_log(log_path: Path, last_step: int) -> None:
    if not log_path.exists():
        if last_step:
            raise FormatError(f"{log_path}: missing while resuming from step {last_step}")
        return
    lines = log_path.read_text(encoding="utf-8").splitlines()
    kept = []
    for lineno, line in enumerate(lines, 1):
        try:
            step = int(json.loads(line)["step"])
        except (ValueError, KeyError, TypeError):
            # a torn final line from a killed run is expected; anything else is not
            if lineno == len(lines):
                break
            raise FormatError(f"{log_path}: line {lineno} is not a log record") from None
        if step > last_step:
            break
        kept.append(line)
    if len(kept) != last_step:
        raise FormatError(f"{log_path}: holds {len(kept)} steps but the optimizer state is at step {last_step}")
    log_path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")


def _log_record(step: int, epoch: int, lr: float, losses, status: str, seconds: float | None) -> str:
    rec = {"step": step, "epoch": epoch, "lr": lr, "status": status}
    for key in ("l_ctc", "l_attn", "l_kl", "l_all"):
        rec[key] = None if losses is None else getattr(losses, key)
    if seconds is not None:
        rec["seconds"] = round(seconds, 6)
    return json.dumps(rec)


def train(run: RunConfig, data_dir: str | Path, out_dir: str | Path, resume: bool = False,
          timing: bool = True, max_steps: int | None = None,
          train_data: list[FeatureSequence] | None = None) -> TrainResult:
    """Train for ``run.train.epochs`` epochs, writing checkpoints and the log into ``out_dir``.

    ``max_steps`` stops after that global step without writing anything
    further, which is how tests simulate an interrupted run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    utts = train_data if train_data is not None else load_training_data(data_dir, run)
    tcfg, mcfg = run.train, run.model
    with RunLock(out_dir):
        params, shuffle_seed = initial_state(run)
        opt = AdamState.zeros(params)
        start_epoch = 1
        config_file = out_dir / CONFIG_NAME
        log_path = out_dir / LOG_NAME
        if resume:
            if config_file.exists():
                try:
                    saved = json.loads(config_file.read_text(encoding="utf-8"))
                except json.JSONDecodeError:
                    raise FormatError(f"{config_file}: not valid JSON") from None
                if not _same_run(saved, run.to_dict()):
                    raise ConfigError(f"{config_file}: configuration differs from the run being resumed")
            done = [p for p in epoch_checkpoints(out_dir)
                    if optimizer_path(out_dir, int(_EPOCH_RE.fullmatch(p.name).group(1))).exists()]
            if done:
                last = int(_EPOCH_RE.fullmatch(done[-1].name).group(1))
                params = load_checkpoint(done[-1])
                _check_params(params, run, done[-1])
                step, m, v = load_optimizer_state(optimizer_path(out_dir, last))
                _check_params(m, run, optimizer_path(out_dir, last))
                _check_params(v, run, optimizer_path(out_dir, last))
                opt = AdamState(step, m, v)
                start_epoch = last + 1
            _truncate_log(log_path, opt.step)
        else:
            log_path.write_text("", encoding="utf-8")
        run.dump(config_file)

        stats = StepStats()
        step = opt.step
        with log_path.open("a", encoding="utf-8") as log:
            for epoch in range(start_epoch, tcfg.epochs + 1):
                for batch in batch_iter(utts, tcfg.batch_size, shuffle_seed, epoch - 1):
                    if max_steps is not None and step >= max_steps:
                        return TrainResult(params, step, epoch - 1, stats, interrupted=True)
                    step += 1
                    t0 = time.perf_counter()
                    before = (stats.skipped_utterances, stats.rejected_steps)
                    params, opt, losses = train_step(batch, params, opt, mcfg, tcfg, step, stats)
                    if losses is not None:
                        status = "ok"
                    elif stats.rejected_steps > before[1]:
                        status = "rejected"
                    else:
                        status = "skipped"
                    # a step that changes nothing still advances the optimizer clock
                    opt.step = step
                    seconds = time.perf_counter() - t0 if timing else None
                    log.write(_log_record(step, epoch, lr_schedule(step, tcfg), losses, status, seconds) + "\n")
                    log.flush()
                save_checkpoint(checkpoint_path(out_dir, epoch), params)
                save_optimizer_state(optimizer_path(out_dir, epoch), opt.step, opt.m, opt.v)
        return TrainResult(params, step, tcfg.epochs, stats)
