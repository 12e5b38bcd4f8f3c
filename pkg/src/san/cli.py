"""Command-line entry point: ``san {datagen,train,eval,gradcheck,avg}``.

Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
3 I/O error or corrupt input.  ``SAN_THREADS`` caps the BLAS thread pool
(default 1, which keeps every command bitwise reproducible).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .checkpoint import average_checkpoints, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import FeatureSequence, generate_dataset, make_batch, read_dataset, write_dataset
from .errors import ConfigError, FormatError
from .evaluation import MODES, evaluate
from .model import ModelConfig, init_params, to_tensors
from .siamese import siamese_objective
from .training import CONFIG_NAME, train
from .vocab import VocabError, read_vocab, token_names, write_vocab

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    return RunConfig.load(path)


def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


# ---- datagen -------------------------------------------------------------------

def cmd_datagen(args) -> int:
    run = _load_config(args.config)
    synth = run.synth if args.seed is None else dataclasses.replace(run.synth, seed=args.seed)
    run = dataclasses.replace(run, synth=synth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = generate_dataset(synth)
    for name, utts in splits.items():
        write_dataset(utts, out / f"{name}.bin")
    write_vocab(out / "vocab.txt", token_names(synth.n_tokens))
    run.dump(out / CONFIG_NAME)
    print(json.dumps({name: len(utts) for name, utts in splits.items()}))
    return EXIT_OK


# ---- train ---------------------------------------------------------------------

def cmd_train(args) -> int:
    run = _load_config(args.config)
    _require_file(Path(args.data_dir) / "train.bin", "training data")
    result = train(run, args.data_dir, args.out_dir, resume=args.resume, timing=not args.no_timing,
                   max_steps=args.max_steps)
    print(json.dumps({"steps": result.step, "epochs": result.epochs_done,
                      "skipped_utterances": result.stats.skipped_utterances,
                      "rejected_steps": result.stats.rejected_steps,
                      "interrupted": result.interrupted}))
    return EXIT_OK


# ---- eval ----------------------------------------------------------------------

def _parse_modes(text: str) -> tuple[str, ...]:
    modes = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in modes if m not in MODES]
    if bad or not modes:
        raise UsageError(f"unknown decode mode(s) {bad or [text]}; choose from {', '.join(MODES)}")
    return modes


def _model_config_for(checkpoint: Path, config: str | None) -> ModelConfig:
    if config is not None:
        return _load_config(config).model
    beside = checkpoint.parent / CONFIG_NAME
    if not beside.is_file():
        raise UsageError(f"no --config given and no {CONFIG_NAME} next to {checkpoint}")
    return RunConfig.load(beside).model


def cmd_eval(args) -> int:
    ckpt = _require_file(Path(args.checkpoint), "checkpoint")
    data = _require_file(Path(args.data), "dataset")
    modes = _parse_modes(args.modes)
    if args.k < 1 or args.beam < args.k:
        raise UsageError(f"need 1 <= k <= beam, got k={args.k} beam={args.beam}")
    cfg = _model_config_for(ckpt, args.config)
    vocab_file = data.parent / "vocab.txt"
    if vocab_file.is_file() and len(read_vocab(vocab_file)) != cfg.vocab_size:
        raise ConfigError(f"{vocab_file} does not match model.vocab_size={cfg.vocab_size}")
    params = load_checkpoint(ckpt)
    utts = read_dataset(data, cfg.vocab_size, cfg.feature_dim)
    if not utts:
        raise ConfigError(f"{data} holds no utterances")
    report = evaluate(params, cfg, utts, modes=modes, beam=args.beam, k=args.k, timing=not args.no_timing)
    text = report.to_json(str(ckpt), str(data), timing=not args.no_timing)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


# ---- gradcheck -----------------------------------------------------------------

GRADCHECK_INSTANCE_SEED = 20240531


def gradcheck_error(run: RunConfig, seed: int = 0, corrupt: bool = False) -> float:
    """Max relative error of the full siamese objective's gradient.

    The instance (parameters, one utterance of 7 frames, 3 target tokens) is
    fixed; ``seed`` feeds only the dropout-mask stream, and dropout is forced
    off, so the result does not depend on it.
    """
    cfg = dataclasses.replace(run.model, dropout_p=0.0)
    rng = ad.make_rng([GRADCHECK_INSTANCE_SEED, 0])
    arrays = init_params(cfg, rng)
    # lift parameters away from their symmetric initial values so every path carries gradient
    arrays = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in arrays.items()}
    feats = rng.standard_normal((7, cfg.feature_dim))
    first = int(rng.integers(2, cfg.vocab_size))
    tokens = [first]
    while len(tokens) < 3:
        nxt = int(rng.integers(2, cfg.vocab_size))
        if nxt != tokens[-1]:
            tokens.append(nxt)
    batch = make_batch([FeatureSequence(feats.astype(np.float32), tuple(tokens), "gradcheck")])
    params = to_tensors(arrays, requires_grad=True)

    def objective():
        _, losses = siamese_objective(batch, params, cfg, run.train, ad.make_rng([seed, 1]))
        return losses.objective

    tamper = None
    if corrupt:
        def tamper(name, g):
            g = g.copy()
            if name == sorted(params)[0]:
                g.reshape(-1)[0] += 1.0
            return g
    return ad.grad_check(objective, params, corrupt=tamper)


def cmd_gradcheck(args) -> int:
    run = _load_config(args.config)
    err = gradcheck_error(run, args.seed, corrupt=args.corrupt_gradient)
    ok = err < GRADCHECK_TOL
    print(json.dumps({"max_rel_error": err, "tolerance": GRADCHECK_TOL, "pass": ok}))
    return EXIT_OK if ok else EXIT_CHECK


# ---- avg -----------------------------------------------------------------------

def cmd_avg(args) -> int:
    paths = [_require_file(Path(p), "checkpoint") for p in args.inputs]
    save_checkpoint(args.out, average_checkpoints(paths))
    print(json.dumps({"averaged": len(paths), "out": str(args.out)}))
    return EXIT_OK


# ---- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="san", description="Siamese dropout training for hybrid CTC/attention models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate the synthetic train/dev/test corpus")
    p.add_argument("--config", help="run config JSON (synth section is used)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override synth.seed")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train a model, one checkpoint per epoch")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--data-dir", required=True, help="directory holding train.bin and vocab.txt")
    p.add_argument("--out-dir", required=True, help="run directory for checkpoints and train.log")
    p.add_argument("--resume", action="store_true", help="continue from the newest epoch in --out-dir")
    p.add_argument("--no-timing", action="store_true", help="omit wall-time fields from the log")
    p.add_argument("--max-steps", type=int, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="decode a dataset and report token error rates")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset .bin file")
    p.add_argument("--config", help=f"run config JSON (default: {CONFIG_NAME} next to the checkpoint)")
    p.add_argument("--modes", default=",".join(MODES), help="comma-separated subset of " + ", ".join(MODES))
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--k", type=int, default=4, help="n-best size for attention rescoring")
    p.add_argument("--out", help="also write the report here")
    p.add_argument("--no-timing", action="store_true", help="omit per-mode seconds from the report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="compare autodiff and finite-difference gradients of the training objective")
    p.add_argument("--config", help="run config JSON (model and train sections are used)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("avg", help="average checkpoints parameter by parameter")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_avg)
    return parser


def _thread_limit() -> int:
    raw = os.environ.get("SAN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"SAN_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with threadpool_limits(limits=_thread_limit()):
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"san {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, VocabError, OSError) as exc:
        print(f"san {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
