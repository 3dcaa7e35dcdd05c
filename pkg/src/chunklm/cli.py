"""Command-line front end: train, eval, generate, gradcheck, make-synth, bench-scaling.

Exit codes: 0 success, 1 usage, 2 numeric failure, 3 guard refusal.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import TINY, ConfigKeyError, TrainConfig, apply_overrides, config_keys, dump_config, load_config
from .data import TokenSeq, detokenize, make_recall_corpus, read_corpus, read_recall_corpus, write_recall_corpus
from .model import generate, grad_check_model
from .numerics.optim import ConfigError
from .numerics.tensor import NumericError
from .trainer import TrainingDiverged, evaluate, fit

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_GUARD = 0, 1, 2, 3
ABLATIONS = ("no_ssm", "no_retrieval", "no_rnn")

log = logging.getLogger("chunklm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p):
    p.add_argument("--config", type=Path, help="flat 'key = value' config file")
    p.add_argument("--ablate", action="append", default=[], choices=ABLATIONS, help="disable a component (repeatable)")
    g = p.add_argument_group("config keys (override the file)")
    for key in config_keys():
        g.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, metavar="V", default=None)


def _config_from_args(args, base: TrainConfig | None = None) -> TrainConfig:
    try:
        cfg = base if base is not None else load_config(args.config)
        overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
        for name in args.ablate:
            overrides[name] = "true"
        return apply_overrides(cfg, overrides) if overrides else cfg
    except FileNotFoundError as err:
        raise UsageError(f"config file not found: {err.filename}") from None
    except (ConfigKeyError, ConfigError, TypeError) as err:
        raise UsageError(str(err)) from None


def _load_training_corpus(path: Path, seq_len: int):
    if not path.exists():
        raise UsageError(f"corpus not found: {path}")
    if Path(str(path) + ".manifest").exists():
        return [s.training_tokens() for s in read_recall_corpus(path)]
    toks = read_corpus(path).tokens
    if seq_len <= 0:
        return [toks]
    return [toks[i : i + seq_len] for i in range(0, toks.size, seq_len) if toks[i : i + seq_len].size >= 2]


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    corpus = _load_training_corpus(args.corpus, args.seq_len)
    eval_corpus = _load_training_corpus(args.eval_corpus, args.seq_len) if args.eval_corpus else None
    out = args.out or Path("run")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))

    def progress(step, loss, m):
        if step % max(1, args.log_every) == 0:
            print(f"step {step:6d}  loss {loss:.4f}  lr {m['lr']:.3g}  |g| {m['grad_norm']:.3f}  {m['tokens_per_sec']:.0f} tok/s", flush=True)

    res = fit(corpus, cfg, out_dir=out, eval_corpus=eval_corpus, resume=args.resume, progress=progress)
    print(f"final checkpoint: {res.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, cfg, _, _ = load_checkpoint(args.checkpoint)
    if args.config or args.ablate or any(k.startswith("cfg_") and v is not None for k, v in vars(args).items()):
        cfg = _config_from_args(args, base=cfg)
    corpus = _load_training_corpus(args.corpus, args.seq_len)
    nats = evaluate(params, cfg, corpus)
    print(f"loss {nats:.4f} nats/byte  {nats / math.log(2):.4f} bits/byte")
    return EXIT_OK


def cmd_generate(args) -> int:
    params, cfg, _, _ = load_checkpoint(args.checkpoint)
    if args.prompt_file is not None:
        prompt = args.prompt_file.read_bytes()
    else:
        prompt = args.prompt.encode("utf-8").decode("unicode_escape").encode("latin-1")
    seed = cfg.seed if args.seed is None else args.seed
    out = generate(TokenSeq(np.frombuffer(prompt, dtype=np.uint8).astype(np.int64)), params, cfg.model, args.max_new,
                   temperature=args.temperature, seed=seed, argmax=args.argmax)
    sys.stdout.buffer.write(detokenize(out.tokens[len(prompt):]))
    sys.stdout.buffer.write(b"\n")
    sys.stdout.flush()
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    base = TrainConfig(max_steps=0, warmup=0, model=TINY) if args.config is None else None
    cfg = _config_from_args(args, base=base)
    err = grad_check_model(cfg.model, n_chunks=args.chunks, probes=args.probes, seed=cfg.seed)
    ok = err < args.threshold
    print(f"max relative error {err:.3e} over {args.probes} probes ({'ok' if ok else 'FAIL'}, threshold {args.threshold:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_make_synth(args) -> int:
    samples = make_recall_corpus(args.seed, args.key_len, args.gap, args.n_samples)
    out = args.out or Path("recall.hex")
    write_recall_corpus(samples, out, args.seed, args.key_len, args.gap)
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_bench_scaling(args) -> int:
    from .bench import run_scaling, validate_n_list

    cfg = _config_from_args(args)
    try:
        validate_n_list(args.lengths)
        validate_n_list(args.attn_lengths)
    except ValueError as err:
        raise UsageError(str(err)) from None
    out = args.out or Path("scaling.csv")
    records, fits = run_scaling(args.lengths, args.attn_lengths, cfg.model, reps=args.reps, seed=cfg.seed, out=out)
    for tag, (alpha, r2) in fits.items():
        print(f"{tag:9s} alpha {alpha:.3f}  R^2 {r2:.4f}")
    print(f"wrote {out}")
    c = cfg.model.chunk_size
    peaks = {r.peak_floats for r in records if r.tag == "chunked" and r.n % c == 0}
    if len(peaks) > 1:
        print(f"chunked peak activation floats vary with n: {sorted(peaks)}", file=sys.stderr)
        return EXIT_NUMERIC
    if any(r.refused for r in records):
        return EXIT_GUARD
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="chunklm", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model on a byte corpus")
    _add_config_flags(p)
    p.add_argument("--corpus", type=Path, required=True, help="raw byte file, or a make-synth recall corpus")
    p.add_argument("--eval-corpus", type=Path)
    p.add_argument("--seq-len", type=int, default=0, help="split a raw corpus into sequences of this length (0: one sequence)")
    p.add_argument("--resume", type=Path, help="checkpoint directory to continue from")
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--out", type=Path, help="run directory (checkpoints + metrics.csv)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="report loss in nats/byte and bits/byte")
    _add_config_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--seq-len", type=int, default=0)
    p.add_argument("--out", type=Path, help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("generate", help="continue a prompt")
    p.add_argument("--checkpoint", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--prompt", help="prompt text (backslash escapes allowed)")
    src.add_argument("--prompt-file", type=Path)
    p.add_argument("--max-new", type=int, default=128)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--argmax", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("gradcheck", help="end-to-end gradient check (tiny float64 config by default)")
    _add_config_flags(p)
    p.add_argument("--probes", type=int, default=200)
    p.add_argument("--chunks", type=int, default=3)
    p.add_argument("--threshold", type=float, default=1e-5)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("make-synth", help="write the synthetic key-recall corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--key-len", type=int, default=8)
    p.add_argument("--gap", type=int, default=1024)
    p.add_argument("--n-samples", type=int, default=2000)
    p.add_argument("--out", type=Path)
    p.set_defaults(fn=cmd_make_synth)

    p = sub.add_parser("bench-scaling", help="runtime / activation-memory scaling of both models")
    _add_config_flags(p)
    p.add_argument("--lengths", dest="lengths", type=_int_list, default=[8192, 16384, 32768, 65536])
    p.add_argument("--attn-lengths", dest="attn_lengths", type=_int_list, default=[512, 1024, 2048, 4096])
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--out", type=Path, help="CSV path")
    p.set_defaults(fn=cmd_bench_scaling)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as err:
        print(f"chunklm {args.command}: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NumericError) as err:
        print(f"chunklm {args.command}: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except MemoryError as err:
        print(f"chunklm {args.command}: refused: {err}", file=sys.stderr)
        return EXIT_GUARD
    except (FileNotFoundError, ValueError) as err:
        print(f"chunklm {args.command}: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
