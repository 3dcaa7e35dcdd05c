"""Truncated-BPTT training over chunk windows, evaluation, and the recall metric."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import TokenSeq, pad_batch
from .model import ModelParams, chunk_loss, forward_chunk, forward_sequence, init_params, new_state, row_weights
from .numerics import ops
from .numerics.ops import IGNORE_INDEX
from .numerics.optim import adamw_step, clip_grad_norm, init_moments, lr_at
from .numerics.tensor import NumericError, no_grad, peak_floats, reset_peak

log = logging.getLogger(__name__)

METRIC_FIELDS = ["step", "lr", "train_loss", "eval_loss", "tokens_per_sec", "peak_activation_floats"]


class TrainingDiverged(RuntimeError):
    pass


def _as_array(s):
    return np.asarray(s.tokens if isinstance(s, TokenSeq) else s, dtype=np.int64)


def decay_mask(params: ModelParams) -> dict:
    """Weight decay on matrices only."""
    return {k: t.data.ndim >= 2 for k, t in params.named().items()}


def train_step(inputs, targets, state, params: ModelParams, moments, step: int, cfg: TrainConfig, real=None):
    """Forward/backward over one window of whole chunks, then one AdamW update.

    ``inputs``/``targets`` are [B, W*c]. The incoming state is detached, so
    gradients stop at the window boundary. Returns (loss, new state, metrics).
    """
    mcfg = cfg.model
    c = mcfg.chunk_size
    state = state.detached()
    params.zero_grads()
    w = row_weights(targets, IGNORE_INDEX)
    total = None
    t0 = time.perf_counter()
    reset_peak()
    try:
        for m in range(inputs.shape[1] // c):
            sl = slice(m * c, (m + 1) * c)
            store = None if real is None else real[:, sl].any(axis=1)
            logits, state = forward_chunk(inputs[:, sl], state, params, mcfg, store_rows=store)
            part = chunk_loss(logits, targets[:, sl], w[:, sl])
            total = part if total is None else ops.add(total, part)
        total.backward()
    except NumericError as err:
        norms = {k: float(np.linalg.norm(t.data)) for k, t in params.named().items()}
        raise TrainingDiverged(f"step {step}: {err}; parameter norms {norms}") from err
    peak = peak_floats()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.named().items()}
    grad_norm = clip_grad_norm(grads, cfg.clip_norm)
    lr = lr_at(step, cfg.lr, cfg.warmup, cfg.max_steps)
    if lr > 0:
        adamw_step(
            params.arrays(), grads, moments, step, lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, decay_mask(params)
        )
    n_tok = int((targets != IGNORE_INDEX).sum())
    elapsed = time.perf_counter() - t0
    metrics = {
        "lr": lr,
        "grad_norm": grad_norm,
        "tokens": n_tok,
        "tokens_per_sec": n_tok / elapsed if elapsed > 0 else float("inf"),
        "peak_activation_floats": peak,
    }
    return float(total.data), state, metrics


def evaluate(params: ModelParams, cfg, corpus) -> float:
    """Mean next-byte loss in nats over every predicted position of the corpus."""
    mcfg = getattr(cfg, "model", cfg)
    nll, count = 0.0, 0
    with no_grad():
        for i, s in enumerate(corpus):
            toks = _as_array(s)
            loss, _ = forward_sequence([toks], params, mcfg, seq_ids=[i])
            nll += float(loss.data) * (toks.size - 1)
            count += toks.size - 1
    return nll / max(count, 1)


def batch_indices(batch_index: int, n: int, B: int, seed: int) -> np.ndarray:
    """Corpus rows for a batch: reshuffled every epoch, a pure function of (seed, batch_index)."""
    start = batch_index * B
    out = []
    for pos in range(start, start + B):
        epoch, off = divmod(pos, n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        out.append(int(perm[off]))
    return np.asarray(out)


@dataclass
class FitResult:
    params: ModelParams
    moments: dict
    step: int
    batch_index: int
    losses: list = field(default_factory=list)
    eval_losses: list = field(default_factory=list)
    checkpoint: Path | None = None


def fit(corpus, cfg: TrainConfig, out_dir=None, eval_corpus=None, resume=None, params=None, log_path=None, progress=None) -> FitResult:
    """Train to ``cfg.max_steps`` optimizer steps (one per BPTT window).

    Checkpoints land at batch boundaries so a resumed run replays the
    remaining steps exactly.
    """
    seqs = [_as_array(s) for s in corpus]
    if not seqs:
        raise ValueError("empty training corpus")
    mcfg = cfg.model
    c, W, B = mcfg.chunk_size, cfg.bptt_window, min(cfg.batch_size, len(seqs))
    step, batch_index = 0, 0
    if resume is not None:
        params, _, meta, moments = load_checkpoint(resume)
        step, batch_index = meta["step"], meta["batch_index"]
        if moments is None:
            moments = init_moments(params.arrays())
    else:
        if params is None:
            params = init_params(mcfg, seed=cfg.seed)
        moments = init_moments(params.arrays())
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if log_path is None:
            log_path = out_dir / "metrics.csv"
    writer = _MetricLog(log_path) if log_path is not None else None
    result = FitResult(params, moments, step, batch_index)
    next_ckpt = (step // cfg.ckpt_every + 1) * cfg.ckpt_every if cfg.ckpt_every else None

    def checkpoint(tag):
        if out_dir is None:
            return None
        path = save_checkpoint(out_dir / tag, params, cfg, step=step, batch_index=batch_index, moments=moments)
        result.checkpoint = path
        return path

    if cfg.max_steps == 0 or step >= cfg.max_steps:
        checkpoint("final")
        return result

    while step < cfg.max_steps:
        rows = batch_indices(batch_index, len(seqs), B, cfg.seed)
        batch = [seqs[r] for r in rows]
        inputs, targets = pad_batch(batch, c)
        lens = np.array([s.size for s in batch])
        real = np.arange(inputs.shape[1])[None, :] < lens[:, None]
        state = new_state(mcfg, rows)
        span = W * c
        for start in range(0, inputs.shape[1], span):
            sl = slice(start, start + span)
            step += 1
            loss, state, metrics = train_step(inputs[:, sl], targets[:, sl], state, params, moments, step, cfg, real[:, sl])
            result.losses.append(loss)
            eval_loss = None
            if eval_corpus is not None and cfg.eval_every and step % cfg.eval_every == 0:
                eval_loss = evaluate(params, cfg, eval_corpus)
                result.eval_losses.append((step, eval_loss))
            if writer is not None:
                writer.write(step, metrics["lr"], loss, eval_loss, metrics["tokens_per_sec"], metrics["peak_activation_floats"])
            if progress is not None:
                progress(step, loss, metrics)
            if step >= cfg.max_steps:
                break
        else:
            batch_index += 1
            if next_ckpt is not None and step >= next_ckpt:
                checkpoint(f"step{step:07d}")
                next_ckpt = (step // cfg.ckpt_every + 1) * cfg.ckpt_every
            continue
        break
    result.step, result.batch_index = step, batch_index
    checkpoint("final")
    if writer is not None:
        writer.close()
    return result


class _MetricLog:
    def __init__(self, path):
        path = Path(path)
        new = not path.exists() or path.stat().st_size == 0
        self._fh = open(path, "a", newline="")
        self._w = csv.writer(self._fh)
        if new:
            self._w.writerow(METRIC_FIELDS)

    def write(self, step, lr, train_loss, eval_loss, tps, peak):
        self._w.writerow([step, f"{lr:.6g}", f"{train_loss:.6f}", "" if eval_loss is None else f"{eval_loss:.6f}", f"{tps:.1f}", peak])
        self._fh.flush()

    def close(self):
        self._fh.close()


def recall_accuracy(params: ModelParams, cfg, samples, batch_size=16) -> float:
    """Teacher-forced argmax accuracy on the key bytes that follow the query marker."""
    mcfg = getattr(cfg, "model", cfg)
    c = mcfg.chunk_size
    hits, total = 0, 0
    with no_grad():
        for start in range(0, len(samples), batch_size):
            group = samples[start : start + batch_size]
            toks = [s.training_tokens() for s in group]
            inputs, targets = pad_batch(toks, c)
            state = new_state(mcfg, range(start, start + len(group)))
            preds = np.zeros(inputs.shape, dtype=np.int64)
            for m in range(inputs.shape[1] // c):
                sl = slice(m * c, (m + 1) * c)
                logits, state = forward_chunk(inputs[:, sl], state, params, mcfg)
                preds[:, sl] = logits.data.argmax(axis=-1)
            for b, s in enumerate(group):
                n_sample = len(s.seq)
                k0, k1 = s.answer
                # prediction at position t targets token t+1; answer occupies [n_sample, n_sample + key_len)
                pos = np.arange(n_sample - 1, n_sample - 1 + (k1 - k0))
                hits += int((preds[b, pos] == targets[b, pos]).sum())
                total += pos.size
    return hits / max(total, 1)
