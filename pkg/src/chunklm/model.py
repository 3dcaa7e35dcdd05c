"""The chunked attention-free language model: forward pass and generation."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .data import VOCAB_SIZE, TokenSeq, pad_batch
from .memory import FusionParams, MemoryStore, fuse, init_fusion, mean_retrieved
from .multires import MultiResParams, init_multires, multires_forward
from .numerics import ops
from .numerics.ops import IGNORE_INDEX
from .numerics.tensor import Tensor, no_grad
from .ssm import SSMParams, init_ssm, ssm_forward
from .supervisor import GruParams, gru_cell, init_gru, init_state


@dataclass
class ModelParams:
    embed: Tensor
    cond_in: Tensor
    cond_out: Tensor
    ssm: SSMParams
    mrc: MultiResParams
    fusion: FusionParams
    gru: GruParams
    W_lm: Tensor

    def named(self) -> dict:
        """All learnable tensors in a fixed, deterministic order."""
        out = {"embed": self.embed, "cond_in": self.cond_in, "cond_out": self.cond_out}
        out.update({f"ssm.{k}": v for k, v in self.ssm.tensors().items()})
        out.update({f"mrc.{k}": v for k, v in self.mrc.tensors().items()})
        out.update({f"fusion.{k}": v for k, v in self.fusion.tensors().items()})
        out.update({f"gru.{k}": v for k, v in self.gru.tensors().items()})
        out["W_lm"] = self.W_lm
        return out

    def arrays(self) -> dict:
        return {k: t.data for k, t in self.named().items()}

    def param_count(self) -> int:
        return int(sum(t.data.size for t in self.named().values()))

    def zero_grads(self):
        for t in self.named().values():
            t.grad = None


def init_params(cfg: ModelConfig, seed: int | None = None) -> ModelParams:
    rng = np.random.default_rng(cfg.init_seed if seed is None else seed)
    dtype = np.dtype(cfg.dtype)
    d, dh, V = cfg.d_model, cfg.d_hidden, cfg.vocab

    def leaf(a):
        return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)

    return ModelParams(
        embed=leaf(rng.normal(0.0, 1.0, size=(V, d))),
        cond_in=leaf(np.zeros((dh, d))),
        cond_out=leaf(np.zeros((cfg.d_mem, d))),
        ssm=init_ssm(d, cfg.ssm_taps, rng, dtype),
        mrc=init_multires(d, cfg.dilations, cfg.conv_taps, rng, dtype),
        fusion=init_fusion(cfg.d_mem, rng, dtype),
        gru=init_gru(cfg.d_mem, dh, rng, dtype),
        W_lm=leaf(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, V))),
    )


def zero_params(cfg: ModelConfig) -> ModelParams:
    p = init_params(cfg, seed=0)
    for t in p.named().values():
        t.data[...] = 0.0
    return p


@dataclass
class ChunkState:
    h_g: Tensor
    c_prev: Tensor  # fused embedding of the previous chunk (zeros before chunk 0)
    mem: MemoryStore
    seq_ids: tuple
    chunk_index: int = 0

    def detached(self) -> "ChunkState":
        return dataclasses.replace(self, h_g=self.h_g.detach(), c_prev=self.c_prev.detach())


def new_state(cfg: ModelConfig, seq_ids, mem: MemoryStore | None = None) -> ChunkState:
    seq_ids = tuple(int(s) for s in seq_ids)
    dtype = np.dtype(cfg.dtype)
    if mem is None:
        mem = new_memory(cfg)
    B = len(seq_ids)
    return ChunkState(
        init_state(B, cfg.d_hidden, dtype),
        Tensor(np.zeros((B, cfg.d_mem), dtype=dtype), op="init_state"),
        mem,
        seq_ids,
        0,
    )


def new_memory(cfg: ModelConfig) -> MemoryStore:
    return MemoryStore(cfg.d_mem, capacity=cfg.mem_capacity, index=cfg.mem_index, n_list=cfg.n_list, n_probe=cfg.n_probe)


def _retrieve(state: ChunkState, c_m: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    rows = []
    for b, sid in enumerate(state.seq_ids):
        flt = None
        if cfg.memory_scope == "sequence":
            flt = lambda seqs, _chunks, sid=sid: seqs == sid  # noqa: E731
        hits = state.mem.query(c_m[b], cfg.top_k, seq_id=sid, chunk_index=state.chunk_index, filter=flt)
        rows.append(mean_retrieved([h.value for h in hits], cfg.d_mem, c_m.dtype))
    return np.stack(rows)


def forward_chunk(tokens, state: ChunkState, p: ModelParams, cfg: ModelConfig, commit=True, replay=None, record=None, store_rows=None):
    """Process one [B, c] chunk.

    Returns (logits [B, c, V], new state). Retrieval issued from this chunk's
    pooled embedding only shapes the state handed to the next chunk.
    ``commit=False`` leaves the memory untouched. ``replay`` (dict chunk_index ->
    rbar) substitutes recorded retrievals; ``record`` collects them.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[0] != len(state.seq_ids):
        raise ValueError(f"tokens {tokens.shape} do not match state for {len(state.seq_ids)} sequences")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= VOCAB_SIZE):
        raise IndexError("token id outside the byte vocabulary")
    B = tokens.shape[0]
    d = cfg.d_model

    x = ops.embedding(p.embed, tokens)
    cond = ops.matmul(state.c_prev, p.cond_out)
    if not cfg.no_rnn:
        cond = ops.add(cond, ops.matmul(state.h_g, p.cond_in))
    x = ops.add(x, ops.reshape(cond, (B, 1, d)))
    if not cfg.no_ssm:
        x = ssm_forward(x, p.ssm)
    z = multires_forward(x, p.mrc)
    logits = ops.matmul(z, p.W_lm)

    c_m = ops.mean_pool_tokens(z)
    m = state.chunk_index
    if cfg.no_retrieval:
        rbar = np.zeros((B, cfg.d_mem), dtype=c_m.dtype)
    elif replay is not None and m in replay:
        rbar = replay[m]
    else:
        rbar = _retrieve(state, c_m.data, cfg)
    if record is not None:
        record[m] = rbar
    c_fused = fuse(c_m, rbar, p.fusion)
    h_next = state.h_g if cfg.no_rnn else gru_cell(c_fused, state.h_g, p.gru)

    if commit and not cfg.no_retrieval:
        pooled = c_m.data
        for b, sid in enumerate(state.seq_ids):
            if store_rows is None or store_rows[b]:
                state.mem.add(pooled[b], pooled[b], sid, m)
    return logits, ChunkState(h_next, c_fused, state.mem, state.seq_ids, m + 1)


def chunk_loss(logits: Tensor, targets, weights=None) -> Tensor:
    V = logits.shape[-1]
    flat = ops.reshape(logits, (-1, V))
    return ops.cross_entropy(flat, np.asarray(targets).reshape(-1), None if weights is None else np.asarray(weights).reshape(-1))


def row_weights(targets, ignore) -> np.ndarray:
    """Weights giving each row's tokens 1/(row count * rows): the mean of per-row mean losses."""
    valid = targets != ignore
    counts = valid.sum(axis=1)
    rows = int((counts > 0).sum())
    w = np.zeros(targets.shape, dtype=np.float64)
    for b, n in enumerate(counts):
        if n:
            w[b, valid[b]] = 1.0 / (n * rows)
    return w


def forward_sequence(seqs, p: ModelParams, cfg: ModelConfig, seq_ids=None, mem=None, replay=None, record=None):
    """Run every chunk of one or more sequences; returns (loss Tensor, per-chunk losses).

    With several sequences the loss is the mean of their per-sequence mean losses.
    """
    if isinstance(seqs, (TokenSeq, np.ndarray)) and np.asarray(getattr(seqs, "tokens", seqs)).ndim == 1:
        seqs = [seqs]
    c = cfg.chunk_size
    inputs, targets = pad_batch(seqs, c)
    if seq_ids is None:
        seq_ids = range(len(seqs))
    state = new_state(cfg, seq_ids, mem)
    w = row_weights(targets, IGNORE_INDEX)
    lens = np.array([len(s.tokens) if isinstance(s, TokenSeq) else len(s) for s in seqs])
    real = np.arange(inputs.shape[1])[None, :] < lens[:, None]
    total = None
    per_chunk = []
    for m in range(inputs.shape[1] // c):
        sl = slice(m * c, (m + 1) * c)
        logits, state = forward_chunk(inputs[:, sl], state, p, cfg, replay=replay, record=record, store_rows=real[:, sl].any(axis=1))
        part = chunk_loss(logits, targets[:, sl], w[:, sl])
        del logits
        mask = targets[:, sl] != IGNORE_INDEX
        if mask.any():
            per_chunk.append(float(part.data) / float(w[:, sl][mask].sum()))
        total = part if total is None else ops.add(total, part)
    return total, per_chunk


def generate(prompt, p: ModelParams, cfg: ModelConfig, max_new: int, temperature: float = 1.0, seed: int = 0, argmax: bool = False) -> TokenSeq:
    """Autoregressive continuation; ``temperature <= 0`` or ``argmax`` picks the mode."""
    toks = list(np.asarray(prompt.tokens if isinstance(prompt, TokenSeq) else prompt, dtype=np.int64))
    if max_new <= 0:
        return TokenSeq(np.asarray(toks, dtype=np.int64))
    if not toks:
        raise ValueError("generation needs a non-empty prompt")
    greedy = argmax or temperature <= 0
    rng = np.random.default_rng(seed)
    c = cfg.chunk_size
    with no_grad():
        state = new_state(cfg, [0])
        row = None
        n_full = len(toks) // c
        for m in range(n_full):
            logits, state = forward_chunk(np.asarray([toks[m * c : (m + 1) * c]]), state, p, cfg)
            row = logits.data[0, -1]
        buf = toks[n_full * c :]
        for _ in range(max_new):
            if buf:
                # partial chunk: recompute it with the tokens so far, memory untouched
                padded = np.zeros((1, c), dtype=np.int64)
                padded[0, : len(buf)] = buf
                logits, _ = forward_chunk(padded, state, p, cfg, commit=False)
                row = logits.data[0, len(buf) - 1]
            if greedy:
                nxt = int(np.argmax(row))
            else:
                z = row / temperature
                pr = np.exp(z - z.max())
                nxt = int(rng.choice(len(pr), p=pr / pr.sum()))
            toks.append(nxt)
            buf.append(nxt)
            if len(buf) == c:
                logits, state = forward_chunk(np.asarray([buf]), state, p, cfg)
                row = logits.data[0, -1]
                buf = []
    return TokenSeq(np.asarray(toks, dtype=np.int64))


def grad_check_model(cfg: ModelConfig, n_chunks=3, probes=200, seed=0, h=1e-5, scale=0.5) -> float:
    """End-to-end reverse-mode vs. central-difference check of the sequence loss.

    All parameters (including the zero-initialized conditioning maps) are
    randomized so every path reaches the loss. Retrievals are recorded once and
    replayed, matching the stop-gradient on memory contents.
    """
    from .numerics.gradcheck import grad_check

    if np.dtype(cfg.dtype) != np.float64:
        raise ValueError("gradient checks need float64")
    rng = np.random.default_rng(seed)
    p = init_params(cfg, seed=seed)
    for name, t in p.named().items():
        if name != "ssm.log_neg_a":
            t.data = rng.normal(0.0, scale, size=t.data.shape)
    seq = rng.integers(0, cfg.vocab, size=n_chunks * cfg.chunk_size)
    record = {}
    with no_grad():
        forward_sequence([seq], p, cfg, record=record)
    return grad_check(lambda: forward_sequence([seq], p, cfg, replay=record)[0], p.named(), probes=probes, h=h, seed=seed)
