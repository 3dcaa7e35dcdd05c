"""Byte tokenization, chunk plans, batching, and the synthetic recall corpus."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics.ops import IGNORE_INDEX

VOCAB_SIZE = 256
KEY_MARKER = 0x01
QUERY_MARKER = 0x02
KEY_ALPHABET = np.arange(0x30, 0x7B, dtype=np.uint8)
# filler bytes never collide with markers or the key alphabet
FILLER_ALPHABET = np.arange(0x20, 0x30, dtype=np.uint8)


class EmptyCorpusError(ValueError):
    pass


@dataclass
class TokenSeq:
    tokens: np.ndarray
    origin: str = ""

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= VOCAB_SIZE):
            raise ValueError("byte tokens must lie in [0, 256)")

    def __len__(self):
        return int(self.tokens.size)


def tokenize_bytes(text: bytes, origin: str = "") -> TokenSeq:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return TokenSeq(np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64), origin)


def detokenize(seq) -> bytes:
    toks = seq.tokens if isinstance(seq, TokenSeq) else np.asarray(seq)
    return bytes(np.asarray(toks, dtype=np.uint8).tolist())


def read_corpus(path) -> TokenSeq:
    return tokenize_bytes(Path(path).read_bytes(), origin=str(path))


@dataclass(frozen=True)
class ChunkPlan:
    n: int
    c: int
    spans: tuple = field(repr=False)

    @property
    def M(self) -> int:
        return len(self.spans)

    @property
    def lengths(self):
        return [ln for _, ln in self.spans]


def split_chunks(seq, c: int) -> ChunkPlan:
    n = len(seq)
    if n == 0:
        raise EmptyCorpusError("cannot chunk an empty sequence")
    if c < 2:
        raise ValueError(f"chunk size must be >= 2, got {c}")
    M = math.ceil(n / c)
    spans = tuple((m * c, min(c, n - m * c)) for m in range(M))
    return ChunkPlan(n, c, spans)


# --------------------------------------------------------------------------
# synthetic recall corpus
# --------------------------------------------------------------------------


@dataclass
class RecallSample:
    seq: TokenSeq
    answer: tuple  # (start, stop) of the key bytes inside seq

    def training_tokens(self) -> np.ndarray:
        """Sample followed by its supervised continuation (the key again)."""
        start, stop = self.answer
        return np.concatenate([self.seq.tokens, self.seq.tokens[start:stop]])


def make_recall_corpus(seed: int, key_len: int, gap: int, n_samples: int) -> list[RecallSample]:
    """[KEY, key..., filler x gap, QUERY]; the model must then emit the key."""
    if key_len < 1:
        raise ValueError("key_len must be >= 1")
    if gap < 0:
        raise ValueError("gap must be >= 0")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_samples):
        key = rng.choice(KEY_ALPHABET, size=key_len)
        # alphabet already excludes markers; keep the guard for custom alphabets
        while np.isin(key, (KEY_MARKER, QUERY_MARKER)).any():
            key = rng.choice(KEY_ALPHABET, size=key_len)
        filler = rng.choice(FILLER_ALPHABET, size=gap)
        toks = np.concatenate([[KEY_MARKER], key, filler, [QUERY_MARKER]]).astype(np.int64)
        out.append(RecallSample(TokenSeq(toks, origin=f"recall:{seed}:{i}"), (1, 1 + key_len)))
    return out


def write_recall_corpus(samples, path, seed, key_len, gap) -> None:
    """One hex-encoded sample per line plus a ``<path>.manifest`` sidecar."""
    path = Path(path)
    with open(path, "w") as fh:
        for s in samples:
            fh.write(detokenize(s.seq).hex() + "\n")
    with open(str(path) + ".manifest", "w") as fh:
        fh.write(f"seed={seed}\nkey_len={key_len}\ngap={gap}\nn_samples={len(samples)}\n")


def read_recall_corpus(path) -> list[RecallSample]:
    path = Path(path)
    meta = {}
    for line in Path(str(path) + ".manifest").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    key_len = int(meta["key_len"])
    samples = []
    for i, line in enumerate(path.read_text().splitlines()):
        if line.strip():
            seq = tokenize_bytes(bytes.fromhex(line.strip()), origin=f"{path}:{i}")
            samples.append(RecallSample(seq, (1, 1 + key_len)))
    return samples


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------


def shift_targets(tokens: np.ndarray) -> np.ndarray:
    """Next-token targets; the final position gets IGNORE_INDEX."""
    tgt = np.full(tokens.shape, IGNORE_INDEX, dtype=np.int64)
    tgt[:-1] = tokens[1:]
    return tgt


def pad_batch(seqs, c: int):
    """Stack sequences into [B, M*c] inputs/targets, padding with an ignore mask."""
    arrs = [np.asarray(s.tokens if isinstance(s, TokenSeq) else s, dtype=np.int64) for s in seqs]
    for a in arrs:
        if a.size < 2:
            raise ValueError("every sequence needs at least 2 tokens")
    n_max = max(a.size for a in arrs)
    total = math.ceil(n_max / c) * c
    inputs = np.zeros((len(arrs), total), dtype=np.int64)
    targets = np.full((len(arrs), total), IGNORE_INDEX, dtype=np.int64)
    for b, a in enumerate(arrs):
        inputs[b, : a.size] = a
        targets[b, : a.size] = shift_targets(a)
    return inputs, targets


def batcher(corpus, B: int, c: int):
    """Yield (inputs [B, c], targets [B, c]) chunk pairs, batch by batch.

    Consecutive yields walk the chunks of one batch of B sequences, then move
    to the next B sequences. Targets across a chunk boundary come from the
    first token of the following chunk.
    """
    if B > len(corpus):
        raise ValueError(f"batch size {B} exceeds corpus size {len(corpus)}")
    for start in range(0, len(corpus) - B + 1, B):
        inputs, targets = pad_batch(corpus[start : start + B], c)
        for m in range(inputs.shape[1] // c):
            yield inputs[:, m * c : (m + 1) * c], targets[:, m * c : (m + 1) * c]
