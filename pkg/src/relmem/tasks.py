"""Seeded generators, oracles and encoders for the toy tasks.

Nth Farthest: given labelled random vectors, answer "which label is the
n-th farthest (Euclidean) from the vector labelled m". Labels are 1-based.

Memorization: digit sequences to copy, reverse, or emit twice. Models read
the sequence, then a GO symbol, then PAD for every answer step, so they
never see gold or predicted outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import ContractError

MEMORIZATION_KINDS = ("copy", "reverse", "double")
TASKS = ("nth_farthest",) + MEMORIZATION_KINDS


@dataclass
class NthFarthestEpisode:
    vectors: np.ndarray  # seq_len x dim, presentation order
    labels: np.ndarray  # label shown with each vector, a permutation of 1..seq_len
    n: int
    m: int
    target: int

    @property
    def seq_len(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def to_json(self) -> dict:
        return {
            "task": "nth_farthest",
            "vectors": self.vectors.tolist(),
            "labels": [int(x) for x in self.labels],
            "n": int(self.n),
            "m": int(self.m),
            "target": int(self.target),
        }

    @classmethod
    def from_json(cls, obj: dict) -> NthFarthestEpisode:
        return cls(np.asarray(obj["vectors"], dtype=np.float64), np.asarray(obj["labels"], dtype=np.int64),
                   int(obj["n"]), int(obj["m"]), int(obj["target"]))


@dataclass
class SeqSample:
    kind: str
    input_tokens: list[int]
    target_tokens: list[int]

    def to_json(self) -> dict:
        return {"task": self.kind, "input": list(self.input_tokens), "target": list(self.target_tokens)}

    @classmethod
    def from_json(cls, obj: dict) -> SeqSample:
        return cls(obj["task"], [int(t) for t in obj["input"]], [int(t) for t in obj["target"]])


# ---------------------------------------------------------------- Nth Farthest


def nth_farthest_oracle(vectors, labels, n: int, m: int) -> int:
    """Label at rank ``n`` when sorting by distance from vector ``m``, farthest first.

    Ties go to the smaller label.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    hits = np.flatnonzero(labels == m)
    if hits.size != 1:
        raise ContractError(f"reference label {m} not found exactly once in {labels.tolist()}")
    if not 1 <= n <= labels.size:
        raise ContractError(f"n={n} outside 1..{labels.size}")
    diff = vectors - vectors[hits[0]]
    dist2 = np.einsum("ij,ij->i", diff, diff)
    order = np.lexsort((labels, -dist2))
    return int(labels[order[n - 1]])


def gen_nth_farthest(rng: np.random.Generator, dim: int = 16, seq_len: int = 8) -> NthFarthestEpisode:
    if seq_len < 2:
        raise ContractError("seq_len must be >= 2")
    vectors = rng.uniform(-1.0, 1.0, size=(seq_len, dim))
    labels = rng.permutation(seq_len) + 1
    n = int(rng.integers(1, seq_len + 1))
    m = int(rng.integers(1, seq_len + 1))
    return NthFarthestEpisode(vectors, labels, n, m, nth_farthest_oracle(vectors, labels, n, m))


def nth_farthest_width(dim: int, seq_len: int) -> int:
    return dim + 3 * seq_len


def encode_nth_farthest(episode: NthFarthestEpisode) -> tuple[np.ndarray, int]:
    """Rows ``[x_t; onehot(label_t); onehot(n); onehot(m)]`` and the 0-based target class."""
    T, dim = episode.vectors.shape
    out = np.zeros((T, nth_farthest_width(dim, T)))
    out[:, :dim] = episode.vectors
    out[np.arange(T), dim + episode.labels - 1] = 1.0
    out[:, dim + T + episode.n - 1] = 1.0
    out[:, dim + 2 * T + episode.m - 1] = 1.0
    return out, episode.target - 1


def nth_farthest_batch(rng: np.random.Generator, batch: int, dim: int, seq_len: int):
    """``(inputs, targets)``: T arrays of ``batch x width`` and 0-based classes."""
    eps = [gen_nth_farthest(rng, dim, seq_len) for _ in range(batch)]
    enc = [encode_nth_farthest(e) for e in eps]
    x = np.stack([e[0] for e in enc], axis=1)  # T x batch x width
    return list(x), np.array([e[1] for e in enc], dtype=np.intp), eps


# ---------------------------------------------------------------- memorization


def memorization_oracle(kind: str, tokens: Sequence[int]) -> list[int]:
    tokens = list(tokens)
    if kind == "copy":
        return tokens
    if kind == "reverse":
        return tokens[::-1]
    if kind == "double":
        return tokens + tokens
    raise ContractError(f"unknown memorization task {kind!r}")


def gen_memorization(rng: np.random.Generator, kind: str, vocab_size: int = 10, length: int = 5) -> SeqSample:
    if kind not in MEMORIZATION_KINDS:
        raise ContractError(f"unknown memorization task {kind!r}")
    if vocab_size < 2 or length < 1:
        raise ContractError("vocab_size must be >= 2 and length >= 1")
    tokens = [int(t) for t in rng.integers(0, vocab_size, size=length)]
    return SeqSample(kind, tokens, memorization_oracle(kind, tokens))


def target_length(kind: str, length: int) -> int:
    return 2 * length if kind == "double" else length


def memorization_width(vocab_size: int) -> int:
    return vocab_size + 2


def encode_memorization(sample: SeqSample, vocab_size: int = 10):
    """One-hot inputs over ``vocab + {GO, PAD}``, per-step targets (-1 off the answer phase) and mask."""
    go, pad = vocab_size, vocab_size + 1
    L, A = len(sample.input_tokens), len(sample.target_tokens)
    symbols = list(sample.input_tokens) + [go] + [pad] * A
    x = np.zeros((L + 1 + A, memorization_width(vocab_size)))
    x[np.arange(len(symbols)), symbols] = 1.0
    targets = np.full(L + 1 + A, -1, dtype=np.intp)
    targets[L + 1:] = sample.target_tokens
    mask = (targets >= 0).astype(np.float64)
    return x, targets, mask


def memorization_batch(rng: np.random.Generator, kind: str, batch: int, vocab_size: int, length: int):
    """``(inputs, targets, mask)`` with inputs a list of T ``batch x width`` arrays.

    ``targets`` and ``mask`` are ``T x batch``.
    """
    samples = [gen_memorization(rng, kind, vocab_size, length) for _ in range(batch)]
    enc = [encode_memorization(s, vocab_size) for s in samples]
    x = np.stack([e[0] for e in enc], axis=1)
    targets = np.stack([e[1] for e in enc], axis=1)
    mask = np.stack([e[2] for e in enc], axis=1)
    return list(x), targets, mask, samples
