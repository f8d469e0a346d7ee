"""Byte-level tokenizer, corpus windows and the seeded batch sampler."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

BYTE_VOCAB = 256
PAD_ID = 256
VOCAB_SIZE = BYTE_VOCAB + 1
HELDOUT_FRACTION = 0.05


def encode(text: str | bytes) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def decode(ids) -> bytes:
    ids = np.asarray(ids)
    return bytes(int(i) for i in ids if i != PAD_ID)


def ingest_corpus(path: str | Path) -> np.ndarray:
    """Token stream of a UTF-8 text file, one id per byte."""
    raw = Path(path).read_bytes()
    raw.decode("utf-8")  # reject files that are not UTF-8
    return encode(raw)


def make_windows(ids: np.ndarray, T: int) -> np.ndarray:
    """Windows of T+1 tokens with stride T; consecutive windows share one boundary token.

    There are floor((len - 1) / T) of them.
    """
    n = (len(ids) - 1) // T
    if n < 1:
        raise ValueError(f"corpus of {len(ids)} tokens is shorter than one window of {T + 1}")
    starts = np.arange(n) * T
    return ids[starts[:, None] + np.arange(T + 1)]


@dataclass
class Corpus:
    train: np.ndarray    # [n_train, T+1]
    heldout: np.ndarray  # [n_heldout, T+1]
    n_tokens: int

    @classmethod
    def from_ids(cls, ids: np.ndarray, T: int) -> "Corpus":
        windows = make_windows(ids, T)
        n_held = max(1, int(round(len(windows) * HELDOUT_FRACTION)))
        if len(windows) - n_held < 1:
            raise ValueError("corpus too small to split into train and held-out windows")
        return cls(windows[:-n_held], windows[-n_held:], len(ids))

    @classmethod
    def load(cls, path: str | Path, T: int) -> "Corpus":
        return cls.from_ids(ingest_corpus(path), T)


class BatchSampler:
    """Draws batches of training windows in seeded, per-epoch shuffled order."""

    def __init__(self, windows: np.ndarray, batch_size: int, seed: int):
        self.windows = windows
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        picked = []
        need = self.batch_size
        while need:
            if self._pos >= len(self._order):
                self._order = self.rng.permutation(len(self.windows))
                self._pos = 0
            take = self._order[self._pos:self._pos + need]
            self._pos += len(take)
            need -= len(take)
            picked.append(take)
        return self.windows[np.concatenate(picked)]

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "order": self._order.tolist(), "pos": self._pos}

    def restore(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self._order = np.asarray(state["order"], dtype=np.int64)
        self._pos = int(state["pos"])


def next_batch(sampler: BatchSampler) -> np.ndarray:
    return sampler.next()


def unigram_entropy(ids: np.ndarray) -> float:
    """Entropy in nats of the empirical byte distribution."""
    counts = np.bincount(np.asarray(ids), minlength=BYTE_VOCAB).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())
