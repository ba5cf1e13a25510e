"""Toy text stack: closed-world vocabulary, tokenizer, MLM corruption and encoder."""

from __future__ import annotations

import re
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .layers import MLP, Linear, TransformerBlock, learned
from .tensor import ConfigurationError, Module, Tensor, cross_entropy

PAD, CLS, SEP, MASK, UNK = 0, 1, 2, 3, 4
RESERVED = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]")
_WORD = re.compile(r"[^\W_]+")

# MLM action codes
ACT_MASK, ACT_RANDOM, ACT_KEEP = 0, 1, 2


def normalize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _WORD.findall(text.lower())


class Vocab:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for t in tokens:
            if t in self.stoi:
                raise ConfigurationError(f"duplicate vocabulary entry {t!r}")
            self.stoi[t] = len(self.itos)
            self.itos.append(t)

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    @classmethod
    def build(cls, texts: Iterable[str], min_freq: int = 1) -> "Vocab":
        counts = Counter(tok for text in texts for tok in normalize(text))
        return cls(sorted(t for t, c in counts.items() if c >= min_freq and t not in RESERVED))

    def save(self, path: str | Path) -> None:
        body = self.itos[len(RESERVED):]
        Path(path).write_text("".join(t + "\n" for t in body), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


def tokenize(text: str, vocab: Vocab) -> np.ndarray:
    return np.array([CLS] + [vocab.id(t) for t in normalize(text)] + [SEP], dtype=np.int64)


@dataclass(frozen=True)
class MLMPlan:
    positions: np.ndarray  # selected positions, ascending
    actions: np.ndarray  # ACT_* per selected position
    labels: np.ndarray  # original ids at the selected positions

    def __len__(self) -> int:
        return len(self.positions)


def mlm_corrupt(
    ids,
    vocab_size: int,
    p: float = 0.15,
    split: tuple[float, float, float] = (0.8, 0.1, 0.1),
    rng_seed=None,
) -> tuple[np.ndarray, MLMPlan]:
    """BERT-style corruption.  Each non-special position is selected with
    probability ``p``; selected positions become ``[MASK]``, a random real
    token, or stay unchanged according to ``split``."""
    if abs(sum(split) - 1.0) > 1e-12:
        raise ConfigurationError(f"MLM split must sum to 1, got {split}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    ids = np.asarray(ids, dtype=np.int64)
    eligible = (ids != PAD) & (ids != CLS) & (ids != SEP)
    draws = rng.random(ids.shape)
    positions = np.flatnonzero(eligible & (draws < p))
    u = rng.random(len(positions))
    actions = np.where(u < split[0], ACT_MASK, np.where(u < split[0] + split[1], ACT_RANDOM, ACT_KEEP))
    out = ids.copy()
    out[positions[actions == ACT_MASK]] = MASK
    rand_pos = positions[actions == ACT_RANDOM]
    n_real = vocab_size - len(RESERVED)
    if n_real > 0:
        out[rand_pos] = len(RESERVED) + rng.integers(0, n_real, size=len(rand_pos))
    return out, MLMPlan(positions, actions.astype(np.int64), ids[positions])


@dataclass(frozen=True)
class TextConfig:
    vocab_size: int
    d_model: int = 64
    heads: int = 4
    layers: int = 2
    max_len: int = 32


class TextEncoder(Module):
    def __init__(self, cfg: TextConfig, rng: np.random.Generator):
        self.embed = learned((cfg.vocab_size, cfg.d_model), rng)
        self.pos_embed = learned((cfg.max_len, cfg.d_model), rng)
        self.blocks = [TransformerBlock(cfg.d_model, cfg.heads, rng) for _ in range(cfg.layers)]
        self.cfg = cfg

    def __call__(self, ids) -> Tensor:
        return text_forward(ids, self)

    def flops(self, T: int) -> int:
        return T * self.cfg.d_model + sum(b.flops(T) for b in self.blocks)


def truncate(ids, max_len: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) > max_len:
        warnings.warn(f"sequence of {len(ids)} tokens truncated to {max_len}", stacklevel=3)
        ids = ids[:max_len]
    return ids


def text_forward(ids, enc: TextEncoder) -> Tensor:
    """Token features ``T x d_model``; row 0 (the ``[CLS]`` position) summarises the sequence."""
    ids = truncate(ids, enc.cfg.max_len)
    if np.any((ids < 0) | (ids >= enc.cfg.vocab_size)):
        raise ConfigurationError(f"token id outside vocabulary of size {enc.cfg.vocab_size}")
    x = enc.embed[ids] + enc.pos_embed[: len(ids)]
    for block in enc.blocks:
        x = block(x)
    return x


class MLMHead(Module):
    def __init__(self, d_model: int, vocab_size: int, rng: np.random.Generator):
        self.mlp = MLP(d_model, d_model, rng)
        self.mlp.fc2 = Linear(d_model, vocab_size, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.mlp(x)


def mlm_loss(features: Tensor, plan: MLMPlan, head: MLMHead) -> Tensor:
    """Mean cross-entropy over the selected positions; 0 for an empty plan."""
    if len(plan) == 0:
        return Tensor(0.0)
    return cross_entropy(head(features[plan.positions]), plan.labels)
