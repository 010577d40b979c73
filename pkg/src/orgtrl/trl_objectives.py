"""Teacher-recommended learning: external language model interface, an
interpolated add-alpha n-gram reference ELM, soft-target extraction and the
store that caches them, and the cross-entropy / truncated-KL objectives."""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
import torch

from .errors import ConfigError, CorruptionError, FormatError, ValidationError
from .feature_store import BOS, PAD, Example


class ExternalLanguageModel(Protocol):
    vocab_size: int

    def base_distribution(self, prefix: Sequence[int]) -> np.ndarray:
        """Next-word distribution over the task vocabulary given w_<t."""


# ---------------------------------------------------------------------------
# Reference n-gram ELM
# ---------------------------------------------------------------------------


class NgramElm:
    """Linear interpolation of add-alpha smoothed n-gram estimates of orders
    1..order. Contexts are left-padded with BOS; EOS is an ordinary target."""

    def __init__(self, order: int, vocab_size: int, alpha: float = 0.01,
                 weights: Sequence[float] | None = None):
        if order < 1:
            raise ConfigError("ELM order must be >= 1")
        if not alpha > 0:
            raise ConfigError("ELM alpha must be > 0 so every word keeps probability mass")
        weights = [1.0 / order] * order if weights is None else [float(w) for w in weights]
        if len(weights) != order or min(weights) < 0 or not np.isclose(sum(weights), 1.0):
            raise ConfigError("interpolation weights must be one nonnegative weight per order, summing to 1")
        self.order = order
        self.vocab_size = vocab_size
        self.alpha = alpha
        self.weights = weights
        # counts[m][context] -> Counter of next words, m = 0 .. order-1 (context length)
        self.counts: list[dict[tuple[int, ...], Counter]] = [defaultdict(Counter) for _ in range(order)]

    def _history(self, prefix: Sequence[int]) -> list[int]:
        prefix = [int(t) for t in prefix if int(t) != PAD]
        if prefix and prefix[0] == BOS:
            prefix = prefix[1:]
        return [BOS] * (self.order - 1) + prefix

    def fit(self, corpus: Iterable[Sequence[int]]) -> "NgramElm":
        n_seq = 0
        for seq in corpus:
            seq = [int(t) for t in seq if int(t) != PAD]
            if seq and seq[0] == BOS:
                seq = seq[1:]
            hist = [BOS] * (self.order - 1)
            for w in seq:
                if not 0 <= w < self.vocab_size:
                    raise ValidationError(f"token id {w} outside vocabulary of size {self.vocab_size}")
                for m in range(self.order):
                    ctx = tuple(hist[len(hist) - m :]) if m else ()
                    self.counts[m][ctx][w] += 1
                hist.append(w)
            n_seq += 1
        if n_seq == 0 or not self.counts[0]:
            raise ValidationError("cannot train an ELM on an empty corpus")
        return self

    def base_distribution(self, prefix: Sequence[int]) -> np.ndarray:
        hist = self._history(prefix)
        D, a = self.vocab_size, self.alpha
        q = np.zeros(D)
        for m, weight in enumerate(self.weights):
            if weight == 0:
                continue
            ctx = tuple(hist[len(hist) - m :]) if m else ()
            table = self.counts[m].get(ctx)
            est = np.full(D, a)
            total = 0
            if table:
                ids = np.fromiter(table.keys(), dtype=np.int64)
                cnt = np.fromiter(table.values(), dtype=np.float64)
                est[ids] += cnt
                total = cnt.sum()
            q += weight * est / (total + a * D)
        return q / q.sum()

    def query(self, prefix: Sequence[int], temperature: float = 1.0) -> np.ndarray:
        return elm_query(self, prefix, temperature)

    # -- persistence ---------------------------------------------------------

    def to_json(self) -> str:
        tables = []
        for m in range(self.order):
            rows = []
            for ctx in sorted(self.counts[m]):
                rows.append([list(ctx), sorted(self.counts[m][ctx].items())])
            tables.append(rows)
        return json.dumps({"order": self.order, "vocab_size": self.vocab_size, "alpha": self.alpha,
                           "weights": self.weights, "counts": tables})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "NgramElm":
        doc = json.loads(Path(path).read_text())
        elm = cls(doc["order"], doc["vocab_size"], doc["alpha"], doc["weights"])
        for m, rows in enumerate(doc["counts"]):
            for ctx, items in rows:
                elm.counts[m][tuple(ctx)] = Counter({int(w): int(c) for w, c in items})
        return elm


def train_elm(corpus: Sequence[Sequence[int]], vocab_size: int, order: int = 3, alpha: float = 0.01,
              weights: Sequence[float] | None = None) -> NgramElm:
    if not corpus:
        raise ValidationError("cannot train an ELM on an empty corpus")
    return NgramElm(order, vocab_size, alpha, weights).fit(corpus)


def apply_temperature(q: np.ndarray, temperature: float) -> np.ndarray:
    """q**(1/T) renormalised, i.e. logits divided by T."""
    if not temperature > 0:
        raise ConfigError("temperature must be > 0")
    q = np.asarray(q, dtype=np.float64)
    if temperature == 1.0:
        return q
    z = np.log(q) / temperature
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def elm_query(elm: ExternalLanguageModel, prefix: Sequence[int], temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ConfigError("temperature must be > 0")
    return apply_temperature(elm.base_distribution(prefix), temperature)


def soft_targets(Q, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k (ids, probabilities) of Q, descending, ties to the lower id.
    Probabilities are the raw Q values, not renormalised."""
    Q = np.asarray(Q, dtype=np.float64)
    if not 1 <= k <= Q.shape[-1]:
        raise ConfigError(f"k={k} outside [1, {Q.shape[-1]}]")
    ids = np.argsort(-Q, kind="stable")[:k]
    return ids, Q[ids]


# ---------------------------------------------------------------------------
# Soft-target store
# ---------------------------------------------------------------------------

STORE_MAGIC = b"ORGS"
STORE_VERSION = 1


def _entry_dtype(k: int) -> np.dtype:
    return np.dtype([("caption_id", "<u4"), ("t", "<u2"), ("pairs", [("id", "<u4"), ("p", "<f4")], (k,))])


class SoftTargetStore:
    """Soft targets keyed by (caption id, target step t); t = 1 is the first
    word after BOS.

    File layout (little-endian): "ORGS", version u8, k u32, vocab_size u32,
    entry count u32, then entries of caption id u32, t u16 and k pairs of
    (word id u32, probability f32).
    """

    def __init__(self, k: int, vocab_size: int):
        self.k = k
        self.vocab_size = vocab_size
        self.entries: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, caption_id: int, t: int, ids, probs) -> None:
        ids = np.asarray(ids, dtype=np.uint32)
        probs = np.asarray(probs, dtype=np.float32)
        if ids.shape != (self.k,) or probs.shape != (self.k,):
            raise ValidationError(f"expected {self.k} soft targets, got {ids.shape[0]}")
        self.entries[(int(caption_id), int(t))] = (ids, probs)

    def lookup(self, caption_id: int, t: int) -> tuple[np.ndarray, np.ndarray]:
        try:
            return self.entries[(int(caption_id), int(t))]
        except KeyError:
            raise ValidationError(f"no soft targets for caption {caption_id} step {t}") from None

    def batch_arrays(self, caption_ids, mask) -> tuple[np.ndarray, np.ndarray]:
        """Soft-target ids/probs [B, T, k] aligned with target positions
        (position p predicts step t = p + 1). Unmasked positions are zero."""
        mask = np.asarray(mask)
        B, T = mask.shape
        ids = np.zeros((B, T, self.k), dtype=np.int64)
        probs = np.zeros((B, T, self.k), dtype=np.float32)
        for b, cid in enumerate(caption_ids):
            for p in np.flatnonzero(mask[b]):
                i, q = self.lookup(cid, p + 1)
                ids[b, p] = i
                probs[b, p] = q
        return ids, probs

    def save(self, path: str | Path) -> None:
        dt = _entry_dtype(self.k)
        arr = np.zeros(len(self.entries), dtype=dt)
        for n, ((cid, t), (ids, probs)) in enumerate(sorted(self.entries.items())):
            arr[n]["caption_id"] = cid
            arr[n]["t"] = t
            arr[n]["pairs"]["id"] = ids
            arr[n]["pairs"]["p"] = probs
        header = STORE_MAGIC + bytes([STORE_VERSION]) + np.array(
            [self.k, self.vocab_size, len(arr)], dtype="<u4").tobytes()
        Path(path).write_bytes(header + arr.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "SoftTargetStore":
        raw = Path(path).read_bytes()
        if raw[:4] != STORE_MAGIC:
            raise FormatError(f"{path}: not a soft-target store")
        if len(raw) < 17:
            raise CorruptionError(f"{path}: truncated header")
        if raw[4] != STORE_VERSION:
            raise FormatError(f"{path}: unsupported version {raw[4]}")
        k, vocab_size, n = (int(x) for x in np.frombuffer(raw[5:17], dtype="<u4"))
        dt = _entry_dtype(k)
        if len(raw) - 17 != n * dt.itemsize:
            raise CorruptionError(f"{path}: payload size does not match {n} entries")
        arr = np.frombuffer(raw[17:], dtype=dt)
        store = cls(k, vocab_size)
        for e in arr:
            store.entries[(int(e["caption_id"]), int(e["t"]))] = (
                e["pairs"]["id"].astype(np.uint32), e["pairs"]["p"].astype(np.float32))
        return store


def precompute_soft_targets(examples: Sequence[Example], elm: ExternalLanguageModel, k: int,
                            temperature: float, vocab_size: int) -> SoftTargetStore:
    """Soft targets for every caption and every target step, from the
    ground-truth prefix. k is capped at the vocabulary size."""
    if elm.vocab_size != vocab_size:
        raise ValidationError(f"ELM vocabulary ({elm.vocab_size}) differs from dataset vocabulary ({vocab_size})")
    k = min(k, vocab_size)
    store = SoftTargetStore(k, vocab_size)
    cache: dict[tuple[int, ...], tuple[np.ndarray, np.ndarray]] = {}
    for ex in examples:
        for t in range(1, len(ex.tokens)):
            prefix = ex.tokens[:t]
            if prefix not in cache:
                cache[prefix] = soft_targets(elm_query(elm, prefix, temperature), k)
            store.add(ex.caption_id, t, *cache[prefix])
    return store


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossReport:
    ce: float
    kl: float
    combined: float
    tokens: int


def _token_count(mask) -> torch.Tensor:
    n = mask.sum()
    if float(n) <= 0:
        raise ValidationError("no unmasked target positions")
    return n


def ce_loss(log_probs, targets, mask) -> torch.Tensor:
    """Mean over unmasked positions of -log P_t[x_t]. Takes log-probabilities
    [..., T, D] so that training never evaluates log(0)."""
    log_probs = torch.as_tensor(log_probs)
    targets = torch.as_tensor(np.asarray(targets), dtype=torch.long)
    mask = torch.as_tensor(np.asarray(mask), dtype=log_probs.dtype)
    n = _token_count(mask)
    picked = log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return -(picked * mask).sum() / n


def kl_soft_loss(log_probs, soft_ids, soft_probs, mask) -> torch.Tensor:
    """Mean over unmasked positions of -sum_{d in top-k} Q_t[d] log P_t[d].

    The entropy of Q is omitted since the ELM is fixed. A negative soft id at
    an unmasked position marks a missing entry and is an error.
    """
    log_probs = torch.as_tensor(log_probs)
    soft_ids = torch.as_tensor(np.asarray(soft_ids), dtype=torch.long)
    soft_probs = torch.as_tensor(np.asarray(soft_probs), dtype=log_probs.dtype)
    mask = torch.as_tensor(np.asarray(mask), dtype=log_probs.dtype)
    n = _token_count(mask)
    if soft_ids.shape[:-1] != mask.shape or soft_probs.shape != soft_ids.shape:
        raise ValidationError("soft targets do not cover the target positions")
    if bool(((soft_ids < 0).any(-1) & (mask > 0)).any()):
        raise ValidationError("missing soft targets at an unmasked step")
    picked = log_probs.gather(-1, soft_ids.clamp(min=0))
    per_step = -(soft_probs * picked).sum(-1)
    return (per_step * mask).sum() / n


def combined_loss(ce, kl, lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda={lam} outside [0, 1]")
    return lam * kl + (1.0 - lam) * ce
