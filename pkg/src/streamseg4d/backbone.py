"""Segmenter stand-ins and the prediction head.

A backbone returns, per point, a feature row ``[class logits (C) | instance
embedding (D)]`` plus the latency it declares.  The oracle backbone derives
these from ground truth with configurable corruption, so the streaming
machinery can be exercised without a trained network.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Protocol

import numpy as np

DEFAULT_EMBED_DIM = 8


class HeadError(ValueError):
    pass


@dataclass(frozen=True)
class LatencyModel:
    """Declared backbone latency in milliseconds.

    ``kind`` is ``fixed``, ``gaussian`` (truncated at zero) or ``trace``
    (replays ``trace`` in order, repeating the last entry).
    """

    kind: str = "fixed"
    mean_ms: float = 0.0
    std_ms: float = 0.0
    seed: int = 0
    trace: tuple = ()

    def __post_init__(self):
        if self.kind not in ("fixed", "gaussian", "trace"):
            raise ValueError(f"unknown latency kind {self.kind!r}")
        if self.mean_ms < 0 or self.std_ms < 0:
            raise ValueError("latency parameters must be non-negative")
        if self.kind == "trace" and not self.trace:
            raise ValueError("trace latency model needs a non-empty trace")

    def sample(self, call_index: int) -> float:
        """Latency of the ``call_index``-th backbone call (independent of frame content)."""
        if self.kind == "fixed":
            return float(self.mean_ms)
        if self.kind == "trace":
            return float(self.trace[min(call_index, len(self.trace) - 1)])
        rng = np.random.default_rng([self.seed, call_index])
        return max(0.0, float(rng.normal(self.mean_ms, self.std_ms)))


@dataclass(frozen=True)
class NoiseConfig:
    label_flip_prob: float = 0.0
    logit_margin: float = 4.0
    embed_sigma: float = 0.0
    seed: int = 0


def instance_centroid(instance_id: int, dim: int = DEFAULT_EMBED_DIM, salt: int = 0) -> np.ndarray:
    """Deterministic embedding centre of an instance; stuff (id 0) maps to the origin."""
    if instance_id == 0:
        return np.zeros(dim)
    return np.random.default_rng([salt, 7919, int(instance_id)]).uniform(-1.0, 1.0, dim)


@dataclass
class InstanceCodebook:
    """Instance id -> embedding centroid, in the feature space it will be decoded from."""

    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    centroids: np.ndarray = field(default_factory=lambda: np.zeros((0, DEFAULT_EMBED_DIM)))

    def __len__(self) -> int:
        return len(self.ids)

    @staticmethod
    def from_dict(entries: Dict[int, np.ndarray], dim: int = DEFAULT_EMBED_DIM) -> "InstanceCodebook":
        ids = np.array(sorted(entries), dtype=np.int64)
        cents = np.array([entries[i] for i in ids], dtype=np.float64).reshape(len(ids), dim)
        return InstanceCodebook(ids, cents)

    def as_dict(self) -> Dict[int, np.ndarray]:
        return {int(i): c for i, c in zip(self.ids, self.centroids)}

    def merged(self, other: "InstanceCodebook") -> "InstanceCodebook":
        entries = self.as_dict()
        entries.update(other.as_dict())
        return InstanceCodebook.from_dict(entries, self.centroids.shape[1] if len(self) else other.centroids.shape[1])

    def mapped(self, fn) -> "InstanceCodebook":
        """Codebook with every centroid passed through ``fn`` (row-wise on an array)."""
        if not len(self):
            return self
        return InstanceCodebook(self.ids.copy(), fn(self.centroids))

    def decode(self, embeddings: np.ndarray) -> np.ndarray:
        if not len(self):
            raise HeadError("empty instance codebook")
        emb = np.asarray(embeddings, dtype=np.float64)
        d2 = (
            (emb**2).sum(1)[:, None]
            - 2.0 * emb @ self.centroids.T
            + (self.centroids**2).sum(1)[None, :]
        )
        return self.ids[np.argmin(d2, axis=1)]


@dataclass
class SegmentOutput:
    features: np.ndarray  # (n, C + D)
    codebook: InstanceCodebook
    latency_ms: float
    n_classes: int

    @property
    def logits(self) -> np.ndarray:
        return self.features[:, : self.n_classes]

    @property
    def embeddings(self) -> np.ndarray:
        return self.features[:, self.n_classes:]


class Backbone(Protocol):
    n_classes: int
    embed_dim: int

    def segment(self, frame, call_index: int = 0) -> SegmentOutput: ...


def oracle_segment(
    frame,
    noise: NoiseConfig = NoiseConfig(),
    latency: LatencyModel = LatencyModel(),
    n_classes: int = 8,
    embed_dim: int = DEFAULT_EMBED_DIM,
    call_index: int = 0,
) -> SegmentOutput:
    """Ground-truth features corrupted by label flips and embedding jitter."""
    sem = np.asarray(frame.semantic, dtype=np.int64)
    inst = np.asarray(frame.instance, dtype=np.int64)
    n = len(sem)
    rng = np.random.default_rng([noise.seed, int(frame.frame_index)])

    cls = sem.copy()
    if noise.label_flip_prob > 0 and n:
        flip = rng.random(n) < noise.label_flip_prob
        lo = 0 if n_classes <= 2 else 1
        span = n_classes - lo - 1
        if span > 0:
            # uniform over valid ids other than the true one
            r = rng.integers(0, span, size=n) + lo
            alt = np.where(r >= sem, r + 1, r)
            cls = np.where(flip, alt, sem)

    logits = np.zeros((n, n_classes))
    logits[np.arange(n), cls] = noise.logit_margin

    uniq = np.unique(inst)
    table = {int(i): instance_centroid(int(i), embed_dim) for i in uniq}
    emb = np.zeros((n, embed_dim))
    for i in uniq:
        emb[inst == i] = table[int(i)]
    if noise.embed_sigma > 0:
        emb = emb + rng.normal(0.0, noise.embed_sigma, size=emb.shape)
    book = InstanceCodebook.from_dict({k: v for k, v in table.items() if k != 0}, embed_dim)
    return SegmentOutput(
        features=np.hstack([logits, emb]),
        codebook=book,
        latency_ms=latency.sample(call_index),
        n_classes=n_classes,
    )


@dataclass
class OracleBackbone:
    n_classes: int = 8
    embed_dim: int = DEFAULT_EMBED_DIM
    noise: NoiseConfig = NoiseConfig()
    latency: LatencyModel = LatencyModel()

    def segment(self, frame, call_index: int = 0) -> SegmentOutput:
        return oracle_segment(frame, self.noise, self.latency, self.n_classes, self.embed_dim, call_index)


def prediction_head(features: np.ndarray, codebook: InstanceCodebook, n_classes: int, thing_mask) -> tuple:
    """Decode ``(semantic, instance)``: argmax of logits, nearest centroid for things."""
    features = np.asarray(features, dtype=np.float64)
    semantic = np.argmax(features[:, :n_classes], axis=1).astype(np.int32)
    thing = np.asarray(thing_mask, dtype=bool)[semantic]
    instance = np.zeros(len(features), dtype=np.int32)
    if thing.any():
        if not len(codebook):
            raise HeadError("thing points present but the instance codebook is empty")
        instance[thing] = codebook.decode(features[thing, n_classes:])
    return semantic, instance
