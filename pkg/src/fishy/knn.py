"""Cosine-kernel kNN densities over embedding sets.

Two kernel orientations are supported: ``"similarity-increasing"``
(``exp(cos)``, the default, grows with similarity) and ``"as-printed"``
(``exp(-cos)``). Neighbour search is exact brute force with ties broken by
ascending reference index.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractViolation
from .numerics import resize_bilinear

IGNORE_LABEL = 255
KERNELS = ("similarity-increasing", "as-printed")
_MIN_NORM = 1e-12


@dataclass
class EmbeddingSet:
    """Reference vectors ``(N, D)`` with optional per-vector class sets."""

    vectors: np.ndarray
    class_sets: list[frozenset[int]] | None = None
    stride: int = 1

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise ContractViolation("embedding set must be a (N, D) matrix")
        norms = np.linalg.norm(v, axis=1)
        if np.any(norms < _MIN_NORM):
            raise ContractViolation(f"{int(np.sum(norms < _MIN_NORM))} vectors have (near) zero norm")
        if self.class_sets is not None:
            if len(self.class_sets) != len(v):
                raise ContractViolation("class_sets length differs from the number of vectors")
            self.class_sets = [frozenset(int(c) for c in s) for s in self.class_sets]
        self.vectors = v
        self._unit = v / norms[:, None]

    def __len__(self):
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def unit(self) -> np.ndarray:
        return self._unit

    def subsample(self, n: int, rng: np.random.Generator) -> "EmbeddingSet":
        if n >= len(self):
            return self
        idx = np.sort(rng.choice(len(self), size=n, replace=False))
        sets = None if self.class_sets is None else [self.class_sets[i] for i in idx]
        return EmbeddingSet(self.vectors[idx], sets, self.stride)


@dataclass(frozen=True)
class KnnConfig:
    k: int = 20
    kernel_orientation: str = "similarity-increasing"

    def __post_init__(self):
        if self.k < 1:
            raise ContractViolation("k must be >= 1")
        if self.kernel_orientation not in KERNELS:
            raise ContractViolation(f"unknown kernel orientation {self.kernel_orientation!r}")


def kernel(sim, orientation: str = "similarity-increasing"):
    sim = np.asarray(sim, dtype=np.float64)
    if orientation == "similarity-increasing":
        return np.exp(sim)
    if orientation == "as-printed":
        return np.exp(-sim)
    raise ContractViolation(f"unknown kernel orientation {orientation!r}")


def _unit_queries(q: np.ndarray, dim: int) -> np.ndarray:
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    if q.shape[1] != dim:
        raise ContractViolation(f"query width {q.shape[1]} != reference width {dim}")
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms < _MIN_NORM):
        raise ContractViolation("zero-norm query")
    return q / norms[:, None]


def _top_k_rows(sims: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row; ties resolved by ascending column index."""
    n = sims.shape[1]
    if k == n:
        return np.lexsort((np.broadcast_to(np.arange(n), sims.shape), -sims), axis=1)
    part = np.argpartition(-sims, k - 1, axis=1)[:, :k]
    kth = np.min(np.take_along_axis(sims, part, axis=1), axis=1)
    out = np.empty((sims.shape[0], k), dtype=np.int64)
    for r in range(sims.shape[0]):
        row = sims[r]
        above = np.flatnonzero(row > kth[r])
        if len(above) + np.count_nonzero(row == kth[r]) == k:
            idx = part[r]
        else:
            tied = np.flatnonzero(row == kth[r])[: k - len(above)]
            idx = np.concatenate([above, tied])
        out[r] = idx[np.lexsort((idx, -row[idx]))]
    return out


def knn_query_batch(ref: EmbeddingSet, queries: np.ndarray, k: int, chunk: int = 2048):
    """``(indices, similarities)`` of shape ``(M, k)``, sorted by decreasing similarity."""
    if not 1 <= k <= len(ref):
        raise ContractViolation(f"k={k} must lie in [1, {len(ref)}]")
    qu = _unit_queries(queries, ref.dim)
    idx = np.empty((len(qu), k), dtype=np.int64)
    sim = np.empty((len(qu), k))
    for start in range(0, len(qu), chunk):
        s = qu[start : start + chunk] @ ref.unit.T
        top = _top_k_rows(s, k)
        idx[start : start + chunk] = top
        sim[start : start + chunk] = np.take_along_axis(s, top, axis=1)
    return idx, sim


def knn_query(ref: EmbeddingSet, q, k: int) -> list[tuple[int, float]]:
    idx, sim = knn_query_batch(ref, np.asarray(q)[None, :], k)
    return [(int(i), float(s)) for i, s in zip(idx[0], sim[0])]


def knn_density(ref: EmbeddingSet, q, cfg: KnnConfig) -> float:
    """Class-free density: kernel mass of the k nearest references."""
    _, sim = knn_query_batch(ref, np.asarray(q)[None, :], cfg.k)
    return float(np.sum(kernel(sim[0], cfg.kernel_orientation)))


def _relative(ref: EmbeddingSet, idx: np.ndarray, sim: np.ndarray, predicted, orientation) -> np.ndarray:
    if ref.class_sets is None:
        raise ContractViolation("relative class density needs class_sets on the reference set")
    w = kernel(sim, orientation)
    predicted = np.atleast_1d(predicted)
    match = np.array(
        [[int(p) in ref.class_sets[i] for i in row] for row, p in zip(idx, predicted)], dtype=bool
    ).reshape(w.shape)
    return np.clip(np.sum(w * match, axis=1) / np.sum(w, axis=1), 0.0, 1.0)


def knn_relative_class_density(ref: EmbeddingSet, q, cfg: KnnConfig, predicted_class: int) -> float:
    """Share of neighbour kernel mass carried by neighbours whose class set holds ``predicted_class``."""
    if ref.class_sets is None:
        raise ContractViolation("relative class density needs class_sets on the reference set")
    idx, sim = knn_query_batch(ref, np.asarray(q)[None, :], cfg.k)
    return float(_relative(ref, idx, sim, [predicted_class], cfg.kernel_orientation)[0])


def patch_class_association(labels: np.ndarray, stride: int, ignore_label: int = IGNORE_LABEL):
    """Per ``stride x stride`` cell, the set of classes present (ignore label excluded).

    Partial patches on the bottom/right edge are kept. Returns a nested list of
    shape ``(ceil(H / stride), ceil(W / stride))``.
    """
    labels = np.asarray(labels)
    h, w = labels.shape
    rows = -(-h // stride)
    cols = -(-w // stride)
    out = []
    for r in range(rows):
        line = []
        for c in range(cols):
            patch = labels[r * stride : (r + 1) * stride, c * stride : (c + 1) * stride]
            vals = np.unique(patch)
            line.append(frozenset(int(v) for v in vals if v != ignore_label))
        out.append(line)
    return out


def knn_score_map(
    ref: EmbeddingSet,
    query_map: np.ndarray,
    cfg: KnnConfig,
    mode: str = "density",
    predictions: np.ndarray | None = None,
    out_shape: Sequence[int] | None = None,
) -> np.ndarray:
    """Per-pixel anomaly score (higher = more anomalous) from an ``(H', W', D)`` embedding map.

    ``density`` yields the negated class-free density, ``relative`` yields
    ``1 - relative class density`` given an ``(H', W')`` class prediction.
    The cell grid is bilinearly upsampled to ``out_shape``.
    """
    query_map = np.asarray(query_map, dtype=np.float64)
    hq, wq, d = query_map.shape
    flat = query_map.reshape(-1, d)
    idx, sim = knn_query_batch(ref, flat, cfg.k)
    if mode == "density":
        cell = -np.sum(kernel(sim, cfg.kernel_orientation), axis=1)
    elif mode == "relative":
        if predictions is None:
            raise ContractViolation("relative mode needs a class prediction per cell")
        pred = np.asarray(predictions).reshape(-1)
        if len(pred) != len(flat):
            raise ContractViolation("prediction grid does not match the embedding map")
        cell = 1.0 - _relative(ref, idx, sim, pred, cfg.kernel_orientation)
    else:
        raise ContractViolation(f"unknown kNN score mode {mode!r}")
    cell = cell.reshape(hq, wq)
    if out_shape is None:
        return cell
    return resize_bilinear(cell, tuple(out_shape))
