"""Embedding-space metrics: MAS, FID, R-Precision, multimodal distance, multimodality.

All functions take precomputed embeddings; no evaluator network lives here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from .checkpoint import CheckpointError, load_tensors, save_tensors

KINDS = ("text", "motion", "video")
EIG_TOL = 1e-8
DEFAULT_POOL = 32
DEFAULT_REPEATS = 10


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingSet:
    rows: np.ndarray  # (M, E)
    kind: str = "motion"

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise MetricError(f"embedding rows must be 2-D, got shape {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise MetricError("embeddings contain non-finite values")
        if self.kind not in KINDS:
            raise MetricError(f"kind must be one of {KINDS}, got {self.kind!r}")
        object.__setattr__(self, "rows", rows)

    @property
    def M(self) -> int:
        return self.rows.shape[0]

    @property
    def E(self) -> int:
        return self.rows.shape[1]


ArrayLike = Union[EmbeddingSet, np.ndarray, Sequence[Sequence[float]]]


def _rows(x: ArrayLike) -> np.ndarray:
    if isinstance(x, EmbeddingSet):
        return x.rows
    return EmbeddingSet(np.atleast_2d(np.asarray(x, dtype=np.float64))).rows


def save_embeddings(path, emb: EmbeddingSet) -> None:
    save_tensors(path, {"rows": emb.rows}, meta={"kind": emb.kind})


def load_embeddings(path) -> EmbeddingSet:
    tensors, meta = load_tensors(path)
    if "rows" not in tensors:
        raise CheckpointError(f"{path}: no 'rows' tensor")
    return EmbeddingSet(tensors["rows"], meta.get("kind", "motion"))


# ---------------------------------------------------------------- MAS

def mas(text_emb, video_emb) -> float:
    """100 x cosine similarity of one text/video embedding pair."""
    a = np.asarray(text_emb, dtype=np.float64).ravel()
    b = np.asarray(video_emb, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise MetricError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise MetricError("zero-norm embedding")
    return float(np.clip(100.0 * np.dot(a, b) / (na * nb), -100.0, 100.0))


def mean_mas(text_embs: ArrayLike, video_embs: ArrayLike) -> float:
    t, v = _rows(text_embs), _rows(video_embs)
    if t.shape != v.shape:
        raise MetricError(f"shape mismatch: {t.shape} vs {v.shape}")
    return float(np.mean([mas(a, b) for a, b in zip(t, v)]))


# ---------------------------------------------------------------- FID

def _clamped_eigvalsh(mat: np.ndarray, what: str) -> tuple:
    mat = 0.5 * (mat + mat.T)
    w, v = np.linalg.eigh(mat)
    # tolerance scales with the spectrum so unit choice does not matter
    tol = EIG_TOL * max(1.0, float(np.max(np.abs(w))) if w.size else 1.0)
    if w.size and w.min() < -tol:
        raise MetricError(f"{what} is not positive semidefinite (min eigenvalue {w.min():.3e})")
    return np.clip(w, 0.0, None), v


def sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    w, v = _clamped_eigvalsh(np.asarray(mat, dtype=np.float64), "matrix")
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    mu_a, mu_b = np.asarray(mu_a, np.float64), np.asarray(mu_b, np.float64)
    cov_a, cov_b = np.asarray(cov_a, np.float64), np.asarray(cov_b, np.float64)
    root_a = sqrtm_psd(cov_a)
    w, _ = _clamped_eigvalsh(root_a @ cov_b @ root_a, "covariance product")
    diff = mu_a - mu_b
    val = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.sum(np.sqrt(w))
    return float(max(val, 0.0))


def fid(a: ArrayLike, b: ArrayLike) -> float:
    ra, rb = _rows(a), _rows(b)
    if ra.shape[1] != rb.shape[1]:
        raise MetricError(f"embedding width mismatch: {ra.shape[1]} vs {rb.shape[1]}")
    E = ra.shape[1]
    for name, r in (("a", ra), ("b", rb)):
        if r.shape[0] < E + 1:
            raise MetricError(f"set {name} needs at least {E + 1} rows, has {r.shape[0]}")
    return frechet_distance(ra.mean(0), np.cov(ra, rowvar=False),
                            rb.mean(0), np.cov(rb, rowvar=False))


# ---------------------------------------------------------------- retrieval

def _aligned(motion_embs: ArrayLike, text_embs: ArrayLike):
    m, t = _rows(motion_embs), _rows(text_embs)
    if m.shape != t.shape:
        raise MetricError(f"shape mismatch: {m.shape} vs {t.shape}")
    if m.shape[0] == 0:
        raise MetricError("empty input")
    return m, t


def retrieval_ranks(motion_embs: ArrayLike, text_embs: ArrayLike, pool: int = DEFAULT_POOL,
                    seed: int = 0) -> np.ndarray:
    """1-based rank of each motion's own text among itself plus pool-1 random others."""
    m, t = _aligned(motion_embs, text_embs)
    M = m.shape[0]
    if pool < 1 or pool > M:
        raise MetricError(f"pool must be in [1, {M}], got {pool}")
    rng = np.random.default_rng(seed)
    ranks = np.empty(M, dtype=np.int64)
    for i in range(M):
        others = rng.choice(M - 1, size=pool - 1, replace=False)
        others = others + (others >= i)  # skip i
        d_true = np.linalg.norm(m[i] - t[i])
        d_other = np.linalg.norm(t[others] - m[i], axis=1)
        ranks[i] = 1 + int(np.sum(d_other < d_true))
    return ranks


def r_precision(motion_embs: ArrayLike, text_embs: ArrayLike, pool: int = DEFAULT_POOL, k: int = 1,
                seed: int = 0) -> float:
    if k < 1:
        raise MetricError("k must be >= 1")
    return float(np.mean(retrieval_ranks(motion_embs, text_embs, pool, seed) <= k))


def mm_dist(motion_embs: ArrayLike, text_embs: ArrayLike) -> float:
    m, t = _aligned(motion_embs, text_embs)
    return float(np.mean(np.linalg.norm(m - t, axis=1)))


def multimodality(groups: Iterable[ArrayLike]) -> float:
    """Mean pairwise distance within each group of repeated generations, averaged over groups."""
    scores = []
    for g in groups:
        r = _rows(g)
        if r.shape[0] < 2:
            raise MetricError("each group needs at least two embeddings")
        d = np.linalg.norm(r[:, None, :] - r[None, :, :], axis=-1)
        iu = np.triu_indices(r.shape[0], k=1)
        scores.append(d[iu].mean())
    if not scores:
        raise MetricError("empty input")
    return float(np.mean(scores))
