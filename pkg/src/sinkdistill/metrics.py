"""Evaluation metrics: long-horizon quality drift, motion degree, energy distance."""

from __future__ import annotations

import csv
from collections import defaultdict
from collections.abc import Mapping, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ContractError, ShapeError


def video_drift(scores: Sequence[float]) -> float:
    """Sample standard deviation of one video's per-clip scores."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size < 2:
        raise ContractError("drift needs at least two clip scores")
    if not np.all(np.isfinite(s)):
        raise ContractError("clip scores must be finite")
    s = s - s[0]  # exact zeros for constant scores
    return float(np.sqrt(np.sum((s - s.mean()) ** 2) / (s.size - 1)))


def drift(scores) -> float:
    """Mean per-video drift.

    ``scores`` is either one video's clip scores, a list of such lists, or a
    mapping ``video_id -> clip scores``.
    """
    if isinstance(scores, Mapping):
        videos = list(scores.values())
    else:
        videos = list(scores)
        if videos and np.ndim(videos[0]) == 0:
            videos = [videos]
    if not videos:
        raise ContractError("no videos")
    return float(np.mean([video_drift(v) for v in videos]))


def _chunk_means(sequence) -> np.ndarray:
    if hasattr(sequence, "__len__") and len(sequence) and hasattr(sequence[0], "tokens"):
        arr = np.stack([np.asarray(c.tokens) for c in sequence])
    else:
        arr = np.asarray(sequence, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"sequence must be (chunks, tokens, dim), got {arr.shape}")
    if arr.shape[0] < 2:
        raise ContractError("need at least two chunks")
    return arr.mean(axis=1)


def dynamics_degree(sequence) -> float:
    """Mean Euclidean distance between consecutive chunk token-means."""
    means = _chunk_means(sequence)
    return float(np.linalg.norm(np.diff(means, axis=0), axis=1).mean())


def dynamics_degree_batch(sequences: np.ndarray) -> np.ndarray:
    """Vectorized :func:`dynamics_degree` over ``(batch, chunks, tokens, dim)``."""
    means = np.asarray(sequences).mean(axis=2)
    if means.shape[1] < 2:
        raise ContractError("need at least two chunks")
    return np.linalg.norm(np.diff(means, axis=1), axis=2).mean(axis=1)


def _mean_pairwise(a: np.ndarray, b: np.ndarray, block=2048) -> float:
    total = 0.0
    for i in range(0, a.shape[0], block):
        total += cdist(a[i : i + block], b).sum()
    return total / (a.shape[0] * b.shape[0])


def energy_distance(samples_a, samples_b) -> float:
    """V-statistic energy distance ``2E|X-Y| - E|X-X'| - E|Y-Y'|``."""
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    if not len(a) or not len(b):
        raise ContractError("empty sample set")
    xy = _mean_pairwise(a, b)
    yx = _mean_pairwise(b, a)
    # grouped so that swapping the arguments is bit-exact
    return float((xy + yx) - (_mean_pairwise(a, a) + _mean_pairwise(b, b)))


def read_clip_scores(path) -> dict[str, list[float]]:
    """CSV ``video_id, clip_index, score`` -> ``{video_id: scores by clip_index}``."""
    rows = defaultdict(list)
    with open(path, newline="") as f:
        for rec in csv.DictReader(f, skipinitialspace=True):
            rows[rec["video_id"]].append((int(rec["clip_index"]), float(rec["score"])))
    return {vid: [s for _, s in sorted(clips)] for vid, clips in rows.items()}


def write_drift(path, scores: Mapping[str, Sequence[float]]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["video_id", "drift"])
        for vid, clips in scores.items():
            w.writerow([vid, repr(video_drift(clips))])
