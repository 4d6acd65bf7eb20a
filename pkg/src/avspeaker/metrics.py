"""Verification scoring and embedding-space statistics."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .nn import NORM_TOL, DegenerateInputError


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class TrialScore:
    label: int
    score: float


@dataclass
class DistanceDistributions:
    intraclass: np.ndarray
    interclass: np.ndarray


def cosine_score(e1: np.ndarray, e2: np.ndarray) -> float:
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    n1, n2 = np.linalg.norm(e1), np.linalg.norm(e2)
    if n1 < NORM_TOL or n2 < NORM_TOL:
        raise DegenerateInputError("cosine score of a zero vector")
    return float(np.clip(e1 @ e2 / (n1 * n2), -1.0, 1.0))


def cosine_scores(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity of two ``(T, D)`` arrays."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na < NORM_TOL) or np.any(nb < NORM_TOL):
        raise DegenerateInputError("cosine score of a zero vector")
    return np.clip(np.sum(a * b, axis=1) / (na * nb), -1.0, 1.0)


def _split_scores(scores) -> Tuple[np.ndarray, np.ndarray]:
    if len(scores) and isinstance(scores[0], TrialScore):
        labels = np.array([s.label for s in scores])
        values = np.array([s.score for s in scores], dtype=np.float64)
    else:
        labels, values = (np.asarray(x) for x in scores)
        values = values.astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise MetricError("scores must be finite")
    tgt = values[labels == 1]
    non = values[labels == 0]
    if tgt.size == 0 or non.size == 0:
        raise MetricError("EER needs at least one target and one nontarget trial")
    return tgt, non


def eer(scores) -> Tuple[float, float]:
    """Equal error rate by exhaustive threshold sweep.

    ``scores`` is a sequence of :class:`TrialScore` or a ``(labels, values)``
    pair. Candidate thresholds are the unique scores plus +-inf; a trial is
    accepted when ``score >= t``. The threshold minimizing ``|FPR - FNR|``
    (lowest on ties) is returned with the mean of the two rates there.
    """
    tgt, non = _split_scores(scores)
    thresholds = np.concatenate([[-np.inf], np.unique(np.concatenate([tgt, non])), [np.inf]])
    tgt_sorted = np.sort(tgt)
    non_sorted = np.sort(non)
    fnr = np.searchsorted(tgt_sorted, thresholds, side="left") / tgt.size
    fpr = (non.size - np.searchsorted(non_sorted, thresholds, side="left")) / non.size
    best = int(np.argmin(np.abs(fpr - fnr)))
    return float((fpr[best] + fnr[best]) / 2.0), float(thresholds[best])


def distance_distributions(groups: Sequence[np.ndarray], reference: int) -> DistanceDistributions:
    """Intraclass distances over all pairs of the reference speaker's
    embeddings; interclass distances from its centroid to every other
    speaker's centroid."""
    ref = np.asarray(groups[reference], dtype=np.float64)
    if ref.shape[0] < 2:
        raise MetricError("reference speaker needs at least 2 utterances")
    iu, ju = np.triu_indices(ref.shape[0], k=1)
    intra = np.linalg.norm(ref[iu] - ref[ju], axis=1)
    centroids = np.stack([np.asarray(g, dtype=np.float64).mean(axis=0) for g in groups])
    others = np.delete(np.arange(len(groups)), reference)
    inter = np.linalg.norm(centroids[others] - centroids[reference], axis=1)
    return DistanceDistributions(intra, inter)


def _pairwise(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x ** 2, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def _prepare(x, labels):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    labels = np.asarray(labels)
    if labels.shape[0] != x.shape[0]:
        raise MetricError("one label per point required")
    uniq, codes = np.unique(labels, return_inverse=True)
    if uniq.size < 2:
        raise MetricError("cluster indices need at least two clusters")
    return x, codes, uniq.size


def silhouette(x: np.ndarray, labels) -> float:
    """Mean silhouette coefficient with Euclidean distance.

    Points in singleton clusters score 0, as do points with ``a = b = 0``.
    """
    x, codes, k = _prepare(x, labels)
    dist = _pairwise(x)
    counts = np.bincount(codes, minlength=k)
    onehot = np.eye(k)[codes]                              # (n, k)
    sums = dist @ onehot                                   # (n, k) summed distance to each cluster
    own = counts[codes]
    a = sums[np.arange(len(codes)), codes] / np.maximum(own - 1, 1)
    mean_other = sums / counts[None, :]
    mean_other[np.arange(len(codes)), codes] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[own == 1] = 0.0
    return float(np.mean(s))


def calinski_harabasz(x: np.ndarray, labels) -> float:
    x, codes, k = _prepare(x, labels)
    n = x.shape[0]
    overall = x.mean(axis=0)
    between = within = 0.0
    for c in range(k):
        pts = x[codes == c]
        centroid = pts.mean(axis=0)
        between += pts.shape[0] * float(np.sum((centroid - overall) ** 2))
        within += float(np.sum((pts - centroid) ** 2))
    if within == 0.0:
        raise MetricError("Calinski-Harabasz is unbounded for zero within-cluster dispersion")
    return between / within * (n - k) / (k - 1)


def davies_bouldin(x: np.ndarray, labels) -> float:
    x, codes, k = _prepare(x, labels)
    centroids = np.stack([x[codes == c].mean(axis=0) for c in range(k)])
    scatter = np.array([np.mean(np.linalg.norm(x[codes == c] - centroids[c], axis=1))
                        for c in range(k)])
    sep = _pairwise(centroids)
    off = ~np.eye(k, dtype=bool)
    if np.any(sep[off] == 0.0):
        raise MetricError("Davies-Bouldin undefined for coincident centroids")
    ratio = np.where(off, (scatter[:, None] + scatter[None, :]) / np.where(off, sep, 1.0), -np.inf)
    return float(np.mean(ratio.max(axis=1)))


def cluster_indices(x: np.ndarray, labels) -> dict:
    return {"silhouette": silhouette(x, labels),
            "calinski_harabasz": calinski_harabasz(x, labels),
            "davies_bouldin": davies_bouldin(x, labels)}


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

def write_scores(path, labels: Sequence[int], scores: Sequence[float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "score"])
        for lab, s in zip(labels, scores):
            w.writerow([int(lab), repr(float(s))])


def read_scores(path) -> List[TrialScore]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [TrialScore(int(r["label"]), float(r["score"])) for r in rows]


def histogram_rows(dists: DistanceDistributions, bin_width: float = 0.02,
                   lo: float = 0.0, hi: float = 2.0):
    n_bins = int(round((hi - lo) / bin_width))
    edges = lo + bin_width * np.arange(n_bins + 1)
    intra, _ = np.histogram(np.clip(dists.intraclass, lo, hi), bins=edges)
    inter, _ = np.histogram(np.clip(dists.interclass, lo, hi), bins=edges)
    return [(float(edges[i]), float(edges[i + 1]), int(intra[i]), int(inter[i]))
            for i in range(n_bins)]


def write_histogram(path, dists: DistanceDistributions, bin_width: float = 0.02,
                    lo: float = 0.0, hi: float = 2.0) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "intraclass_count", "interclass_count"])
        for left, right, a, b in histogram_rows(dists, bin_width, lo, hi):
            w.writerow([f"{left:.6f}", f"{right:.6f}", a, b])
