"""Training objectives on fused embeddings.

Embedding batches are ``(N, M, D)`` arrays: ``N`` speakers with ``M``
utterances each. Every loss returns its value together with the gradient
with respect to its inputs, so the trainer can chain into the fusion net.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .nn import (BatchNorm, Dense, DegenerateInputError, NORM_TOL, ShapeError, relu,
                 relu_backward, sigmoid)

SIM_W_FLOOR = 1e-4


class Ge2eParams:
    """Learnable scale ``w`` and offset ``b`` of the similarity matrix."""

    def __init__(self, w: float = 10.0, b: float = -5.0):
        self.params: Dict[str, np.ndarray] = {"w": np.array([float(w)]), "b": np.array([float(b)])}
        self.grads: Dict[str, np.ndarray] = {k: np.zeros(1) for k in self.params}

    @property
    def w(self) -> float:
        return float(self.params["w"][0])

    @property
    def b(self) -> float:
        return float(self.params["b"][0])

    def clamp(self) -> None:
        np.maximum(self.params["w"], SIM_W_FLOOR, out=self.params["w"])


@dataclass
class SimilarityMatrix:
    """Scaled cosine similarities, ``values[j * M + i, k] = S_ji,k``."""
    values: np.ndarray
    n: int
    m: int
    cos: np.ndarray = field(repr=False)
    exclusive: bool = False

    def as_cube(self) -> np.ndarray:
        return self.values.reshape(self.n, self.m, self.n)


@dataclass
class MtlConfig:
    gamma: float = 0.015

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")


@dataclass
class TripletConfig:
    margin: float = 0.2

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("triplet margin must be positive")


def _check_cube(embeddings: np.ndarray) -> np.ndarray:
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 3:
        raise ShapeError(f"embeddings must be (N, M, D), got shape {e.shape}")
    if e.shape[1] < 1:
        raise ShapeError("every speaker needs at least one utterance")
    return e


# ---------------------------------------------------------------------------
# GE2E-MM
# ---------------------------------------------------------------------------

def compute_centroids(embeddings: np.ndarray) -> np.ndarray:
    return _check_cube(embeddings).mean(axis=1)


def exclusive_centroids(embeddings: np.ndarray) -> np.ndarray:
    """Per-utterance centroid of the speaker's *other* utterances, ``(N, M, D)``."""
    e = _check_cube(embeddings)
    m = e.shape[1]
    if m < 2:
        raise ShapeError("leave-one-out centroids need M >= 2")
    return (e.sum(axis=1, keepdims=True) - e) / (m - 1)


def similarity_matrix(embeddings: np.ndarray, centroids: np.ndarray, params: Ge2eParams,
                      exclusive_positive_centroid: bool = False) -> SimilarityMatrix:
    """``S_ji,k = w * cos(e_ji, c_k) + b``.

    With ``exclusive_positive_centroid`` the own-speaker column ``k == j`` is
    measured against the centroid without ``e_ji``.
    """
    e = _check_cube(embeddings)
    n, m, _ = e.shape
    c = np.asarray(centroids, dtype=np.float64)
    if c.shape != (n, e.shape[2]):
        raise ShapeError(f"centroids shape {c.shape} does not match embeddings {e.shape}")
    c_norm = np.linalg.norm(c, axis=1)
    if np.any(c_norm < NORM_TOL):
        raise DegenerateInputError("zero-length speaker centroid")
    e_norm = np.linalg.norm(e, axis=2)
    cos = np.einsum("jid,kd->jik", e, c) / (e_norm[:, :, None] * c_norm[None, None, :])
    if exclusive_positive_centroid:
        cx = exclusive_centroids(e)
        cx_norm = np.linalg.norm(cx, axis=2)
        if np.any(cx_norm < NORM_TOL):
            raise DegenerateInputError("zero-length leave-one-out centroid")
        diag = np.sum(e * cx, axis=2) / (e_norm * cx_norm)
        idx = np.arange(n)
        cos[idx, :, idx] = diag
    values = params.w * cos + params.b
    return SimilarityMatrix(values.reshape(n * m, n), n, m, cos, exclusive_positive_centroid)


def ge2e_mm_loss(sim: SimilarityMatrix) -> Tuple[float, np.ndarray]:
    """Sum over embeddings of ``1 - sig(S_pos) + max_{k != j} sig(S_k)``.

    Returns the loss and its gradient with respect to ``sim.values``. The
    gradient of the max goes to the first (lowest-index) maximizing column.
    """
    n, m = sim.n, sim.m
    if n < 2:
        raise ValueError("GE2E-MM needs at least two speakers per batch")
    s = sim.as_cube()
    idx = np.arange(n)
    pos = s[idx, :, idx]                                   # (N, M)
    masked = s.copy()
    masked[idx, :, idx] = -np.inf
    hard = np.argmax(masked, axis=2)                       # (N, M)
    neg = np.take_along_axis(s, hard[:, :, None], axis=2)[:, :, 0]
    sig_pos, sig_neg = sigmoid(pos), sigmoid(neg)
    loss = float(np.sum(1.0 - sig_pos + sig_neg))

    grad = np.zeros_like(s)
    grad[idx, :, idx] = -sig_pos * (1.0 - sig_pos)
    jj, ii = np.meshgrid(idx, np.arange(m), indexing="ij")
    grad[jj, ii, hard] = sig_neg * (1.0 - sig_neg)
    return loss, grad.reshape(n * m, n)


def similarity_backward(grad_s: np.ndarray, embeddings: np.ndarray, sim: SimilarityMatrix,
                        params: Ge2eParams) -> np.ndarray:
    """Backpropagate ``dL/dS`` to the embeddings, through the centroids.

    Fills ``params.grads`` and returns ``dL/de`` with shape ``(N, M, D)``.
    """
    e = _check_cube(embeddings)
    n, m, _ = e.shape
    gs = np.asarray(grad_s, dtype=np.float64).reshape(n, m, n)
    cos = sim.cos
    params.grads["w"] = np.array([np.sum(gs * cos)])
    params.grads["b"] = np.array([np.sum(gs)])

    g = gs * params.w                                      # dL/dcos
    idx = np.arange(n)
    g_diag = None
    if sim.exclusive:
        g_diag = g[idx, :, idx].copy()
        g = g.copy()
        g[idx, :, idx] = 0.0

    c = e.mean(axis=1)
    e_norm = np.linalg.norm(e, axis=2)[:, :, None]         # (N, M, 1)
    c_norm = np.linalg.norm(c, axis=1)                     # (N,)
    gc = g * cos                                           # (N, M, N)
    scaled = g / (e_norm * c_norm[None, None, :])
    d_e = np.einsum("jik,kd->jid", scaled, c) - gc.sum(axis=2)[:, :, None] * e / e_norm ** 2
    d_c = np.einsum("jik,jid->kd", scaled, e) - gc.sum(axis=(0, 1))[:, None] * c / c_norm[:, None] ** 2
    d_e += d_c[:, None, :] / m

    if g_diag is not None:
        cx = exclusive_centroids(e)
        cx_norm = np.linalg.norm(cx, axis=2)[:, :, None]
        cos_d = cos[idx, :, idx][:, :, None]
        gd = g_diag[:, :, None]
        d_e += gd * (cx / (e_norm * cx_norm) - cos_d * e / e_norm ** 2)
        d_cx = gd * (e / (e_norm * cx_norm) - cos_d * cx / cx_norm ** 2)
        d_e += (d_cx.sum(axis=1, keepdims=True) - d_cx) / (m - 1)
    return d_e


def ge2e_forward_backward(embeddings: np.ndarray, params: Ge2eParams,
                          exclusive_positive_centroid: bool = False):
    """Loss and ``dL/de`` for a batch; the scale/offset grads land in ``params``."""
    c = compute_centroids(embeddings)
    sim = similarity_matrix(embeddings, c, params, exclusive_positive_centroid)
    loss, grad_s = ge2e_mm_loss(sim)
    return loss, similarity_backward(grad_s, embeddings, sim, params)


# ---------------------------------------------------------------------------
# Triplet baseline
# ---------------------------------------------------------------------------

def triplet_loss(anchor: np.ndarray, positive: np.ndarray, negative: np.ndarray,
                 cfg: Optional[TripletConfig] = None):
    """Summed hinge ``max(0, |a-p|^2 - |a-n|^2 + margin)`` over rows.

    Returns ``(loss, (d_anchor, d_positive, d_negative))``.
    """
    cfg = cfg or TripletConfig()
    a, p, ng = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (anchor, positive, negative))
    d_ap = np.sum((a - p) ** 2, axis=1)
    d_an = np.sum((a - ng) ** 2, axis=1)
    hinge = d_ap - d_an + cfg.margin
    active = (hinge > 0)[:, None]
    loss = float(np.sum(np.maximum(hinge, 0.0)))
    d_a = active * 2.0 * (ng - p)
    d_p = active * -2.0 * (a - p)
    d_n = active * 2.0 * (a - ng)
    return loss, (d_a, d_p, d_n)


def batch_hard_triplet_loss(embeddings: np.ndarray, cfg: Optional[TripletConfig] = None):
    """Triplet loss with hardest in-batch positive and negative per anchor.

    Every embedding of the ``(N, M, D)`` batch serves as anchor once.
    Returns ``(loss, dL/de)``.
    """
    cfg = cfg or TripletConfig()
    e = _check_cube(embeddings)
    n, m, d = e.shape
    if n < 2 or m < 2:
        raise ValueError("batch has no valid triplet: need at least 2 speakers and 2 utterances each")
    flat = e.reshape(n * m, d)
    labels = np.repeat(np.arange(n), m)
    sq = np.sum(flat ** 2, axis=1)
    dist = np.maximum(sq[:, None] + sq[None, :] - 2.0 * flat @ flat.T, 0.0)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    other = labels[:, None] != labels[None, :]
    hardest_pos = np.argmax(np.where(same, dist, -np.inf), axis=1)
    hardest_neg = np.argmin(np.where(other, dist, np.inf), axis=1)
    loss, (d_a, d_p, d_n) = triplet_loss(flat, flat[hardest_pos], flat[hardest_neg], cfg)
    grad = d_a.copy()
    np.add.at(grad, hardest_pos, d_p)
    np.add.at(grad, hardest_neg, d_n)
    return loss, grad.reshape(n, m, d)


# ---------------------------------------------------------------------------
# Age regression head
# ---------------------------------------------------------------------------

class AgeHead:
    """``dense -> relu -> batchnorm -> dense -> sigmoid`` age regressor."""

    def __init__(self, in_dim: int = 1024, hidden: int = 256, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.fc1 = Dense(in_dim, hidden, rng)
        self.bn = BatchNorm(hidden)
        self.fc2 = Dense(hidden, 1, rng)
        self._pre = None
        self._out = None

    def layers(self):
        return {"fc1": self.fc1, "bn": self.bn, "fc2": self.fc2}

    def parameters(self) -> Dict[str, np.ndarray]:
        return {f"{ln}.{pn}": arr for ln, layer in self.layers().items()
                for pn, arr in layer.params.items()}

    def gradients(self) -> Dict[str, np.ndarray]:
        return {f"{ln}.{pn}": arr for ln, layer in self.layers().items()
                for pn, arr in layer.grads.items()}

    def zero_grad(self) -> None:
        for layer in self.layers().values():
            for k, v in layer.params.items():
                layer.grads[k] = np.zeros_like(v)

    def train(self, mode: bool = True) -> "AgeHead":
        self.bn.training = mode
        return self

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._pre = self.fc1.forward(x)
        self._out = sigmoid(self.fc2.forward(self.bn.forward(relu(self._pre)))[:, 0])
        return self._out

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        d_logit = (d_out * self._out * (1.0 - self._out))[:, None]
        g = self.bn.backward(self.fc2.backward(d_logit))
        return self.fc1.backward(relu_backward(self._pre, g))


def aux_age_loss(head: AgeHead, fused: np.ndarray, labels: np.ndarray):
    """Masked mean squared error of the age head.

    ``fused`` is ``(N, M, D)`` and ``labels`` holds one value per speaker, NaN
    where unknown. Only utterances of labeled speakers enter the head, so the
    others get exactly zero loss and zero gradient. Returns ``(loss, dL/dfused)``.
    """
    e = _check_cube(fused)
    n, m, d = e.shape
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} speaker labels, got shape {labels.shape}")
    grad = np.zeros_like(e)
    head.zero_grad()
    known = ~np.isnan(labels)
    rows = int(known.sum()) * m
    if rows == 0 or (rows < 2 and head.bn.training):
        return 0.0, grad
    x = e[known].reshape(rows, d)
    y = np.repeat(labels[known], m)
    pred = head.forward(x)
    resid = pred - y
    loss = float(np.mean(resid ** 2))
    dx = head.backward(2.0 * resid / rows)
    grad[known] = dx.reshape(-1, m, d)
    return loss, grad


def mtl_loss(l_g: float, l_aux: float, cfg: MtlConfig) -> float:
    return cfg.gamma * l_g + (1.0 - cfg.gamma) * l_aux
