"""Attention-based audio-visual fusion.

Each modality embedding is L2-normalized and mapped into a shared width by
``dense -> relu -> batchnorm -> dense``. A linear attention layer scores the
concatenated pair, softmax turns the two scores into modality weights, the
weighted representations are concatenated and the result is normalized to
unit length.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .data import AUDIO_DIM, VISUAL_DIM, UtterancePair
from .nn import (BatchNorm, Dense, ShapeError, l2_normalize, l2_normalize_backward,
                 relu, relu_backward, safe_l2_normalize, safe_l2_normalize_backward, softmax,
                 softmax_backward)

HIDDEN_DIM = 512


class ModalityTransform:
    """Input normalization followed by ``dense -> relu -> batchnorm -> dense``.

    All-zero input rows (a missing modality) stay zero after normalization and
    pass through the stack like any other input.
    """

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.fc1 = Dense(in_dim, hidden, rng)
        self.bn = BatchNorm(hidden)
        self.fc2 = Dense(hidden, hidden, rng)
        self._cache = None

    @property
    def layers(self):
        return {"fc1": self.fc1, "bn": self.bn, "fc2": self.fc2}

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"transform expects (batch, {self.in_dim}) input, got {x.shape}")
        xn, norm = safe_l2_normalize(x)
        pre = self.fc1.forward(xn)
        out = self.fc2.forward(self.bn.forward(relu(pre)))
        self._cache = (x, norm, pre)
        return out

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        x, norm, pre = self._cache
        g = self.bn.backward(self.fc2.backward(upstream))
        g = self.fc1.backward(relu_backward(pre, g))
        return safe_l2_normalize_backward(x, norm, g)


def transform_modality(stack: ModalityTransform, emb: np.ndarray) -> np.ndarray:
    return stack.forward(emb)


def attention_weights(attention: Dense, e_a: np.ndarray, e_v: np.ndarray) -> np.ndarray:
    """Softmax over the two attention logits of each ``[e_a, e_v]`` row."""
    e_a = np.atleast_2d(e_a)
    e_v = np.atleast_2d(e_v)
    return softmax(attention.forward(np.concatenate([e_a, e_v], axis=1)), axis=1)


def gate(e_a: np.ndarray, e_v: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Concatenate the modality representations scaled by their weights."""
    return np.concatenate([weights[:, :1] * e_a, weights[:, 1:] * e_v], axis=1)


@dataclass
class FusedEmbedding:
    vector: np.ndarray
    attention_weights: np.ndarray


class FusionNet:
    """Learnable fusion parameters plus forward and backward passes.

    ``forward`` works on a batch: audio ``(B, 256)`` and visual ``(B, 512)``
    give fused unit vectors ``(B, 1024)``. In train mode the batchnorm layers
    normalize over that batch.
    """

    def __init__(self, rng: Optional[np.random.Generator] = None, audio_dim: int = AUDIO_DIM,
                 visual_dim: int = VISUAL_DIM, hidden: int = HIDDEN_DIM):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.audio_dim, self.visual_dim, self.hidden = audio_dim, visual_dim, hidden
        self.audio = ModalityTransform(audio_dim, hidden, rng)
        self.visual = ModalityTransform(visual_dim, hidden, rng)
        # zero init: both modalities start with weight 1/2
        self.attention = Dense(2 * hidden, 2, init="zeros")
        self._cache = None
        self.last_weights: Optional[np.ndarray] = None
        self.last_gated: Optional[np.ndarray] = None

    @property
    def out_dim(self) -> int:
        return 2 * self.hidden

    def layers(self) -> Dict[str, object]:
        out = {}
        for prefix, stack in (("audio", self.audio), ("visual", self.visual)):
            for name, layer in stack.layers.items():
                out[f"{prefix}.{name}"] = layer
        out["attention"] = self.attention
        return out

    def parameters(self) -> Dict[str, np.ndarray]:
        return {f"{ln}.{pn}": arr for ln, layer in self.layers().items()
                for pn, arr in layer.params.items()}

    def gradients(self) -> Dict[str, np.ndarray]:
        return {f"{ln}.{pn}": arr for ln, layer in self.layers().items()
                for pn, arr in layer.grads.items()}

    def batchnorms(self):
        return [self.audio.bn, self.visual.bn]

    def train(self, mode: bool = True) -> "FusionNet":
        for bn in self.batchnorms():
            bn.training = mode
        return self

    def eval(self) -> "FusionNet":
        return self.train(False)

    def forward(self, audio: np.ndarray, visual: np.ndarray) -> np.ndarray:
        audio = np.asarray(audio, dtype=np.float64)
        visual = np.asarray(visual, dtype=np.float64)
        if audio.ndim != 2 or visual.ndim != 2 or audio.shape[0] != visual.shape[0]:
            raise ShapeError(f"audio {audio.shape} and visual {visual.shape} must be "
                             f"(batch, dim) with equal batch sizes")
        e_a = self.audio.forward(audio)
        e_v = self.visual.forward(visual)
        weights = attention_weights(self.attention, e_a, e_v)
        gated = gate(e_a, e_v, weights)
        fused = l2_normalize(gated, axis=1)
        self._cache = (e_a, e_v, weights, gated)
        self.last_weights, self.last_gated = weights, gated
        return fused

    def backward(self, upstream: np.ndarray):
        """Fill parameter gradients; return ``(grad_audio, grad_visual)``."""
        if self._cache is None:
            raise RuntimeError("forward() must be called before backward()")
        e_a, e_v, weights, gated = self._cache
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != gated.shape:
            raise ShapeError(f"upstream shape {upstream.shape} != {gated.shape}")
        h = self.hidden
        d_gated = l2_normalize_backward(gated, upstream, axis=1)
        d_ga, d_gv = d_gated[:, :h], d_gated[:, h:]
        d_weights = np.stack([np.sum(d_ga * e_a, axis=1), np.sum(d_gv * e_v, axis=1)], axis=1)
        d_logits = softmax_backward(weights, d_weights, axis=1)
        d_concat = self.attention.backward(d_logits)
        d_ea = weights[:, :1] * d_ga + d_concat[:, :h]
        d_ev = weights[:, 1:] * d_gv + d_concat[:, h:]
        return self.audio.backward(d_ea), self.visual.backward(d_ev)


def fuse_forward(net: FusionNet, pair: UtterancePair) -> FusedEmbedding:
    """Fuse a single pair. Uses eval-mode batchnorm, so the net must be in eval mode."""
    if any(bn.training for bn in net.batchnorms()):
        raise RuntimeError("single-pair fusion needs the network in eval mode")
    vec = net.forward(pair.audio_emb[None, :], pair.visual_emb[None, :])
    return FusedEmbedding(vec[0], net.last_weights[0].copy())


def fuse_backward(net: FusionNet, pair: UtterancePair, upstream: np.ndarray) -> Dict[str, np.ndarray]:
    """Parameter gradients of ``fuse_forward`` for one pair under ``upstream``.

    Batchnorm runs on frozen running statistics here, so ``gamma``/``beta`` get
    gradients through the eval-mode affine map.
    """
    fuse_forward(net, pair)
    net.backward(np.atleast_2d(np.asarray(upstream, dtype=np.float64)))
    return {k: v.copy() for k, v in net.gradients().items()}
