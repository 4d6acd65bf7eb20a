"""Dense numerical kernel: layers with explicit backward passes, Adam, and a
central-difference gradient checker.

Everything computes in float64. Layers follow a forward/backward protocol:
``forward`` caches what ``backward`` needs, ``backward`` fills ``grads`` and
returns the gradient with respect to the layer input.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

DTYPE = np.float64
NORM_TOL = 1e-12


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


def _as_2d(x: np.ndarray, name: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# Elementwise functions
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of relu at the pre-activation ``x`` (subgradient 0 at x == 0)."""
    return upstream * (x > 0)


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else out[()]


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=DTYPE)
    z = np.exp(v - np.max(v, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def softmax_backward(weights: np.ndarray, upstream: np.ndarray, axis: int = -1) -> np.ndarray:
    """Vector-Jacobian product of softmax given its output ``weights``."""
    inner = np.sum(weights * upstream, axis=axis, keepdims=True)
    return weights * (upstream - inner)


def l2_normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm along ``axis``.

    Raises DegenerateInputError when any slice has norm below 1e-12.
    """
    v = np.asarray(v, dtype=DTYPE)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norm < NORM_TOL):
        raise DegenerateInputError("cannot normalize a (near-)zero vector")
    return v / norm


def l2_normalize_backward(v: np.ndarray, upstream: np.ndarray, axis: int = -1) -> np.ndarray:
    """VJP of ``l2_normalize`` at the *unnormalized* input ``v``."""
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    u = v / norm
    return (upstream - u * np.sum(u * upstream, axis=axis, keepdims=True)) / norm


def safe_l2_normalize(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise normalization that maps zero rows to zero rows.

    Returns the normalized rows and the row norms (with zero rows marked by 0).
    Used for network inputs, where an all-zero row is a missing modality.
    """
    v = _as_2d(v)
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    live = norm >= NORM_TOL
    out = np.where(live, v / np.where(live, norm, 1.0), 0.0)
    return out, np.where(live, norm, 0.0)


def safe_l2_normalize_backward(v: np.ndarray, norm: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    live = norm >= NORM_TOL
    safe = np.where(live, norm, 1.0)
    u = v / safe
    g = (upstream - u * np.sum(u * upstream, axis=1, keepdims=True)) / safe
    return np.where(live, g, 0.0)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Dense:
    """Affine map ``y = x W^T + b`` with ``W`` of shape (out, in)."""

    def __init__(self, in_dim: int, out_dim: int, rng: Optional[np.random.Generator] = None,
                 init: str = "kaiming"):
        self.in_dim = in_dim
        self.out_dim = out_dim
        if init == "zeros" or rng is None:
            weight = np.zeros((out_dim, in_dim), dtype=DTYPE)
            bias = np.zeros(out_dim, dtype=DTYPE)
        elif init == "kaiming":
            # kaiming-uniform for relu fan-in, bias uniform(-1/sqrt(in), 1/sqrt(in))
            bound = np.sqrt(6.0 / in_dim)
            weight = rng.uniform(-bound, bound, size=(out_dim, in_dim))
            bbound = 1.0 / np.sqrt(in_dim)
            bias = rng.uniform(-bbound, bbound, size=out_dim)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.params: Dict[str, np.ndarray] = {"weight": weight, "bias": bias}
        self.grads: Dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._x: Optional[np.ndarray] = None

    @property
    def weight(self) -> np.ndarray:
        return self.params["weight"]

    @property
    def bias(self) -> np.ndarray:
        return self.params["bias"]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = _as_2d(x)
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"dense layer expects {self.in_dim} input features, got {x.shape[1]}")
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("forward() must be called before backward()")
        upstream = _as_2d(upstream, "upstream")
        if upstream.shape != (self._x.shape[0], self.out_dim):
            raise ShapeError(f"upstream shape {upstream.shape} does not match output "
                             f"{(self._x.shape[0], self.out_dim)}")
        self.grads["weight"] = upstream.T @ self._x
        self.grads["bias"] = upstream.sum(axis=0)
        return upstream @ self.weight

    __call__ = forward


def dense_forward(layer: Dense, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)


def dense_backward(layer: Dense, x: np.ndarray, upstream: np.ndarray):
    """Return ``(grad_x, grad_W, grad_b)`` for ``dense_forward(layer, x)``."""
    layer.forward(x)
    grad_x = layer.backward(upstream)
    return grad_x, layer.grads["weight"], layer.grads["bias"]


class BatchNorm:
    """Batch normalization over the leading (batch) axis.

    Running statistics use the exponential average
    ``running = (1 - momentum) * running + momentum * batch``; the running
    variance tracks the unbiased batch variance.
    """

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        if eps <= 0:
            raise ValueError("eps must be positive")
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.params: Dict[str, np.ndarray] = {
            "gamma": np.ones(num_features, dtype=DTYPE),
            "beta": np.zeros(num_features, dtype=DTYPE),
        }
        self.grads: Dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.running_mean = np.zeros(num_features, dtype=DTYPE)
        self.running_var = np.ones(num_features, dtype=DTYPE)
        self.training = True
        self.update_running = True
        self._cache = None

    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = _as_2d(x)
        if x.shape[1] != self.num_features:
            raise ShapeError(f"batchnorm expects {self.num_features} features, got {x.shape[1]}")
        gamma, beta = self.params["gamma"], self.params["beta"]
        if not self.training:
            std = np.sqrt(self.running_var + self.eps)
            x_hat = (x - self.running_mean) / std
            self._cache = (x_hat, std, False)
            return gamma * x_hat + beta
        n = x.shape[0]
        if n < 2:
            raise ShapeError("batchnorm in train mode needs a batch of at least 2")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        std = np.sqrt(var + self.eps)
        x_hat = (x - mean) / std
        if self.update_running:
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean
            self.running_var = (1 - m) * self.running_var + m * var * n / (n - 1)
        self._cache = (x_hat, std, True)
        return gamma * x_hat + beta

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        """Gradient through the last forward; eval mode treats the running
        statistics as constants."""
        if self._cache is None:
            raise RuntimeError("forward() must be called before backward()")
        x_hat, std, batch_stats = self._cache
        upstream = _as_2d(upstream, "upstream")
        if upstream.shape != x_hat.shape:
            raise ShapeError(f"upstream shape {upstream.shape} != {x_hat.shape}")
        self.grads["gamma"] = np.sum(upstream * x_hat, axis=0)
        self.grads["beta"] = np.sum(upstream, axis=0)
        g = upstream * self.params["gamma"]
        if not batch_stats:
            return g / std
        return (g - g.mean(axis=0) - x_hat * np.mean(g * x_hat, axis=0)) / std

    __call__ = forward


def batchnorm_forward(state: BatchNorm, x: np.ndarray) -> np.ndarray:
    return state.forward(x)


def batchnorm_backward(state: BatchNorm, upstream: np.ndarray) -> np.ndarray:
    return state.backward(upstream)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              lr: float) -> Dict[str, np.ndarray]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter block {name!r}")
        if params[name].shape != np.shape(g):
            raise ShapeError(f"gradient shape {np.shape(g)} != parameter shape "
                             f"{params[name].shape} for block {name!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(params[name])
            state.second_moment[name] = np.zeros_like(params[name])
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        if lr == 0.0:
            continue
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    n_checked: int
    per_block: Dict[str, float]

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance


def relative_error(analytic, numeric, floor: float = 1e-6):
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(f: Callable[[], float], inputs: Dict[str, np.ndarray],
               analytic: Dict[str, np.ndarray], step: float = 1e-5,
               max_per_block: Optional[int] = None,
               rng: Optional[np.random.Generator] = None,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``f`` evaluates the scalar objective reading the arrays in ``inputs``,
    which are perturbed in place and restored. ``analytic`` maps the same
    names to gradients. With ``max_per_block`` only that many randomly chosen
    coordinates of each block are probed. The error denominator never drops
    below ``floor``: entries that are truly zero (a bias feeding batchnorm,
    say) only carry round-off in the numeric estimate.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    per_block: Dict[str, float] = {}
    worst, worst_err, n_checked = "", 0.0, 0
    for name, arr in inputs.items():
        grad = np.asarray(analytic[name], dtype=DTYPE)
        if grad.shape != arr.shape:
            raise ShapeError(f"analytic gradient for {name!r} has shape {grad.shape}, "
                             f"expected {arr.shape}")
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError(f"input {name!r} must be contiguous to perturb in place")
        idx = np.arange(flat.size)
        if max_per_block is not None and flat.size > max_per_block:
            idx = np.sort(rng.choice(flat.size, size=max_per_block, replace=False))
        block_err = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            err = float(relative_error(grad.reshape(-1)[i], numeric, floor))
            if err > block_err:
                block_err = err
            if err > worst_err:
                worst_err, worst = err, f"{name}[{i}]"
        per_block[name] = block_err
        n_checked += idx.size
    return GradCheckReport(worst_err, worst, n_checked, per_block)
