"""Small dense-network kernel with hand-written gradients.

Everything trains in float64. All MLPs are ``Linear -> ReLU -> Linear``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

COS_EPS = 1e-12
BCE_EPS = 1e-7


@dataclass
class MlpParams:
    W1: np.ndarray  # (hidden, in)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (out, hidden)
    b2: np.ndarray  # (out,)

    NAMES = ("W1", "b1", "W2", "b2")

    @classmethod
    def init(cls, n_in: int, hidden: int, n_out: int, rng: np.random.Generator) -> "MlpParams":
        """Uniform in +-1/sqrt(fan_in) for weights and biases."""
        a1, a2 = 1.0 / np.sqrt(n_in), 1.0 / np.sqrt(hidden)
        return cls(
            rng.uniform(-a1, a1, size=(hidden, n_in)),
            rng.uniform(-a1, a1, size=hidden),
            rng.uniform(-a2, a2, size=(n_out, hidden)),
            rng.uniform(-a2, a2, size=n_out),
        )

    @classmethod
    def zeros(cls, n_in: int, hidden: int, n_out: int) -> "MlpParams":
        return cls(np.zeros((hidden, n_in)), np.zeros(hidden), np.zeros((n_out, hidden)), np.zeros(n_out))

    @property
    def n_in(self) -> int:
        return self.W1.shape[1]

    @property
    def n_out(self) -> int:
        return self.W2.shape[0]

    def tensors(self, prefix: str) -> dict:
        return {f"{prefix}.{n}": getattr(self, n) for n in self.NAMES}

    @classmethod
    def from_tensors(cls, tensors: dict, prefix: str) -> "MlpParams":
        return cls(*(np.array(tensors[f"{prefix}.{n}"], dtype=np.float64) for n in cls.NAMES))

    def copy(self) -> "MlpParams":
        return MlpParams(*(getattr(self, n).copy() for n in self.NAMES))


def mlp_forward(p: MlpParams, x):
    """Return ``(y, cache)``; ``x`` may be one vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.n_in:
        raise ValueError(f"input dimension {x.shape[-1]} != {p.n_in}")
    pre = x @ p.W1.T + p.b1
    h = np.maximum(pre, 0.0)
    y = h @ p.W2.T + p.b2
    return y, (x, pre, h)


def mlp_backward(p: MlpParams, cache, dy, need_dx: bool = True):
    """Return ``(grads, dx)`` for upstream gradient ``dy`` (dx is None if unused)."""
    x, pre, h = cache
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != pre.shape[:-1] + (p.n_out,):
        raise ValueError(f"upstream gradient shape {dy.shape} does not match output")
    if x.ndim == 1:
        dW2 = np.outer(dy, h)
        db2 = dy.copy()
        dh = p.W2.T @ dy
        dpre = dh * (pre > 0)
        dW1 = np.outer(dpre, x)
        db1 = dpre
    else:
        dW2 = dy.T @ h
        db2 = dy.sum(axis=0)
        dh = dy @ p.W2
        dpre = dh * (pre > 0)
        dW1 = dpre.T @ x
        db1 = dpre.sum(axis=0)
    dx = dpre @ p.W1 if need_dx else None
    return MlpParams(dW1, db1, dW2, db2), dx


# -- similarity ---------------------------------------------------------------

def normalize_rows(X):
    """Rows divided by ``max(norm, eps)``; returns ``(Xn, norms)``."""
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    return X / np.maximum(norms, COS_EPS), norms


def normalize_rows_backward(X, norms, dXn):
    live = norms > COS_EPS
    denom = np.maximum(norms, COS_EPS)
    proj = np.sum(dXn * X, axis=-1, keepdims=True)
    return dXn / denom - np.where(live, X * proj / denom ** 3, 0.0)


def cosine(x, y) -> float:
    xn, _ = normalize_rows(x)
    yn, _ = normalize_rows(y)
    return float(np.dot(xn, yn))


def cosine_grad(x, y):
    """Return ``(cos, d cos/dx, d cos/dy)``."""
    xn, nx = normalize_rows(x)
    yn, ny = normalize_rows(y)
    c = float(np.dot(xn, yn))
    return c, normalize_rows_backward(np.asarray(x, float), nx, yn), normalize_rows_backward(
        np.asarray(y, float), ny, xn)


def cosine_matrix(X, T):
    """Pairwise cosines of rows of X (n,d) against rows of T (k,d)."""
    Xn, nx = normalize_rows(X)
    Tn, nt = normalize_rows(T)
    return Xn @ Tn.T, (X, Xn, nx, T, Tn, nt)


def cosine_matrix_backward(cache, dC):
    X, Xn, nx, T, Tn, nt = cache
    dX = normalize_rows_backward(X, nx, dC @ Tn)
    dT = normalize_rows_backward(T, nt, dC.T @ Xn)
    return dX, dT


# -- probabilities and losses -------------------------------------------------

def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softmax_temp(logits, tau: float):
    """Softmax of ``logits / tau`` along the last axis."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def bce_terms(z, t):
    """Per-element BCE of ``sigmoid(z)`` vs ``t`` and its derivative w.r.t. ``z``.

    The probability is clamped to ``[BCE_EPS, 1 - BCE_EPS]``; where the clamp is
    active the derivative is zero.
    """
    p = sigmoid(z)
    t = np.asarray(t, dtype=np.float64)
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    loss = -(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))
    active = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
    # d/dz of -[t log s + (1-t) log(1-s)] = s - t
    dz = np.where(active, p - t, 0.0)
    return loss, dz


def bce_loss(p, t) -> float:
    """Mean binary cross-entropy of probabilities ``p`` against ``t``."""
    p = np.clip(np.asarray(p, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    t = np.asarray(t, dtype=np.float64)
    return float(np.mean(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))))


def bce_with_logits(z, t):
    """Mean BCE and its gradient w.r.t. the pre-sigmoid input."""
    loss, dz = bce_terms(z, t)
    n = loss.size
    return float(loss.mean()), dz / n


def l1_loss(x, y):
    """Mean absolute difference and its subgradient w.r.t. ``x`` (0 at ties)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    diff = x - y
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


# -- optimisation -------------------------------------------------------------

@dataclass
class LearnableScalar:
    """A positive scalar optimised through its logarithm."""

    value: float  # log of the scalar

    @classmethod
    def from_positive(cls, x: float) -> "LearnableScalar":
        return cls(float(np.log(x)))

    @property
    def exp(self) -> float:
        return float(np.exp(self.value))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    counts: dict = field(default_factory=dict)  # per-parameter update counts

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(a, dtype=np.float64) for k, a in params.items()},
                   {k: np.zeros_like(a, dtype=np.float64) for k, a in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam; updates ``params`` arrays and ``state`` in place.

    Only parameters present in ``grads`` move, and bias correction uses each
    parameter's own update count, so sparsely updated tensors are not
    over-corrected.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
    state.step += 1
    for name, g in grads.items():
        t = state.counts.get(name, 0) + 1
        state.counts[name] = t
        bc1 = 1.0 - beta1 ** t
        bc2 = 1.0 - beta2 ** t
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        denom = np.sqrt(v / bc2)
        denom += eps
        params[name] -= (lr / bc1) * m / denom
    return state


class GradCheck(NamedTuple):
    max_rel_error: float
    worst_param: str
    worst_index: tuple


def finite_diff_check(loss_fn: Callable, params: dict, eps: float = 1e-5,
                      max_coords: int | None = None, seed: int = 0,
                      floor: float = 1e-6) -> GradCheck:
    """Compare analytic gradients with central differences.

    ``loss_fn(params) -> (loss, grads)``. Parameters are perturbed in place and
    restored. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``. With ``max_coords`` set, that many
    coordinates per tensor are sampled (seeded) instead of all of them.
    """
    _, grads = loss_fn(params)
    grads = {k: np.array(v, dtype=np.float64) for k, v in grads.items()}
    rng = np.random.default_rng(seed)
    worst = GradCheck(0.0, "", ())
    for name in sorted(grads):
        arr = params[name]
        flat_idx = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            flat_idx = np.sort(rng.choice(arr.size, size=max_coords, replace=False))
        for fi in flat_idx:
            idx = np.unravel_index(fi, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + eps
            lp = loss_fn(params)[0]
            arr[idx] = orig - eps
            lm = loss_fn(params)[0]
            arr[idx] = orig
            num = (lp - lm) / (2.0 * eps)
            ana = grads[name][idx]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            if err > worst.max_rel_error:
                worst = GradCheck(float(err), name, tuple(int(i) for i in idx))
    return worst
