"""Small float64 neural-network toolkit: dense layers, an LSTM cell with BPTT,
softmax sampling, global-norm clipping, Adam, and a finite-difference checker."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh", "linear")


def _as_2d(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float = 1.0):
    a = rng.standard_normal(shape)
    u, _, vt = np.linalg.svd(a, full_matrices=False)
    q = u if u.shape == shape else vt
    return gain * q


class Dense:
    """``y = act(x W^T + b)`` on row-batched inputs of shape ``(B, n_in)``."""

    def __init__(self, n_in: int, n_out: int, activation: str = "relu",
                 rng: np.random.Generator | None = None, scale: float = 1.0):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.n_in, self.n_out, self.activation = n_in, n_out, activation
        if rng is None:
            self.W = np.zeros((n_out, n_in))
        else:
            limit = scale * np.sqrt(6.0 / (n_in + n_out))
            self.W = rng.uniform(-limit, limit, size=(n_out, n_in))
        self.b = np.zeros(n_out)

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def forward(self, x):
        x = _as_2d(x)
        if x.shape[1] != self.n_in:
            raise ValueError(f"Dense expects {self.n_in} inputs, got {x.shape[1]}")
        z = x @ self.W.T + self.b
        if self.activation == "relu":
            y = np.maximum(z, 0.0)
        elif self.activation == "tanh":
            y = np.tanh(z)
        else:
            y = z
        return y, (x, z, y)

    def backward(self, cache, dy):
        x, z, y = cache
        dy = _as_2d(dy)
        if dy.shape != y.shape:
            raise ValueError(f"upstream gradient shape {dy.shape} != output shape {y.shape}")
        if self.activation == "relu":
            dz = dy * (z > 0)
        elif self.activation == "tanh":
            dz = dy * (1.0 - y * y)
        else:
            dz = dy
        grads = {"W": dz.T @ x, "b": dz.sum(axis=0)}
        return dz @ self.W, grads


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class LSTMStepCache:
    xh: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray


class LSTMCell:
    """Standard LSTM cell; gate rows are stacked as (input, forget, cell, output)."""

    def __init__(self, n_in: int, hidden: int = 64, rng: np.random.Generator | None = None):
        self.n_in, self.hidden = n_in, hidden
        H = hidden
        self.W = np.zeros((4 * H, n_in + H))
        if rng is not None:
            limit = np.sqrt(6.0 / (n_in + H))
            self.W[:, :n_in] = rng.uniform(-limit, limit, size=(4 * H, n_in))
            for k in range(4):
                self.W[k * H:(k + 1) * H, n_in:] = orthogonal(rng, (H, H))
        self.b = np.zeros(4 * H)

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def step(self, x, h_prev, c_prev):
        x, h_prev, c_prev = _as_2d(x), _as_2d(h_prev), _as_2d(c_prev)
        if x.shape[1] != self.n_in:
            raise ValueError(f"LSTM expects {self.n_in} inputs, got {x.shape[1]}")
        H = self.hidden
        xh = np.concatenate([x, h_prev], axis=1)
        z = xh @ self.W.T + self.b
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = sigmoid(z[:, 3 * H:])
        c = f * c_prev + i * g
        tanh_c = np.tanh(c)
        h = o * tanh_c
        return h, c, LSTMStepCache(xh, c_prev, i, f, g, o, tanh_c)

    def step_backward(self, cache: LSTMStepCache, dh, dc, grads=None):
        """Backprop one step; accumulates into ``grads`` and returns ``(dx, dh_prev, dc_prev)``."""
        if cache is None:
            raise ValueError("LSTM backward requires the forward cache")
        if grads is None:
            grads = {"W": np.zeros_like(self.W), "b": np.zeros_like(self.b)}
        do = dh * cache.tanh_c
        dc = dc + dh * cache.o * (1.0 - cache.tanh_c ** 2)
        di = dc * cache.g
        df = dc * cache.c_prev
        dg = dc * cache.i
        dc_prev = dc * cache.f
        dz = np.concatenate([
            di * cache.i * (1.0 - cache.i),
            df * cache.f * (1.0 - cache.f),
            dg * (1.0 - cache.g ** 2),
            do * cache.o * (1.0 - cache.o),
        ], axis=1)
        grads["W"] += dz.T @ cache.xh
        grads["b"] += dz.sum(axis=0)
        dxh = dz @ self.W
        return dxh[:, :self.n_in], dxh[:, self.n_in:], dc_prev

    def forward_sequence(self, X, h0=None, c0=None):
        """Run over ``X`` of shape ``(T, n_in)`` (batch of one); returns ``(H, caches)``."""
        X = np.asarray(X, dtype=np.float64)
        h = np.zeros((1, self.hidden)) if h0 is None else _as_2d(h0)
        c = np.zeros((1, self.hidden)) if c0 is None else _as_2d(c0)
        out = np.empty((X.shape[0], self.hidden))
        caches = []
        for t in range(X.shape[0]):
            h, c, cache = self.step(X[t], h, c)
            out[t] = h[0]
            caches.append(cache)
        return out, caches

    def bptt(self, caches, dH):
        """Backpropagation through time for a sequence produced by ``forward_sequence``."""
        if not caches:
            raise ValueError("LSTM BPTT requires a non-empty sequence cache")
        grads = {"W": np.zeros_like(self.W), "b": np.zeros_like(self.b)}
        T = len(caches)
        dX = np.empty((T, self.n_in))
        dh_next = np.zeros((1, self.hidden))
        dc_next = np.zeros((1, self.hidden))
        for t in reversed(range(T)):
            dx, dh_next, dc_next = self.step_backward(caches[t], dH[t][None, :] + dh_next,
                                                      dc_next, grads)
            dX[t] = dx[0]
        return dX, grads, dh_next, dc_next


# -- softmax ------------------------------------------------------------------

def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_sample(logits, rng: np.random.Generator | None = None, greedy: bool = False):
    """Sample a categorical index from ``softmax(logits)``.

    Returns ``(index, log_prob, probs)``; with ``greedy`` the argmax is taken.
    """
    logits = np.asarray(logits, dtype=np.float64).ravel()
    logp = log_softmax(logits)
    probs = np.exp(logp)
    if greedy:
        idx = int(np.argmax(logits))
    else:
        idx = int(rng.choice(len(probs), p=probs))
    return idx, float(logp[idx]), probs


# -- optimisation ---------------------------------------------------------------

def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: dict[str, np.ndarray], clip_norm: float):
    """Scale all gradients by ``min(1, clip_norm / norm)``; returns ``(clipped, norm)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block '{name}'")
    norm = global_norm(grads)
    if clip_norm is None or norm <= clip_norm:
        return dict(grads), norm
    scale = clip_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


class Adam:
    """Adam with bias correction; parameters are updated in place."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


@dataclass
class OptimizerState:
    """One Adam optimiser per parameter group plus the shared clip norm.

    ``groups`` maps a group name to ``(Adam, predicate on parameter name)``.
    """

    groups: dict[str, tuple[Adam, Callable[[str], bool]]] = field(default_factory=dict)
    clip_norm: float | None = 40.0
    last_norm: float = 0.0


def clip_and_update(opt: OptimizerState, params: dict[str, np.ndarray],
                    grads: dict[str, np.ndarray]) -> float:
    """Global-norm clip ``grads`` and apply each group's Adam step; returns the raw norm."""
    clipped, norm = clip_by_global_norm(grads, opt.clip_norm)
    opt.last_norm = norm
    for adam, member in opt.groups.values():
        sub = {k: g for k, g in clipped.items() if member(k)}
        if sub:
            adam.update(params, sub)
    return norm


# -- gradient checking ------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst: tuple[str, tuple[int, ...]] | None
    threshold: float
    expect_failure: bool = False  # negative controls pass when the mismatch is detected

    @property
    def passed(self) -> bool:
        return (self.max_rel_error < self.threshold) != self.expect_failure

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        kind = "negative control " if self.expect_failure else ""
        return (f"{kind}gradcheck {status}: max relative error {self.max_rel_error:.3e} over "
                f"{self.n_checked} coordinates (threshold {self.threshold:.0e}, worst {self.worst})")


def finite_diff_check(loss_fn: Callable[[], float], params: dict[str, np.ndarray],
                      grads: dict[str, np.ndarray], n_samples: int = 200, step: float = 1e-5,
                      rng: np.random.Generator | None = None, threshold: float = 1e-4,
                      floor: float = 1e-5) -> GradCheckReport:
    """Compare analytic ``grads`` against central differences of ``loss_fn``.

    ``loss_fn`` is re-evaluated after each in-place perturbation of ``params``.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``: coordinates whose
    gradient is below ``floor`` are compared on an absolute scale, since their
    central differences are dominated by roundoff (about ``eps * |loss| / step``).
    ``n_samples`` coordinates are drawn uniformly over all blocks (all of them
    if fewer exist).
    """
    rng = rng or np.random.default_rng(0)
    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    total = int(sizes.sum())
    if total <= n_samples:
        flat = np.arange(total)
    else:
        flat = np.sort(rng.choice(total, size=n_samples, replace=False))
    offsets = np.concatenate(([0], np.cumsum(sizes)))
    worst, worst_err = None, 0.0
    for f in flat:
        b = int(np.searchsorted(offsets, f, side="right") - 1)
        name = names[b]
        p = params[name]
        idx = np.unravel_index(int(f - offsets[b]), p.shape)
        orig = p[idx]
        p[idx] = orig + step
        lp = loss_fn()
        p[idx] = orig - step
        lm = loss_fn()
        p[idx] = orig
        num = (lp - lm) / (2.0 * step)
        ana = float(grads[name][idx])
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        if err > worst_err or worst is None:
            worst_err, worst = err, (name, tuple(int(i) for i in idx))
    return GradCheckReport(float(worst_err), len(flat), worst, threshold)
