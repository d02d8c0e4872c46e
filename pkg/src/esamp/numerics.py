"""Dense numeric kernels: products, softmax, the gated SwiGLU block, Adam, Jacobi eigenvalues.

Everything works on float64 numpy arrays unless a caller explicitly passes
float32 (the throughput benchmark path).  Reductions are always accumulated in
float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit shape checking.

    Backed by the BLAS that numpy links against; for identical shapes and
    thread count the result is bit-reproducible run to run.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError("matmul needs at least 1-d operands")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains NaN or Inf")


def log_softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row-wise log-softmax of ``logits / temperature``.

    ``-inf`` entries are allowed (masked tokens) as long as each row keeps at
    least one finite value; NaN and ``+inf`` are rejected.
    """
    if not temperature > 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    x = np.asarray(logits, dtype=np.float64)
    if np.any(np.isnan(x)) or np.any(x == np.inf):
        raise NumericError("logits contain NaN or +Inf")
    if temperature != 1.0:
        x = x / temperature
    m = np.max(x, axis=-1, keepdims=True)
    if np.any(m == -np.inf):
        raise NumericError("all logits are -inf")
    shifted = x - m
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    return shifted - lse


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Numerically stable softmax of ``logits / temperature`` along the last axis."""
    if not temperature > 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    x = np.asarray(logits, dtype=np.float64)
    if np.any(np.isnan(x)) or np.any(x == np.inf):
        raise NumericError("logits contain NaN or +Inf")
    if temperature != 1.0:
        x = x / temperature
    m = np.max(x, axis=-1, keepdims=True)
    if np.any(m == -np.inf):
        raise NumericError("all logits are -inf")
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return s + x * s * (1.0 - s)


class SwiGLUWeights(NamedTuple):
    """Weights of one gated SwiGLU block, stored for row-vector inputs.

    ``gate`` and ``up`` are ``[d_in, width]``; ``down`` is ``[width, d_out]``.
    """

    gate: np.ndarray
    up: np.ndarray
    down: np.ndarray


@dataclass
class SwiGLUCache:
    x: np.ndarray
    pre_gate: np.ndarray
    up: np.ndarray
    act: np.ndarray
    hidden: np.ndarray
    weights: SwiGLUWeights
    out_shape: tuple
    used: bool = False


def gated_swiglu_forward(x: np.ndarray, w: SwiGLUWeights) -> tuple[np.ndarray, SwiGLUCache]:
    """``y = (silu(x W_gate) * (x W_up)) W_down`` for a vector or a batch of rows."""
    x = np.asarray(x)
    d_in, width = w.gate.shape
    if w.up.shape != (d_in, width) or w.down.shape[0] != width:
        raise DimensionError(
            f"inconsistent SwiGLU weights: gate {w.gate.shape}, up {w.up.shape}, down {w.down.shape}"
        )
    if x.shape[-1] != d_in:
        raise DimensionError(f"input width {x.shape[-1]} != block width {d_in}")
    pre_gate = x @ w.gate
    up = x @ w.up
    act = silu(pre_gate)
    hidden = act * up
    y = hidden @ w.down
    return y, SwiGLUCache(x, pre_gate, up, act, hidden, w, y.shape)


def gated_swiglu_backward(
    grad_y: np.ndarray, cache: SwiGLUCache
) -> tuple[np.ndarray, SwiGLUWeights]:
    """Exact gradients of the SwiGLU block given the upstream gradient.

    A cache may be consumed once; reusing it raises ContractError because the
    weights it captured may since have been updated in place.
    """
    grad_y = np.asarray(grad_y)
    if cache.used:
        raise ContractError("SwiGLU cache already consumed by a backward pass")
    if grad_y.shape != cache.out_shape:
        raise ContractError(f"grad shape {grad_y.shape} does not match cached output {cache.out_shape}")
    cache.used = True
    w = cache.weights
    x2 = cache.x.reshape(-1, cache.x.shape[-1])
    g2 = grad_y.reshape(-1, grad_y.shape[-1])
    hid2 = cache.hidden.reshape(-1, cache.hidden.shape[-1])
    g_down = hid2.T @ g2
    d_hidden = g2 @ w.down.T
    up2 = cache.up.reshape(d_hidden.shape)
    d_up = d_hidden * cache.act.reshape(d_hidden.shape)
    d_pre = d_hidden * up2 * silu_grad(cache.pre_gate.reshape(d_hidden.shape))
    g_gate = x2.T @ d_pre
    g_up = x2.T @ d_up
    grad_x = d_pre @ w.gate.T + d_up @ w.up.T
    return grad_x.reshape(cache.x.shape), SwiGLUWeights(g_gate, g_up, g_down)


def global_norm(arrays: Sequence[np.ndarray]) -> float:
    total = 0.0
    for a in arrays:
        a64 = np.asarray(a, dtype=np.float64).ravel()
        total += float(np.dot(a64, a64))
    return float(np.sqrt(total))


@dataclass
class AdamState:
    """Moment buffers and hyper-parameters for bias-corrected Adam with global-norm clipping."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 4e-4
    eps: float = 1e-4
    clip_norm: float | None = 0.5
    t: int = 0
    beta1: float = field(default=ADAM_BETA1)
    beta2: float = field(default=ADAM_BETA2)

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> float:
    """Apply one clipped Adam update to ``params`` in place.

    Gradients are rescaled so their global L2 norm is at most
    ``state.clip_norm``, then the bias-corrected Adam rule is applied.
    Returns the pre-clip global gradient norm.  Non-finite gradients raise
    NumericError and leave params and state untouched.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and Adam buffers must have equal length")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise NumericError("non-finite gradient; Adam update skipped")
    scale = 1.0
    if state.clip_norm is not None and norm > state.clip_norm:
        scale = state.clip_norm / norm
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    step = state.lr / bc1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        # one scratch buffer per tensor keeps the update free of large temporaries
        g = g * scale if scale != 1.0 else g
        tmp = np.multiply(g, 1.0 - b1)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        np.divide(v, bc2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= step
        p -= tmp
    return norm


@lru_cache(maxsize=64)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Disjoint index pairings covering every (p, q) once per sweep (circle method)."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def sym_eigenvalues(k: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.

    Rotations on disjoint index pairs commute, so each round of the
    round-robin ordering is applied as one vectorized update.  Iterates until
    the off-diagonal Frobenius norm is below ``tol * ||K||_F``.
    """
    a = np.array(k, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got {a.shape}")
    _check_finite(a, "matrix")
    n = a.shape[0]
    if n == 0:
        return np.zeros(0)
    if np.max(np.abs(a - a.T)) > 1e-9:
        raise ContractError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    fro = float(np.linalg.norm(a))
    if n == 1 or fro == 0.0:
        return np.sort(np.diag(a).copy())
    target = tol * fro
    rounds = _round_robin(n)
    offdiag_mask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = float(np.sqrt(np.sum(a[offdiag_mask] ** 2)))
        if off < target:
            break
        for ps, qs in rounds:
            apq = a[ps, qs]
            nz = np.abs(apq) > 1e-300
            if not np.any(nz):
                continue
            p, q, apq = ps[nz], qs[nz], apq[nz]
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t[theta == 0] = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rp = a[p, :].copy()
            rq = a[q, :]
            a[p, :] = c[:, None] * rp - s[:, None] * rq
            a[q, :] = s[:, None] * rp + c[:, None] * rq
            cp = a[:, p].copy()
            cq = a[:, q]
            a[:, p] = cp * c - cq * s
            a[:, q] = cp * s + cq * c
    return np.sort(np.diag(a).copy())
