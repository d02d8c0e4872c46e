"""Online latent distiller: a residual gated-SwiGLU MLP mapping h1 to hL.

``f(x) = x1 + B2(x1)`` with ``x1 = x + B1(x)`` and
``B(x) = W_down(silu(W_gate x) * (W_up x))``.  Trained one Adam step at a time
on the batch-averaged squared error ``mean_i ||hL_i - f(h1_i)||^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensorio
from .errors import ContractError, DimensionError, InputError, NumericError
from .numerics import AdamState, SwiGLUWeights, adam_step, gated_swiglu_backward, gated_swiglu_forward

N_BLOCKS = 2
DEFAULT_WIDTH = 384
LEARNING_RATE = 4e-4
ADAM_EPS = 1e-4
CLIP_NORM = 0.5

SCOPE_SHARED = "shared"
SCOPE_PER_PROMPT = "per-prompt"


@dataclass
class DistillerState:
    d: int
    width: int
    seed: int
    params: np.ndarray  # flat parameter buffer; blocks hold views into it
    blocks: list[SwiGLUWeights]
    adam: AdamState
    updates: int = 0
    skipped: int = 0

    @property
    def n_params(self) -> int:
        return int(self.params.size)

    def tensors(self) -> list[np.ndarray]:
        return [t for b in self.blocks for t in b]


def _shapes(d: int, w: int) -> list[tuple[int, int]]:
    return [(d, w), (d, w), (w, d)] * N_BLOCKS


def _views(flat: np.ndarray, d: int, w: int) -> list[SwiGLUWeights]:
    views, off = [], 0
    for shape in _shapes(d, w):
        n = shape[0] * shape[1]
        views.append(flat[off:off + n].reshape(shape))
        off += n
    return [SwiGLUWeights(*views[i:i + 3]) for i in range(0, len(views), 3)]


def parameter_count(d: int, width: int = DEFAULT_WIDTH) -> int:
    return N_BLOCKS * 3 * d * width


def init_distiller(d: int, width: int = DEFAULT_WIDTH, seed: int = 0, *, lr: float = LEARNING_RATE,
                   eps: float = ADAM_EPS, clip_norm: float | None = CLIP_NORM) -> DistillerState:
    """Fresh distiller with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and zeroed Adam buffers."""
    if d <= 0 or width <= 0:
        raise DimensionError("distiller widths must be positive")
    rng = np.random.default_rng(seed)
    flat = np.empty(parameter_count(d, width))
    off = 0
    for rows, cols in _shapes(d, width):
        bound = 1.0 / np.sqrt(rows)
        flat[off:off + rows * cols] = rng.uniform(-bound, bound, rows * cols)
        off += rows * cols
    adam = AdamState([np.zeros_like(flat)], [np.zeros_like(flat)], lr=lr, eps=eps, clip_norm=clip_norm)
    return DistillerState(d, width, seed, flat, _views(flat, d, width), adam)


@dataclass
class PredictCache:
    x: np.ndarray
    block_caches: list
    y: np.ndarray
    stamp: int
    owner: int = field(default=0)


def _as_batch(h: np.ndarray, d: int) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 1:
        h = h[None, :]
    if h.ndim != 2 or h.shape[1] != d:
        raise DimensionError(f"expected rows of width {d}, got shape {h.shape}")
    return h


def _forward(state: DistillerState, x: np.ndarray) -> PredictCache:
    caches = []
    h = x
    for block in state.blocks:
        out, c = gated_swiglu_forward(h, block)
        caches.append(c)
        h = h + out
    return PredictCache(x, caches, h, state.updates, id(state))


def predict(state: DistillerState, h1_batch: np.ndarray, keep_cache: bool = False):
    """Predicted hL for each row of ``h1_batch``; pure.

    With ``keep_cache`` the forward cache is returned too, so a following
    :func:`train_step` on the same rows can skip its own forward pass.
    """
    x = _as_batch(h1_batch, state.d)
    cache = _forward(state, x)
    return (cache.y, cache) if keep_cache else cache.y


def _check_batch(state: DistillerState, h1_batch: np.ndarray, hL_batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = _as_batch(h1_batch, state.d)
    target = _as_batch(hL_batch, state.d)
    if x.shape[0] == 0:
        raise ContractError("empty training batch")
    if x.shape != target.shape:
        raise DimensionError(f"h1 batch {x.shape} and hL batch {target.shape} differ")
    return x, target


def _loss_and_gradient(state: DistillerState, x: np.ndarray, target: np.ndarray,
                       cache: PredictCache) -> tuple[float, np.ndarray]:
    B = x.shape[0]
    diff = cache.y - target
    loss = float(np.sum(diff * diff, dtype=np.float64)) / B
    grad = (2.0 / B) * diff
    grads: list[SwiGLUWeights] = [None] * len(state.blocks)  # type: ignore[list-item]
    for i in range(len(state.blocks) - 1, -1, -1):
        g_in, g_w = gated_swiglu_backward(grad, cache.block_caches[i])
        grads[i] = g_w
        grad = grad + g_in
    return loss, np.concatenate([g.ravel() for gw in grads for g in gw])


def loss_and_gradient(state: DistillerState, h1_batch: np.ndarray, hL_batch: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch MSE and its exact gradient w.r.t. the flat parameter buffer; pure."""
    x, target = _check_batch(state, h1_batch, hL_batch)
    return _loss_and_gradient(state, x, target, _forward(state, x))


def train_step(state: DistillerState, h1_batch: np.ndarray, hL_batch: np.ndarray,
               cache: PredictCache | None = None) -> float:
    """One clipped Adam step on the batch MSE; returns the pre-update loss.

    Non-finite inputs or gradients raise NumericError without touching the
    parameters (``state.skipped`` counts them).
    """
    x, target = _check_batch(state, h1_batch, hL_batch)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(target))):
        state.skipped += 1
        raise NumericError("non-finite hidden states; distiller update skipped")
    if cache is None:
        cache = _forward(state, x)
    elif cache.stamp != state.updates or cache.owner != id(state) or cache.x.shape != x.shape:
        raise ContractError("stale or foreign predict cache")
    loss, flat_grad = _loss_and_gradient(state, x, target, cache)
    try:
        adam_step([state.params], [flat_grad], state.adam)
    except NumericError:
        state.skipped += 1
        raise
    state.updates += 1
    return loss


def novelty_error(state: DistillerState, h1: np.ndarray, hL: np.ndarray) -> tuple[np.ndarray, np.ndarray | float]:
    """Latent error ``hL - f(h1)`` and its L2 norm (per row for batches)."""
    single = np.ndim(h1) == 1
    x = _as_batch(h1, state.d)
    t = _as_batch(hL, state.d)
    if x.shape != t.shape:
        raise DimensionError("h1 and hL shapes differ")
    e = t - predict(state, x)
    norms = np.sqrt(np.sum(e * e, axis=1))
    if single:
        return e[0], float(norms[0])
    return e, norms


# snapshots --------------------------------------------------------------


def save_snapshot(state: DistillerState, path) -> None:
    header = [state.d, state.width, N_BLOCKS, state.seed, state.updates, state.adam.t]
    shapes = _shapes(state.d, state.width)
    m_views = [v for b in _views(state.adam.m[0], state.d, state.width) for v in b]
    v_views = [v for b in _views(state.adam.v[0], state.d, state.width) for v in b]
    assert len(m_views) == len(shapes)
    tensorio.save_file(path, tensorio.KIND_DISTILLER, header, state.tensors() + m_views + v_views)


def load_snapshot(path) -> DistillerState:
    kind, fields, tensors = tensorio.load_file(path)
    if kind != tensorio.KIND_DISTILLER or len(fields) != 6:
        raise InputError("file is not a distiller snapshot")
    d, w, n_blocks, seed, updates, t = fields
    if n_blocks != N_BLOCKS or len(tensors) != 9 * N_BLOCKS:
        raise InputError("unsupported distiller block count")
    state = init_distiller(d, w, seed)
    k = 3 * N_BLOCKS
    state.params[:] = np.concatenate([a.ravel() for a in tensors[:k]])
    state.adam.m[0][:] = np.concatenate([a.ravel() for a in tensors[k:2 * k]])
    state.adam.v[0][:] = np.concatenate([a.ravel() for a in tensors[2 * k:]])
    state.adam.t = t
    state.updates = updates
    return state


class DistillerScope:
    """Routes sequences to distillers: one shared state, or one per prompt."""

    def __init__(self, kind: str, n_prompts: int, d: int, width: int = DEFAULT_WIDTH, seed: int = 0):
        if kind not in (SCOPE_SHARED, SCOPE_PER_PROMPT):
            raise ContractError(f"unknown distiller scope {kind!r}")
        self.kind = kind
        self.n_prompts = n_prompts
        count = 1 if kind == SCOPE_SHARED else n_prompts
        self.states = [init_distiller(d, width, seed) for _ in range(count)]

    def route(self, prompt_index: int) -> int:
        """Index of the distiller that serves sequences of ``prompt_index``."""
        if not 0 <= prompt_index < self.n_prompts:
            raise ContractError(f"unknown prompt id {prompt_index}")
        return 0 if self.kind == SCOPE_SHARED else prompt_index

    def state_for(self, prompt_index: int) -> DistillerState:
        return self.states[self.route(prompt_index)]

    def groups(self, prompt_indices: Sequence[int]) -> dict[int, list[int]]:
        """Row positions grouped by the distiller that owns them."""
        out: dict[int, list[int]] = {}
        for row, p in enumerate(prompt_indices):
            out.setdefault(self.route(p), []).append(row)
        return out
