"""Language-model backbones that expose first-layer and final-layer hidden states.

A backbone step is split into two halves so the engine can start the
distiller as soon as the first layer has run:

* :meth:`Backbone.shallow_forward` embeds the input tokens and runs layer 1,
  returning ``h1`` for every row plus an opaque pending handle;
* :meth:`Backbone.deep_forward` runs layers ``2..L`` on that handle and
  returns ``hL``, the vector that the LM head projects to logits.

``decode_step`` chains the two for a single sequence.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import tensorio
from .numerics import silu
from .errors import CapacityError, ConfigError, ContractError, DimensionError, InputError

# Where h1 is read from the residual stream: "post-block" takes the residual
# right after layer 1; "post-norm" additionally applies layer 2's input norm.
H1_CAPTURE = "post-block"

PHASE_PREFILL = "prefill"
PHASE_DECODE = "decode"

_RMS_EPS = 1e-6


@dataclass(frozen=True)
class BackboneSpec:
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 2
    max_context: int = 256
    seed: int = 0
    ffn_width: int | None = None  # None -> 4 * d_model

    def __post_init__(self):
        if self.n_layers < 2:
            raise ConfigError("n_layers must be >= 2 (a shallow and a distinct deep layer)")
        if self.vocab_size < 1 or self.d_model < 1 or self.max_context < 1:
            raise ConfigError("vocab_size, d_model and max_context must be positive")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if not 0 <= self.seed < 2**63:
            raise ConfigError("seed must fit in a signed 64-bit integer")
        if self.ffn_width is not None and self.ffn_width < 1:
            raise ConfigError("ffn_width must be positive")

    @property
    def ffn(self) -> int:
        return self.ffn_width if self.ffn_width is not None else 4 * self.d_model


@dataclass
class StepOutput:
    h1: np.ndarray
    hL: np.ndarray
    logits_ref: np.ndarray


@dataclass
class SequenceState:
    """Per-sequence decoding state; owned by exactly one sequence."""

    tokens: list[int] = field(default_factory=list)
    next_input: int = 0
    phase: str = PHASE_PREFILL
    cache: Any = None

    @property
    def position(self) -> int:
        return len(self.tokens)

    def enter_decode(self) -> None:
        if self.phase != PHASE_PREFILL:
            raise ContractError("sequence already left the prefill phase")
        self.phase = PHASE_DECODE


class Backbone(abc.ABC):
    """Interface every backbone implements."""

    spec: BackboneSpec
    head: np.ndarray  # [vocab, d], frozen
    bos_token: int = 0

    @property
    def d_model(self) -> int:
        return self.spec.d_model

    @property
    def vocab_size(self) -> int:
        return self.spec.vocab_size

    def lm_head(self, h: np.ndarray) -> np.ndarray:
        h = np.asarray(h)
        if h.shape[-1] != self.d_model:
            raise DimensionError(f"hidden width {h.shape[-1]} != {self.d_model}")
        return h @ self.head.T

    def head_row(self, token: int) -> np.ndarray:
        return self.head[token]

    def _check_tokens(self, tokens: Sequence[int]) -> None:
        for t in tokens:
            if not 0 <= int(t) < self.vocab_size:
                raise InputError(f"token {t} outside [0, {self.vocab_size})")

    @abc.abstractmethod
    def prefill(self, prompt: Sequence[int]) -> SequenceState:
        """Ingest a prompt.

        All prompt tokens except the last are cached; the last one (or BOS for
        an empty prompt) becomes ``next_input`` for the first decode step, so
        every generated token comes out of a decode step.
        """

    @abc.abstractmethod
    def shallow_forward(self, states: Sequence[SequenceState], tokens: Sequence[int]) -> tuple[np.ndarray, Any]:
        """Run the embedding and layer 1 for one token per state."""

    @abc.abstractmethod
    def deep_forward(self, pending: Any) -> np.ndarray:
        """Finish a step started by :meth:`shallow_forward` and advance the states."""

    def decode_step(self, state: SequenceState, token: int) -> StepOutput:
        if state.phase != PHASE_DECODE:
            raise ContractError("decode_step requires a state in the decode phase")
        h1, pending = self.shallow_forward([state], [token])
        hL = self.deep_forward(pending)
        return StepOutput(h1[0], hL[0], self.lm_head(hL[0]))


def _rmsnorm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + _RMS_EPS) * gain


@dataclass
class _Layer:
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ffn_norm: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray

    def tensors(self) -> list[np.ndarray]:
        return [self.attn_norm, self.wq, self.wk, self.wv, self.wo,
                self.ffn_norm, self.w_gate, self.w_up, self.w_down]


@dataclass
class _KVCache:
    k: np.ndarray  # [L, ctx, d]
    v: np.ndarray


@dataclass
class _Pending:
    states: list[SequenceState]
    tokens: list[int]
    x: np.ndarray


class TinyTransformer(Backbone):
    """Pre-norm decoder-only transformer with learned absolute positions.

    Each layer is ``x + Attn(RMSNorm(x))`` followed by
    ``x + SwiGLU(RMSNorm(x))``; a final RMSNorm produces ``hL`` and an untied,
    bias-free head maps it to logits.  Parameter count::

        2*V*d + ctx*d + L*(2*d + 4*d*d + 3*d*f) + d
    """

    def __init__(self, spec: BackboneSpec, tensors: Sequence[np.ndarray] | None = None,
                 h1_capture: str = H1_CAPTURE):
        if h1_capture not in ("post-block", "post-norm"):
            raise ConfigError(f"unknown h1 capture point {h1_capture!r}")
        self.spec = spec
        self.h1_capture = h1_capture
        self.bos_token = 0
        if tensors is None:
            tensors = self._init_tensors(spec)
        self._unpack(list(tensors))
        for t in self.tensors():
            t.setflags(write=False)

    @staticmethod
    def tensor_shapes(spec: BackboneSpec) -> list[tuple[int, ...]]:
        V, d, f, ctx = spec.vocab_size, spec.d_model, spec.ffn, spec.max_context
        shapes: list[tuple[int, ...]] = [(V, d), (ctx, d)]
        for _ in range(spec.n_layers):
            shapes += [(d,), (d, d), (d, d), (d, d), (d, d), (d,), (d, f), (d, f), (f, d)]
        shapes += [(d,), (V, d)]
        return shapes

    @classmethod
    def parameter_count_formula(cls, spec: BackboneSpec) -> int:
        V, d, f, ctx, L = spec.vocab_size, spec.d_model, spec.ffn, spec.max_context, spec.n_layers
        return 2 * V * d + ctx * d + L * (2 * d + 4 * d * d + 3 * d * f) + d

    @staticmethod
    def _init_tensors(spec: BackboneSpec) -> list[np.ndarray]:
        rng = np.random.default_rng(spec.seed)
        V, d, f, L = spec.vocab_size, spec.d_model, spec.ffn, spec.n_layers
        out = [rng.normal(0.0, 1.0, (V, d)), rng.normal(0.0, 0.3, (spec.max_context, d))]
        res_scale = 1.0 / np.sqrt(2.0 * L)
        for _ in range(L):
            out += [
                np.ones(d),
                rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
                rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
                rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
                rng.normal(0.0, res_scale / np.sqrt(d), (d, d)),
                np.ones(d),
                rng.normal(0.0, 1.0 / np.sqrt(d), (d, f)),
                rng.normal(0.0, 1.0 / np.sqrt(d), (d, f)),
                rng.normal(0.0, res_scale / np.sqrt(f), (f, d)),
            ]
        out += [np.ones(d), rng.normal(0.0, 2.0 / np.sqrt(d), (V, d))]
        return out

    def _unpack(self, tensors: list[np.ndarray]) -> None:
        shapes = self.tensor_shapes(self.spec)
        if len(tensors) != len(shapes):
            raise DimensionError(f"expected {len(shapes)} tensors, got {len(tensors)}")
        for t, s in zip(tensors, shapes):
            if tuple(t.shape) != s:
                raise DimensionError(f"tensor shape {t.shape} != expected {s}")
        tensors = [np.array(t, dtype=np.float64) for t in tensors]
        self.tok_emb, self.pos_emb = tensors[0], tensors[1]
        self.layers = [_Layer(*tensors[2 + 9 * i: 11 + 9 * i]) for i in range(self.spec.n_layers)]
        self.final_norm, self.head = tensors[-2], tensors[-1]

    def tensors(self) -> list[np.ndarray]:
        out = [self.tok_emb, self.pos_emb]
        for layer in self.layers:
            out += layer.tensors()
        out += [self.final_norm, self.head]
        return out

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.tensors()))

    # checkpoint I/O ---------------------------------------------------

    def _header(self) -> list[int]:
        s = self.spec
        return [s.vocab_size, s.d_model, s.n_layers, s.n_heads, s.max_context, s.seed, s.ffn]

    def save(self, path) -> None:
        tensorio.save_file(path, tensorio.KIND_TINY_TRANSFORMER, self._header(), self.tensors())

    @classmethod
    def load(cls, path, h1_capture: str = H1_CAPTURE) -> "TinyTransformer":
        kind, fields, tensors = tensorio.load_file(path)
        if kind != tensorio.KIND_TINY_TRANSFORMER or len(fields) != 7:
            raise InputError("file is not a tiny-transformer checkpoint")
        V, d, L, H, ctx, seed, f = fields
        spec = BackboneSpec(V, d, L, H, ctx, seed, None if f == 4 * d else f)
        return cls(spec, tensors, h1_capture=h1_capture)

    # forward ------------------------------------------------------------

    def _new_cache(self) -> _KVCache:
        s = self.spec
        return _KVCache(np.zeros((s.n_layers, s.max_context, s.d_model)),
                        np.zeros((s.n_layers, s.max_context, s.d_model)))

    def _attend(self, q: np.ndarray, k: np.ndarray, v: np.ndarray, causal: bool) -> np.ndarray:
        # q [n, d], k/v [m, d]; causal masks key j > query offset + i
        H = self.spec.n_heads
        dh = self.spec.d_model // H
        n, m = q.shape[0], k.shape[0]
        qh = q.reshape(n, H, dh).transpose(1, 0, 2)
        kh = k.reshape(m, H, dh).transpose(1, 2, 0)
        vh = v.reshape(m, H, dh).transpose(1, 0, 2)
        scores = (qh @ kh) / np.sqrt(dh)
        if causal and n > 1:
            offset = m - n
            mask = np.arange(m)[None, :] > (np.arange(n)[:, None] + offset)
            scores = np.where(mask[None], -np.inf, scores)
        scores -= scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=-1, keepdims=True)
        return (w @ vh).transpose(1, 0, 2).reshape(n, H * dh)

    def _layer_rows(self, li: int, x: np.ndarray, caches: list[_KVCache], positions: list[int]) -> np.ndarray:
        """One layer for B single-token rows, each with its own cache."""
        layer = self.layers[li]
        n = _rmsnorm(x, layer.attn_norm)
        q, k, v = n @ layer.wq, n @ layer.wk, n @ layer.wv
        attn = np.empty_like(x)
        for b, (cache, pos) in enumerate(zip(caches, positions)):
            cache.k[li, pos] = k[b]
            cache.v[li, pos] = v[b]
            attn[b] = self._attend(q[b:b + 1], cache.k[li, :pos + 1], cache.v[li, :pos + 1], causal=False)[0]
        x = x + attn @ layer.wo
        n = _rmsnorm(x, layer.ffn_norm)
        gate = n @ layer.w_gate
        x = x + (silu(gate) * (n @ layer.w_up)) @ layer.w_down
        return x

    def _h1_view(self, x: np.ndarray) -> np.ndarray:
        if self.h1_capture == "post-norm":
            return _rmsnorm(x, self.layers[1].attn_norm)
        return x.copy()

    def prefill(self, prompt: Sequence[int]) -> SequenceState:
        prompt = [int(t) for t in prompt]
        self._check_tokens(prompt)
        if len(prompt) > self.spec.max_context:
            raise CapacityError("prompt longer than the context window")
        state = SequenceState(cache=self._new_cache())
        body = prompt[:-1]
        state.next_input = prompt[-1] if prompt else self.bos_token
        if body:
            n = len(body)
            x = self.tok_emb[body] + self.pos_emb[:n]
            for li, layer in enumerate(self.layers):
                h = _rmsnorm(x, layer.attn_norm)
                q, k, v = h @ layer.wq, h @ layer.wk, h @ layer.wv
                state.cache.k[li, :n] = k
                state.cache.v[li, :n] = v
                x = x + self._attend(q, k, v, causal=True) @ layer.wo
                h = _rmsnorm(x, layer.ffn_norm)
                gate = h @ layer.w_gate
                x = x + (silu(gate) * (h @ layer.w_up)) @ layer.w_down
            state.tokens = list(body)
        state.enter_decode()
        return state

    def shallow_forward(self, states, tokens):
        states = list(states)
        tokens = [int(t) for t in tokens]
        if len(states) != len(tokens):
            raise DimensionError("one token per state is required")
        self._check_tokens(tokens)
        positions = [s.position for s in states]
        for p in positions:
            if p >= self.spec.max_context:
                raise CapacityError("context window exhausted")
        x = self.tok_emb[tokens] + self.pos_emb[positions]
        x = self._layer_rows(0, x, [s.cache for s in states], positions)
        return self._h1_view(x), _Pending(states, tokens, x)

    def deep_forward(self, pending: _Pending) -> np.ndarray:
        states = pending.states
        caches = [s.cache for s in states]
        positions = [s.position for s in states]
        x = pending.x
        for li in range(1, self.spec.n_layers):
            x = self._layer_rows(li, x, caches, positions)
        hL = _rmsnorm(x, self.final_norm)
        for s, t in zip(states, pending.tokens):
            s.tokens.append(t)
        return hL


def build_tiny_transformer(spec: BackboneSpec | None = None, checkpoint=None,
                           h1_capture: str = H1_CAPTURE) -> TinyTransformer:
    """Seeded tiny transformer, or one loaded from a checkpoint file."""
    if checkpoint is not None:
        return TinyTransformer.load(checkpoint, h1_capture=h1_capture)
    return TinyTransformer(spec or BackboneSpec(), h1_capture=h1_capture)
