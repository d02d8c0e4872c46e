"""Analytic branch-and-mode backbone used as a controllable exploration testbed.

Each sequence walks a small automaton driven by the tokens it consumes:

``warmup``
    the first ``warmup`` positions: looks exactly like the preamble (same
    logits, same hidden code) but ``go`` does not open the branch yet;
``preamble``
    filler tokens, each step emitting ``go`` with probability ``p_go``;
``branch``
    exactly uniform over the ``M`` branch tokens;
``mode m``
    absorbing; mass concentrated on the tokens of mode ``m`` (its branch token
    plus ``tokens_per_mode`` continuation tokens).

The ground-truth mode of a trajectory is the mode of the first branch token
it emits.  Hidden states are built so that ``head @ hL`` reproduces the
designed (row-centered) logits exactly: the head has orthogonal rows of norm
``head_scale``, ``hL`` carries the logits in the head's row space and, in its
null space, a fixed nonlinear map of ``h1`` plus a per-mode semantic code.
``h1`` is a shared prompt vector plus small codes for the automaton state and
the last few input tokens, all confined to the head's null space.

With the default ``p_go = 1 / (n_filler + 1)`` the ``go`` token is
indistinguishable from a filler at the logit level.  Because ``h1`` is
dominated by the shared vector, a freshly trained distiller behaves close to a
running mean of recent targets; modes already entered by other sequences
raise their branch token's predicted logit, which the fusion then penalizes.
The defaults are calibrated for ``n_modes=4`` with four samples and a
``DEFAULT_HORIZON``-token budget.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backbone import Backbone, BackboneSpec, SequenceState
from .errors import CapacityError, ConfigError, DimensionError

WARMUP = -3
PREAMBLE = -2
BRANCH = -1
_N_PRE_STATES = 3

DEFAULT_HORIZON = 140


@dataclass(frozen=True)
class BranchLayout:
    n_modes: int
    tokens_per_mode: int
    n_filler: int

    @property
    def bos(self) -> int:
        return 0

    # ``go`` sits right after BOS so its slice of the sampling CDF starts near
    # zero and does not move when filler probabilities shift slightly
    @property
    def go(self) -> int:
        return 1

    @property
    def fillers(self) -> list[int]:
        return list(range(2, 2 + self.n_filler))

    @property
    def branch_tokens(self) -> list[int]:
        start = 2 + self.n_filler
        return list(range(start, start + self.n_modes))

    def mode_tokens(self, m: int) -> list[int]:
        start = 2 + self.n_filler + self.n_modes + m * self.tokens_per_mode
        return [self.branch_tokens[m], *range(start, start + self.tokens_per_mode)]

    @property
    def vocab_size(self) -> int:
        return 2 + self.n_filler + self.n_modes * (1 + self.tokens_per_mode)


class SyntheticBranchModel(Backbone):
    def __init__(self, n_modes: int = 4, tokens_per_mode: int = 2, seed: int = 0, *,
                 d_model: int = 64, n_filler: int = 31, p_go: float | None = None, warmup: int = 30,
                 gap: float = 96.0, preamble_gap: float | None = 24.0, window: int = 3,
                 window_decay: float = 0.6, shared_std: float = 2.0, state_std: float = 0.005,
                 token_std: float = 0.005, content_scale: float = 0.5, semantic_scale: float = 8.0,
                 head_scale: float = 12.0, max_context: int = 4096):
        if n_modes < 2:
            raise ConfigError("need at least two modes")
        layout = BranchLayout(n_modes, tokens_per_mode, n_filler)
        V = layout.vocab_size
        if n_modes > V:
            raise ConfigError("more modes than vocabulary entries")
        if d_model < V + 1:
            raise ConfigError(f"d_model must exceed the vocabulary size ({V}) to hold exact logits")
        if p_go is None:
            p_go = 1.0 / (n_filler + 1)
        if not 0.0 < p_go < 1.0:
            raise ConfigError("p_go must lie in (0, 1)")
        self.layout = layout
        self.spec = BackboneSpec(vocab_size=V, d_model=d_model, n_layers=2, n_heads=1,
                                 max_context=max_context, seed=seed)
        self.bos_token = layout.bos
        self.p_go = p_go
        self.warmup = warmup
        self.gap = gap
        self.preamble_gap = gap if preamble_gap is None else preamble_gap
        self.window = window
        self.window_decay = window_decay
        rng = np.random.default_rng(seed)
        d = d_model
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        self.head = np.ascontiguousarray(q[:, :V].T * head_scale)
        self.head.setflags(write=False)
        self._row_inv = self.head.T / head_scale**2  # pseudo-inverse of the head
        null = q[:, V:]
        self._null_proj = null @ null.T
        # h1 lives in the head's null space, so an untrained distiller
        # (identity plus a small residual) starts with near-uniform logits
        P = self._null_proj
        self._shared = P @ rng.normal(0.0, shared_std, d)
        self._tok_emb = rng.normal(0.0, token_std, (V, d)) @ P
        self._state_codes = rng.normal(0.0, state_std, (n_modes + _N_PRE_STATES, d)) @ P
        self._content = rng.normal(size=(d, d)) / np.sqrt(d)
        self.content_scale = content_scale
        # per-state meaning carried in hL only; invisible to the logits
        sem = rng.normal(size=(n_modes + _N_PRE_STATES, d)) @ P
        sem /= np.linalg.norm(sem, axis=1, keepdims=True)
        sem[:_N_PRE_STATES] = 0.0  # only committed modes carry meaning
        self._semantic = semantic_scale * sem
        self._logit_table = self._build_logits()

    # automaton ------------------------------------------------------------

    def _build_logits(self) -> dict[int, np.ndarray]:
        lay, V, G = self.layout, self.layout.vocab_size, self.gap
        table = {}
        pre = np.full(V, -self.preamble_gap)
        pre[lay.fillers] = 0.0
        pre[lay.go] = np.log(self.p_go / (1.0 - self.p_go) * lay.n_filler)
        table[PREAMBLE] = pre
        table[WARMUP] = pre
        br = np.full(V, -G)
        br[lay.branch_tokens] = 0.0
        table[BRANCH] = br
        for m in range(lay.n_modes):
            lm = np.full(V, -G)
            lm[lay.mode_tokens(m)] = 0.0
            table[m] = lm
        # softmax ignores constant shifts; centered rows keep the states' hL apart
        return {k: v - v.mean() for k, v in table.items()}

    def initial_state(self) -> int:
        return WARMUP if self.warmup > 0 else PREAMBLE

    def transition(self, state: int, token: int, position: int) -> int:
        """State after consuming ``token`` at ``position`` (0-based)."""
        lay = self.layout
        if state >= 0:
            return state
        if token in lay.branch_tokens:
            return lay.branch_tokens.index(token)
        if state == PREAMBLE and token == lay.go:
            return BRANCH
        if state == WARMUP and position + 1 >= self.warmup:
            return PREAMBLE
        return state

    def automaton_state(self, tokens: Sequence[int]) -> int:
        s = self.initial_state()
        for pos, t in enumerate(tokens):
            s = self.transition(s, int(t), pos)
        return s

    def mode_of(self, tokens: Sequence[int]) -> int | None:
        """Ground-truth mode of a token sequence: the first branch token's mode."""
        branch = self.layout.branch_tokens
        for t in tokens:
            if int(t) in branch:
                return branch.index(int(t))
        return None

    def designed_logits(self, automaton_state: int) -> np.ndarray:
        return self._logit_table[automaton_state].copy()

    # hidden states ----------------------------------------------------------

    def _h1(self, auto: int, window: Sequence[int]) -> np.ndarray:
        code = PREAMBLE if auto == WARMUP else auto
        h = self._shared + self._state_codes[code + _N_PRE_STATES]
        w = 1.0
        for tok in reversed(window):
            h = h + w * self._tok_emb[tok]
            w *= self.window_decay
        return h

    def _hL(self, auto: int, h1: np.ndarray) -> np.ndarray:
        content = self._null_proj @ np.tanh(self._content @ h1) * self.content_scale
        code = PREAMBLE if auto == WARMUP else auto
        return self._row_inv @ self._logit_table[auto] + content + self._semantic[code + _N_PRE_STATES]

    # Backbone API -----------------------------------------------------------

    def prefill(self, prompt: Sequence[int]) -> SequenceState:
        prompt = [int(t) for t in prompt]
        self._check_tokens(prompt)
        if len(prompt) > self.spec.max_context:
            raise CapacityError("prompt longer than the context window")
        state = SequenceState(tokens=prompt[:-1], next_input=prompt[-1] if prompt else self.bos_token)
        state.cache = self.automaton_state(state.tokens)
        state.enter_decode()
        return state

    def shallow_forward(self, states, tokens):
        states = list(states)
        tokens = [int(t) for t in tokens]
        if len(states) != len(tokens):
            raise DimensionError("one token per state is required")
        self._check_tokens(tokens)
        h1 = np.empty((len(states), self.d_model))
        autos = []
        for i, (s, t) in enumerate(zip(states, tokens)):
            if s.position >= self.spec.max_context:
                raise CapacityError("context window exhausted")
            auto = self.transition(s.cache, t, s.position)
            autos.append(auto)
            window = (s.tokens[-(self.window - 1):] if self.window > 1 else []) + [t]
            h1[i] = self._h1(auto, window)
        return h1, (states, tokens, autos, h1.copy())

    def deep_forward(self, pending) -> np.ndarray:
        states, tokens, autos, h1 = pending
        hL = np.stack([self._hL(a, h) for a, h in zip(autos, h1)])
        for s, t, a in zip(states, tokens, autos):
            s.tokens.append(t)
            s.cache = a
        return hL


def build_synthetic_branch_model(modes: int = 4, tokens_per_mode: int = 2, seed: int = 0, **kw) -> SyntheticBranchModel:
    return SyntheticBranchModel(n_modes=modes, tokens_per_mode=tokens_per_mode, seed=seed, **kw)
