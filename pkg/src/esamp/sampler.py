"""Exploration-biased token selection: fusion, filtering, novelty diagnostics, sampling.

Per-step pipeline for the default latent-mix placement::

    logits_new = fuse(logits_ref, logits_dist)   # or lm_head(fuse_latent(hL, hL_hat))
    masked     = apply_filter(logits_new / T, policy)
    token      = sample_token(masked, 1.0, u)

For the post-filter placement the candidate set comes from
``apply_filter(logits_ref / T)`` and fusion is applied only on it.  Filters
therefore always see the temperature-scaled distribution they act on.
``logits_dist`` is never temperature-scaled before it enters the fusion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError
from .numerics import log_softmax, softmax

PLACEMENT_LATENT_MIX = "latent-mix"
PLACEMENT_POST_FILTER = "post-filter"
PLACEMENTS = (PLACEMENT_LATENT_MIX, PLACEMENT_POST_FILTER)

ABLATION_OFF = "off"
ABLATION_NOISE = "matched-noise"
ABLATIONS = (ABLATION_OFF, ABLATION_NOISE)

FORM_PROPOSED = "proposed"
FORM_SUBTRACTION = "subtraction"
FUSION_FORMS = (FORM_PROPOSED, FORM_SUBTRACTION)

# Fault injection for the audit self-test: flips the sign of the exploration
# term inside fuse_logits / fuse_latent.  Never set outside of tests and the
# ``verify --inject-fault`` command.
_FAULT_FLIP_SIGN = False


def set_fault_injection(enabled: bool) -> None:
    global _FAULT_FLIP_SIGN
    _FAULT_FLIP_SIGN = bool(enabled)


def fault_injection_enabled() -> bool:
    return _FAULT_FLIP_SIGN


@dataclass(frozen=True)
class FilterPolicy:
    kind: str = "none"  # none | top-k | top-p | min-p
    value: float = 0.0

    def __post_init__(self):
        if self.kind == "none":
            return
        if self.kind == "top-k":
            if int(self.value) != self.value or self.value <= 0:
                raise ConfigError(f"top-k needs a positive integer k, got {self.value}")
        elif self.kind in ("top-p", "min-p"):
            if not 0.0 < self.value <= 1.0:
                raise ConfigError(f"{self.kind} needs p in (0, 1], got {self.value}")
        else:
            raise ConfigError(f"unknown filter policy {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "FilterPolicy":
        """``none``, ``top-k:4``, ``top-p:0.9`` or ``min-p:0.1``."""
        text = text.strip()
        if text == "none":
            return cls()
        kind, sep, val = text.partition(":")
        if not sep:
            raise ConfigError(f"filter policy {text!r} needs a value, e.g. top-k:4")
        try:
            value = float(val)
        except ValueError:
            raise ConfigError(f"bad filter value in {text!r}") from None
        return cls(kind, value)

    def __str__(self) -> str:
        if self.kind == "none":
            return "none"
        v = int(self.value) if self.kind == "top-k" else self.value
        return f"{self.kind}:{v}"


@dataclass(frozen=True)
class FusionConfig:
    beta: float = 0.25
    temperature: float = 1.0
    filter: FilterPolicy = field(default_factory=FilterPolicy)
    placement: str = PLACEMENT_LATENT_MIX
    ablation: str = ABLATION_OFF
    form: str = FORM_PROPOSED

    def __post_init__(self):
        if not (math.isfinite(self.beta) and self.beta >= 0):
            raise ConfigError(f"beta must be finite and >= 0, got {self.beta}")
        if not (math.isfinite(self.temperature) and self.temperature > 0):
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not isinstance(self.filter, FilterPolicy):
            raise ConfigError("filter must be a FilterPolicy")
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"placement must be one of {PLACEMENTS}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        if self.form not in FUSION_FORMS:
            raise ConfigError(f"fusion form must be one of {FUSION_FORMS}")


def _coefficients(beta: float, form: str) -> tuple[float, float]:
    if form == FORM_SUBTRACTION:
        a, b = 1.0, beta
    elif form == FORM_PROPOSED:
        a, b = 1.0 + beta, beta
    else:
        raise ConfigError(f"unknown fusion form {form!r}")
    if _FAULT_FLIP_SIGN:
        a, b = 1.0 - beta, -beta
    return a, b


def fuse_logits(logits_ref: np.ndarray, logits_dist: np.ndarray, beta: float,
                form: str = FORM_PROPOSED) -> np.ndarray:
    """``(1 + beta) * logits_ref - beta * logits_dist`` elementwise (batched rows allowed).

    ``form="subtraction"`` gives the plain ``logits_ref - beta * logits_dist``
    comparison variant.
    """
    ref = np.asarray(logits_ref, dtype=np.float64)
    dist = np.asarray(logits_dist, dtype=np.float64)
    if ref.shape != dist.shape:
        raise DimensionError(f"logit shapes differ: {ref.shape} vs {dist.shape}")
    if not (np.all(np.isfinite(ref)) and np.all(np.isfinite(dist))):
        raise NumericError("fusion inputs must be finite")
    if beta == 0 and not _FAULT_FLIP_SIGN:
        return ref.copy()
    a, b = _coefficients(beta, form)
    return a * ref - b * dist


def fuse_latent(hL: np.ndarray, hL_hat: np.ndarray, beta: float, form: str = FORM_PROPOSED) -> np.ndarray:
    """Latent mix ``(1 + beta) * hL - beta * hL_hat``; the head is linear so it commutes with fusion."""
    h = np.asarray(hL, dtype=np.float64)
    hh = np.asarray(hL_hat, dtype=np.float64)
    if h.shape != hh.shape:
        raise DimensionError(f"latent shapes differ: {h.shape} vs {hh.shape}")
    if beta == 0 and not _FAULT_FLIP_SIGN:
        return h.copy()
    a, b = _coefficients(beta, form)
    return a * h - b * hh


def reward_vector(logits_ref: np.ndarray, logits_dist: np.ndarray) -> np.ndarray:
    """Log-likelihood ratio ``log pi_ref - log q_dist`` for every token, via log-softmax."""
    ref = np.asarray(logits_ref, dtype=np.float64)
    dist = np.asarray(logits_dist, dtype=np.float64)
    if ref.shape != dist.shape:
        raise DimensionError("logit shapes differ")
    return log_softmax(ref) - log_softmax(dist)


def intrinsic_reward(pi_ref: np.ndarray, q_dist: np.ndarray, z: int) -> float:
    """``log pi_ref(z) - log q_dist(z)`` from explicit probability vectors (strict mode)."""
    p = np.asarray(pi_ref, dtype=np.float64)
    q = np.asarray(q_dist, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise DimensionError("probability vectors must be 1-d and of equal length")
    for name, v in (("pi_ref", p), ("q_dist", q)):
        if np.any(v < 0) or not np.all(np.isfinite(v)) or abs(float(np.sum(v)) - 1.0) > 1e-9:
            raise NumericError(f"{name} is not a probability vector")
    if not 0 <= z < p.size:
        raise DimensionError(f"token {z} out of range")
    if p[z] <= 0.0 or q[z] <= 0.0:
        raise NumericError(f"zero probability at token {z}; use reward_vector on logits instead")
    return float(np.log(p[z]) - np.log(q[z]))


def _order(logits: np.ndarray) -> np.ndarray:
    # descending by value, ties by lower token id (stable sort on the negation)
    return np.argsort(-logits, kind="stable")


def retained_mask(logits: np.ndarray, policy: FilterPolicy) -> np.ndarray:
    """Boolean mask of the tokens a filter keeps (1-d logits)."""
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("filters act on a single logit vector")
    finite = np.isfinite(x)
    if not np.any(finite):
        raise ContractError("all logits are -inf")
    if policy.kind == "none":
        return finite
    if policy.kind == "top-k":
        k = min(int(policy.value), int(np.sum(finite)))
        keep = np.zeros(x.size, dtype=bool)
        keep[_order(x)[:k]] = True
        return keep
    probs = softmax(x)
    if policy.kind == "top-p":
        order = _order(x)
        cum = np.cumsum(probs[order])
        # smallest prefix with mass >= p; tolerate rounding just below p
        n = int(np.searchsorted(cum, policy.value - 1e-12, side="left")) + 1
        keep = np.zeros(x.size, dtype=bool)
        keep[order[:min(n, x.size)]] = True
        return keep & finite
    if policy.kind == "min-p":
        return (probs >= policy.value * probs.max()) & finite
    raise ConfigError(f"unknown filter policy {policy.kind!r}")


def apply_filter(logits: np.ndarray, policy: FilterPolicy) -> np.ndarray:
    """Copy of ``logits`` with tokens outside the retained set set to ``-inf``."""
    x = np.array(logits, dtype=np.float64)
    keep = retained_mask(x, policy)
    x[~keep] = -np.inf
    return x


def post_filter_intervene(logits_ref: np.ndarray, logits_dist: np.ndarray, candidates, beta: float,
                          form: str = FORM_PROPOSED) -> np.ndarray:
    """Fusion restricted to ``candidates`` (indices or boolean mask); everything else is ``-inf``."""
    ref = np.asarray(logits_ref, dtype=np.float64)
    dist = np.asarray(logits_dist, dtype=np.float64)
    if ref.shape != dist.shape or ref.ndim != 1:
        raise DimensionError("logit vectors must be 1-d and of equal length")
    cand = np.asarray(candidates)
    if cand.dtype == bool:
        if cand.shape != ref.shape:
            raise DimensionError("candidate mask length differs from vocabulary")
        idx = np.flatnonzero(cand)
    else:
        idx = np.unique(cand.astype(np.intp))
        if idx.size and (idx[0] < 0 or idx[-1] >= ref.size):
            raise DimensionError("candidate id out of range")
    if idx.size == 0:
        raise ContractError("empty candidate set")
    out = np.full(ref.shape, -np.inf)
    out[idx] = fuse_logits(ref[idx], dist[idx], beta, form)
    return out


def matched_noise_vector(e: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Standard normal direction rescaled to exactly ``||e||``."""
    e = np.asarray(e, dtype=np.float64)
    norm = float(np.linalg.norm(e))
    if not math.isfinite(norm):
        raise NumericError("error vector is not finite")
    g = rng.standard_normal(e.shape)
    if norm == 0.0:
        return np.zeros_like(e)
    gn = float(np.linalg.norm(g))
    while gn == 0.0:  # pragma: no cover - probability zero
        g = rng.standard_normal(e.shape)
        gn = float(np.linalg.norm(g))
    return g * (norm / gn)


def sample_token(logits: np.ndarray, temperature: float = 1.0, rng: np.random.Generator | None = None, *,
                 u: float | None = None) -> int:
    """Inverse-CDF draw from ``softmax(logits / T)`` with one uniform ``u`` in [0, 1).

    Either pass ``u`` directly or an ``rng`` to draw it from.  The returned id
    is the first index whose cumulative probability exceeds ``u``; masked
    tokens can never be chosen.
    """
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise DimensionError("sample_token needs a non-empty 1-d logit vector")
    if not np.any(np.isfinite(x)):
        raise ContractError("all logits are -inf")
    if u is None:
        if rng is None:
            raise ContractError("pass either rng or u")
        u = float(rng.random())
    if not 0.0 <= u < 1.0:
        raise ContractError(f"uniform draw {u} outside [0, 1)")
    p = softmax(x, temperature)
    cdf = np.cumsum(p)
    idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    idx = min(idx, x.size - 1)
    # guard against landing on a masked token through rounding at the tail
    while p[idx] == 0.0 and idx > 0:
        idx -= 1
    return idx


def select_logits(logits_ref: np.ndarray, logits_dist: np.ndarray | None, config: FusionConfig) -> np.ndarray:
    """Masked, temperature-scaled logits from which one token is sampled.

    ``logits_dist=None`` is the vanilla path.  ``logits_ref`` may already be the
    fused logits (latent-mix computed through the head); pass
    ``logits_dist=None`` in that case too.
    """
    T = config.temperature
    ref = np.asarray(logits_ref, dtype=np.float64)
    if logits_dist is None:
        return apply_filter(ref / T if T != 1.0 else ref, config.filter)
    if config.placement == PLACEMENT_POST_FILTER:
        keep = retained_mask(ref / T if T != 1.0 else ref, config.filter)
        fused = post_filter_intervene(ref, logits_dist, keep, config.beta, config.form)
        return fused / T if T != 1.0 else fused
    fused = fuse_logits(ref, logits_dist, config.beta, config.form)
    return apply_filter(fused / T if T != 1.0 else fused, config.filter)


@dataclass
class NoveltySignal:
    e: np.ndarray
    norm: float
    candidates: np.ndarray
    delta_logit: np.ndarray
    cosine: np.ndarray
    head_norms: np.ndarray
    beta: float

    def identity_residual(self) -> float:
        """Max |beta*<w,e> - beta*||w||*||e||*cos| over candidates (the three-factor check)."""
        if self.candidates.size == 0:
            return 0.0
        three = self.beta * self.head_norms * self.norm * self.cosine
        return float(np.max(np.abs(self.delta_logit - three)))


def novelty_decomposition(e: np.ndarray, head: np.ndarray, candidates=None, beta: float = 0.25,
                          out: NoveltySignal | None = None, tol: float = 1e-9) -> NoveltySignal:
    """Split ``beta * <w_z, e>`` into strength, novelty ``||e||`` and direction ``cos(w_z, e)``.

    ``head`` is ``[V, d]`` with rows ``w_z``.  With ``out`` the arrays of an
    existing signal of matching size are filled in place.  Raises
    NumericError if the identity is violated beyond ``tol``.
    """
    e = np.asarray(e, dtype=np.float64)
    head = np.asarray(head)
    if head.ndim != 2 or e.ndim != 1 or head.shape[1] != e.size:
        raise DimensionError(f"head {head.shape} and error {e.shape} disagree")
    cand = np.arange(head.shape[0]) if candidates is None else np.asarray(candidates, dtype=np.intp)
    w = head[cand]
    norm = float(np.sqrt(np.dot(e, e)))
    if out is not None and out.candidates.shape == cand.shape:
        sig = out
        sig.e[...] = e
        sig.candidates[...] = cand
        sig.norm = norm
        sig.beta = beta
    else:
        n = cand.size
        sig = NoveltySignal(e.copy(), norm, cand.copy(), np.empty(n), np.empty(n), np.empty(n), beta)
    np.multiply(beta, w @ e, out=sig.delta_logit)
    np.sqrt(np.einsum("ij,ij->i", w, w), out=sig.head_norms)
    denom = sig.head_norms * norm
    sig.cosine[...] = 0.0
    nz = denom > 0
    if np.any(nz):
        sig.cosine[nz] = (w[nz] @ e) / denom[nz]
    if sig.identity_residual() > tol:
        raise NumericError("decomposition identity violated")
    return sig
