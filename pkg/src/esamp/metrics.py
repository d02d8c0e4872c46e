"""Diversity and coverage metrics over finished generations.

Embeddings are the backbone's own final-layer states: for each sequence, the
mean of ``hL`` over its decode steps, L2-normalized.  The step-0 state depends
on the prompt alone, so prefix curves start at exactly 1.0 for samples of one
prompt.  These are self-embeddings; their values are only comparable between
runs of this package.
"""

from __future__ import annotations

import csv
import hashlib
import json
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError
from .numerics import sym_eigenvalues

REPORT_SCHEMA = "esamp.metrics/1"


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    out = np.zeros_like(x)
    nz = norms[:, 0] > 0
    out[nz] = x[nz] / norms[nz]
    return out


def generation_embeddings(hidden: np.ndarray) -> np.ndarray:
    """``[n, T, d]`` hidden states (NaN rows where absent) to ``[n, d]`` unit embeddings.

    Sequences with no generated tokens map to the zero vector.
    """
    h = np.asarray(hidden, dtype=np.float64)
    if h.ndim != 3:
        raise ContractError("expected hidden states shaped [n, T, d]")
    present = ~np.isnan(h[:, :, 0])
    sums = np.where(present[:, :, None], h, 0.0).sum(axis=1)
    counts = present.sum(axis=1)
    mean = np.zeros_like(sums)
    nz = counts > 0
    mean[nz] = sums[nz] / counts[nz, None]
    if not np.all(np.isfinite(mean)):
        raise NumericError("non-finite hidden states")
    return _normalize_rows(mean)


def _nonzero(embeddings: np.ndarray) -> np.ndarray:
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2:
        raise ContractError("embeddings must be a 2-d array")
    if not np.all(np.isfinite(e)):
        raise NumericError("non-finite embeddings")
    return e[np.linalg.norm(e, axis=1) > 0]


def pairwise_cosine_mean(embeddings: np.ndarray) -> float:
    """Mean cosine similarity over all unordered pairs; zero vectors are excluded."""
    e = _nonzero(embeddings)
    n = e.shape[0]
    if n < 2:
        raise ContractError("pairwise similarity needs at least two non-empty embeddings")
    u = _normalize_rows(e)
    g = u @ u.T
    iu = np.triu_indices(n, k=1)
    return float(np.mean(g[iu]))


def vendi_score(embeddings: np.ndarray) -> float:
    """``exp(-sum l ln l)`` over the eigenvalues of ``K / n`` with the cosine kernel K."""
    e = _nonzero(embeddings)
    n = e.shape[0]
    if n == 0:
        raise ContractError("vendi score needs at least one non-empty embedding")
    u = _normalize_rows(e)
    k = u @ u.T
    k = 0.5 * (k + k.T)
    lam = sym_eigenvalues(k / n)
    lam = lam[lam > 0]  # 0 ln 0 := 0; tiny negative round-off is dropped too
    return float(np.exp(-np.sum(lam * np.log(lam))))


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased ``1 - C(n-c, k) / C(n, k)`` via the product form."""
    if not (1 <= k <= n):
        raise ContractError(f"need 1 <= k <= n, got k={k}, n={n}")
    if not 0 <= c <= n:
        raise ContractError(f"need 0 <= c <= n, got c={c}")
    if n - c < k:
        return 1.0
    # C(n-c, k) / C(n, k) = prod_{i=n-c+1}^{n} (1 - k / i)
    i = np.arange(n - c + 1, n + 1, dtype=np.float64)
    return float(1.0 - np.prod(1.0 - k / i))


def prefix_embeddings(hidden: np.ndarray) -> np.ndarray:
    """Running-mean embeddings ``[T, n, d]``: row t pools decode steps 0..t."""
    h = np.asarray(hidden, dtype=np.float64)
    present = ~np.isnan(h[:, :, 0])
    vals = np.where(present[:, :, None], h, 0.0)
    sums = np.cumsum(vals, axis=1)
    counts = np.cumsum(present, axis=1)
    out = np.zeros_like(sums)
    nz = counts > 0
    out[nz] = sums[nz] / counts[nz][:, None]
    out = np.transpose(out, (1, 0, 2))
    return np.stack([_normalize_rows(step) for step in out])


def divergence_curve(hidden: np.ndarray) -> list[float]:
    """Pairwise-mean similarity of prefix embeddings, one value per decode step."""
    pre = prefix_embeddings(hidden)
    curve = []
    for step in pre:
        curve.append(pairwise_cosine_mean(step))
    return curve


def session_curve(hidden: np.ndarray, samples_per_prompt: int) -> list[float]:
    """Divergence curve averaged over prompts (samples of one prompt are compared)."""
    n = hidden.shape[0]
    if samples_per_prompt < 2:
        raise ContractError("need at least two samples per prompt")
    curves = [divergence_curve(hidden[p:p + samples_per_prompt]) for p in range(0, n, samples_per_prompt)]
    length = min(len(c) for c in curves)
    return [float(np.mean([c[t] for c in curves])) for t in range(length)]


def distinct_count(labels: Iterable) -> int:
    """Number of distinct non-None labels (e.g. modes reached)."""
    return len({x for x in labels if x is not None})


def self_nll_per_token(logps: Sequence[float]) -> float:
    """Mean negative log-likelihood of the chosen tokens under the backbone itself.

    A diagnostic only; not comparable with external-judge perplexity.
    """
    if len(logps) == 0:
        raise ContractError("no tokens")
    return float(-np.mean(logps))


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def metrics_report(values: dict, seeds: Sequence[int], config: dict) -> dict:
    """JSON-ready report keyed by metric name, with the seeds and a config hash."""
    return {"schema": REPORT_SCHEMA, "metrics": values, "seeds": list(seeds),
            "config": config, "config_hash": config_hash(config)}


def write_series_csv(path, columns: dict[str, Sequence[float]]) -> None:
    """Write equal-length named series as CSV with a leading ``step`` column."""
    names = list(columns)
    length = max((len(columns[k]) for k in names), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", *names])
        for t in range(length):
            w.writerow([t, *(repr(float(columns[k][t])) if t < len(columns[k]) else "" for k in names)])
