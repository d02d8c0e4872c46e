"""Experiment drivers shared by the command line and the acceptance suite."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from . import metrics
from .config import RunConfig
from .engine import DecodeSession, SessionResult, run_session, run_session_async
from .errors import ContractError
from .sampler import ABLATION_NOISE, ABLATION_OFF
from .synthetic import DEFAULT_HORIZON, SyntheticBranchModel, build_synthetic_branch_model


def make_session(cfg: RunConfig, backbone=None, **kw) -> DecodeSession:
    bb = backbone if backbone is not None else cfg.build_backbone()
    return DecodeSession(
        bb, cfg.build_prompts(bb), samples_per_prompt=cfg.k, fusion=cfg.fusion(), scope=cfg.scope,
        max_new_tokens=cfg.max_new_tokens, seed=cfg.seed, pipeline=cfg.pipeline, esamp=cfg.esamp,
        distiller_width=cfg.distiller_width, stop_token=cfg.stop_token, prefill_mode=cfg.prefill_mode,
        trace_vectors=cfg.trace_vectors, **kw)


def run(session: DecodeSession) -> SessionResult:
    return run_session_async(session) if session.pipeline == "async" else run_session(session)


# throughput ------------------------------------------------------------------

BENCH_MODES = ("vanilla", "sync", "async")
_HIST_EDGES = [0.0, 1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, float("inf")]


def _mode_config(cfg: RunConfig, mode: str) -> RunConfig:
    if mode == "vanilla":
        return replace(cfg, esamp=False, beta=0.0, pipeline="sync", trace_vectors=False)
    return replace(cfg, esamp=True, pipeline=mode, trace_vectors=False)


def phase_histogram(values) -> dict:
    counts = np.histogram(np.asarray(values, dtype=np.float64), bins=_HIST_EDGES)[0] if len(values) else []
    return {"edges_s": [e if e != float("inf") else None for e in _HIST_EDGES],
            "counts": [int(c) for c in counts],
            "p50_s": float(np.median(values)) if len(values) else None,
            "p95_s": float(np.percentile(values, 95)) if len(values) else None}


def benchmark(cfg: RunConfig, warmup: int = 5, reps: int = 5, modes=BENCH_MODES, min_resolution_ratio: float = 1e3) -> dict:
    """Tokens per second for vanilla, sync and async ESamp; medians and overheads vs vanilla.

    Modes are interleaved within each repetition so slow drift of the host
    affects them alike.  If a vanilla session is too short to time reliably
    the decode budget is doubled until it is.
    """
    if warmup < 5 or reps < 5:
        raise ContractError("benchmarks need at least 5 warmup and 5 timed repetitions")
    backbone = cfg.build_backbone()
    resolution = time.get_clock_info("perf_counter").resolution
    notes = []
    while True:
        t0 = time.perf_counter()
        run(make_session(_mode_config(cfg, "vanilla"), backbone))
        elapsed = time.perf_counter() - t0
        if elapsed >= min_resolution_ratio * resolution or cfg.max_new_tokens >= backbone.max_context // 2:
            break
        cfg = replace(cfg, max_new_tokens=max(1, cfg.max_new_tokens) * 2)
        notes.append(f"session lengthened to {cfg.max_new_tokens} tokens for timer resolution")
    times = {m: [] for m in modes}
    tokens = {}
    phases = {m: {"phase1_s": [], "phase2_s": []} for m in modes}
    for rep in range(warmup + reps):
        for m in modes:
            sess = make_session(_mode_config(cfg, m), backbone)
            t0 = time.perf_counter()
            res = run(sess)
            dt = time.perf_counter() - t0
            if rep >= warmup:
                times[m].append(dt)
                tokens[m] = sum(len(t) for t in res.tokens)
                for tm in res.timings:
                    phases[m]["phase1_s"].append(tm.get("phase1_s", 0.0))
                    if "phase2_s" in tm:
                        phases[m]["phase2_s"].append(tm["phase2_s"])
    report = {"warmup": warmup, "reps": reps, "max_new_tokens": cfg.max_new_tokens, "notes": notes, "modes": {}}
    base = statistics.median(times["vanilla"]) if "vanilla" in times else None
    for m in modes:
        med = statistics.median(times[m])
        report["modes"][m] = {
            "median_s": med, "times_s": times[m], "tokens": tokens[m], "tokens_per_s": tokens[m] / med,
            "overhead_pct": None if base is None else 100.0 * (med / base - 1.0),
            "phase1_hist": phase_histogram(phases[m]["phase1_s"]),
            "phase2_hist": phase_histogram(phases[m]["phase2_s"]),
        }
    return report


# noise ablation on the synthetic branch model --------------------------------

@dataclass
class SeedOutcome:
    seed: int
    coverage: float
    similarity: float
    curve: list[float]


def synthetic_config(**kw) -> RunConfig:
    base = RunConfig(backbone="synthetic", modes=4, tokens_per_mode=2, prompts=1, k=4,
                     max_new_tokens=DEFAULT_HORIZON, beta=0.25, scope="shared")
    return replace(base, **kw)


def coverage(model: SyntheticBranchModel, result: SessionResult, samples_per_prompt: int) -> float:
    """Distinct modes reached per prompt, averaged over prompts."""
    per = [metrics.distinct_count(model.mode_of(t) for t in result.tokens[p:p + samples_per_prompt])
           for p in range(0, len(result.tokens), samples_per_prompt)]
    return float(np.mean(per))


def synthetic_outcome(cfg: RunConfig, seed: int, variant: str) -> SeedOutcome:
    """One paired seed: the model and the sampler share ``seed``; variant is vanilla, esamp or noise."""
    if variant == "vanilla":
        c = replace(cfg, esamp=False, beta=0.0, ablation=ABLATION_OFF)
    elif variant == "esamp":
        c = replace(cfg, esamp=True, ablation=ABLATION_OFF)
    elif variant == "noise":
        c = replace(cfg, esamp=True, ablation=ABLATION_NOISE)
    else:
        raise ContractError(f"unknown variant {variant!r}")
    c = replace(c, seed=seed, model_seed=seed, trace_vectors=False)
    model = build_synthetic_branch_model(c.modes, c.tokens_per_mode, seed=seed, max_context=c.max_context)
    res = run(make_session(c, model))
    curve = metrics.session_curve(res.hidden, c.k)
    return SeedOutcome(seed, coverage(model, res, c.k), curve[-1], curve)


def paired_ci(a, b, level: float = 0.95) -> dict:
    """Mean of ``a - b`` with a paired Student-t confidence interval."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    n = d.size
    if n < 2:
        raise ContractError("a paired interval needs at least two pairs")
    mean = float(d.mean())
    se = float(d.std(ddof=1) / np.sqrt(n))
    half = float(stats.t.ppf(0.5 + level / 2.0, n - 1)) * se
    return {"mean_diff": mean, "lo": mean - half, "hi": mean + half, "level": level, "n": n}


def noise_ablation(cfg: RunConfig | None = None, seeds=range(20)) -> dict:
    """Vanilla vs true-error ESamp vs matched-noise ESamp over paired seeds."""
    cfg = cfg or synthetic_config()
    if cfg.backbone != "synthetic":
        raise ContractError("the noise ablation needs the synthetic branch model")
    rows = []
    curves = {"vanilla": [], "esamp": [], "noise": []}
    for s in seeds:
        out = {v: synthetic_outcome(cfg, s, v) for v in ("vanilla", "esamp", "noise")}
        rows.append({"seed": s, **{f"{v}_coverage": o.coverage for v, o in out.items()},
                     **{f"{v}_similarity": o.similarity for v, o in out.items()}})
        for v, o in out.items():
            curves[v].append(o.curve)
    col = lambda key: [r[key] for r in rows]  # noqa: E731
    length = min(len(c) for cs in curves.values() for c in cs)
    mean_curves = {v: [float(np.mean([c[t] for c in cs])) for t in range(length)] for v, cs in curves.items()}
    return {
        "seeds": [r["seed"] for r in rows],
        "per_seed": rows,
        "coverage_mean": {v: float(np.mean(col(f"{v}_coverage"))) for v in curves},
        "similarity_mean": {v: float(np.mean(col(f"{v}_similarity"))) for v in curves},
        "esamp_similarity_le_vanilla": int(sum(r["esamp_similarity"] <= r["vanilla_similarity"] for r in rows)),
        "ci_esamp_minus_noise": paired_ci(col("esamp_coverage"), col("noise_coverage")),
        "ci_noise_minus_vanilla": paired_ci(col("noise_coverage"), col("vanilla_coverage")),
        "ci_esamp_minus_vanilla": paired_ci(col("esamp_coverage"), col("vanilla_coverage")),
        "curves": mean_curves,
        "vanilla_expected_coverage": cfg.modes * (1.0 - (1.0 - 1.0 / cfg.modes) ** cfg.k),
    }
