"""Decode orchestrator: K parallel samples per prompt with online latent distillation.

Each engine step runs two phases over the active rows::

    phase 1  h1 = shallow(x)          -> ring buffer slot, distiller predict (lane)
             hL = deep(h1)            -> rendezvous with the prediction
             fuse, filter, temperature, sample
    phase 2  distiller train_step on the step's decode rows, one step per distiller (lane)

The lane is either inline (sync) or a single worker thread (async).  Work is
FIFO on the lane, so ``train_step(t)`` always finishes before
``predict(t + 1)`` starts and the async pipeline computes exactly what the
sync one does.  Per-row randomness comes from counter-based streams keyed by
``(seed, prompt, sample, decode step, stream)``.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import Future, ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import distiller as dist
from .backbone import PHASE_DECODE, PHASE_PREFILL, Backbone
from .errors import ConfigError, ContractError, NumericError
from .numerics import log_softmax
from .ringbuffer import RingBuffer
from .sampler import (ABLATION_NOISE, PLACEMENT_LATENT_MIX, FusionConfig, fuse_latent, matched_noise_vector,
                      sample_token, select_logits)

TRACE_SCHEMA = "esamp.trace/1"
TIMING_SCHEMA = "esamp.timing/1"

PIPELINE_SYNC = "sync"
PIPELINE_ASYNC = "async"

STREAM_SAMPLE = 0
STREAM_NOISE = 1


@dataclass
class DecodeSession:
    backbone: Backbone
    prompts: list[list[int]]
    samples_per_prompt: int = 1
    fusion: FusionConfig = field(default_factory=FusionConfig)
    scope: str = dist.SCOPE_SHARED
    max_new_tokens: int = 32
    seed: int = 0
    pipeline: str = PIPELINE_SYNC
    esamp: bool = True  # False runs the plain sampler with no distiller at all
    distiller_width: int = dist.DEFAULT_WIDTH
    distiller_seed: int | None = None  # defaults to ``seed``
    stop_token: int | None = None
    prefill_mode: str = "bulk"  # bulk | stepwise
    rendezvous_timeout: float = 10.0
    trace_path: str | os.PathLike | None = None
    timing_path: str | os.PathLike | None = None
    trace_vectors: bool = False  # log logits, latent error and hL per record

    def __post_init__(self):
        if self.samples_per_prompt < 1:
            raise ConfigError("samples_per_prompt must be >= 1")
        if not self.prompts:
            raise ConfigError("at least one prompt is required")
        if self.max_new_tokens < 0:
            raise ConfigError("max_new_tokens must be >= 0")
        if self.pipeline not in (PIPELINE_SYNC, PIPELINE_ASYNC):
            raise ConfigError(f"pipeline must be sync or async, got {self.pipeline!r}")
        if self.scope not in (dist.SCOPE_SHARED, dist.SCOPE_PER_PROMPT):
            raise ConfigError(f"unknown distiller scope {self.scope!r}")
        if self.prefill_mode not in ("bulk", "stepwise"):
            raise ConfigError("prefill_mode must be bulk or stepwise")
        if not self.rendezvous_timeout > 0:
            raise ConfigError("rendezvous_timeout must be positive")

    @property
    def n_sequences(self) -> int:
        return len(self.prompts) * self.samples_per_prompt

    def sequence_ids(self, seq: int) -> tuple[int, int]:
        """(prompt index, sample index) of a sequence id."""
        return divmod(seq, self.samples_per_prompt)


@dataclass
class StepTrace:
    step: int
    seq: int
    prompt: int
    sample: int
    token: int
    logp_ref: float
    logp_new: float
    loss: float | None
    e_norm: float | None
    ablation: bool
    distiller: int | None
    phase1_s: float = 0.0
    phase2_s: float = 0.0
    vectors: dict | None = None
    engine_step: int = 0

    def to_json(self) -> str:
        """Deterministic JSON line; wall times go to the timing sidecar instead."""
        rec = {"schema": TRACE_SCHEMA, "step": self.step, "seq": self.seq, "prompt": self.prompt,
               "sample": self.sample, "token": self.token, "logp_ref": self.logp_ref,
               "logp_new": self.logp_new, "loss": self.loss, "e_norm": self.e_norm,
               "ablation": self.ablation, "distiller": self.distiller}
        if self.vectors is not None:
            rec["vectors"] = self.vectors
        return json.dumps(rec, sort_keys=True, allow_nan=False)


@dataclass
class SessionResult:
    tokens: list[list[int]]
    traces: list[StepTrace]
    events: list[dict]
    timings: list[dict]
    hidden: np.ndarray  # [n_seq, T, d] final-layer states at decode steps; NaN where absent
    rows_trained: list[int]
    distiller_updates: list[int]
    scope: dist.DistillerScope | None
    ring_high_water: int = 0
    ring_overwrite_attempts: int = 0

    def token_bytes(self) -> bytes:
        return json.dumps(self.tokens).encode()

    def trace_lines(self) -> list[str]:
        return [t.to_json() for t in self.traces]


def row_rng(seed: int, prompt: int, sample: int, step: int, stream: int) -> np.random.Generator:
    """Counter-based stream: depends only on its key, never on scheduling."""
    return np.random.default_rng(np.random.SeedSequence([seed, prompt, sample, step, stream]))


def guardrail_filter(phases: Sequence[str]) -> list[int]:
    """Positions of decode-phase rows; only these ever reach the distiller."""
    return [i for i, p in enumerate(phases) if p == PHASE_DECODE]


def scope_route(scope: dist.DistillerScope, session: DecodeSession, seq: int) -> dist.DistillerState:
    prompt, _ = session.sequence_ids(seq)
    return scope.state_for(prompt)


class _InlineLane:
    def submit(self, fn, *args) -> Future:
        fut: Future = Future()
        try:
            fut.set_result(fn(*args))
        except BaseException as exc:  # surfaced by fut.result()
            fut.set_exception(exc)
        return fut

    def shutdown(self) -> None:
        pass


class _ThreadLane:
    def __init__(self):
        self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="esamp-distiller")

    def submit(self, fn, *args) -> Future:
        return self._pool.submit(fn, *args)

    def shutdown(self) -> None:
        self._pool.shutdown(wait=True)


class _Clock:
    def __init__(self):
        self.t0 = time.perf_counter()

    def now(self) -> float:
        return time.perf_counter() - self.t0


def _predict_job(scope: dist.DistillerScope, groups: dict[int, list[int]], h1: np.ndarray, clock: _Clock):
    start = clock.now()
    out = {}
    for g, rows in groups.items():
        out[g] = dist.predict(scope.states[g], h1[rows], keep_cache=True)
    return out, start, clock.now()


def _train_job(scope: dist.DistillerScope, ring: RingBuffer, jobs: list, clock: _Clock):
    start = clock.now()
    results = []
    for g, slots, cache in jobs:
        h1, hL = ring.read(slots)
        try:
            if cache is not None and cache.x.shape == h1.shape:
                loss = dist.train_step(scope.states[g], h1, hL, cache)
            else:
                loss = dist.train_step(scope.states[g], h1, hL)
            results.append((g, loss, None))
        except NumericError as exc:
            results.append((g, None, str(exc)))
        finally:
            ring.consume(slots)
    return results, start, clock.now()


def run_session(session: DecodeSession) -> SessionResult:
    """Run the session with the pipeline named in ``session.pipeline``."""
    return _run(session, session.pipeline)


def run_session_async(session: DecodeSession) -> SessionResult:
    if session.pipeline != PIPELINE_ASYNC:
        raise ContractError("run_session_async needs pipeline='async'")
    return _run(session, PIPELINE_ASYNC)


def _run(session: DecodeSession, pipeline: str) -> SessionResult:
    bb = session.backbone
    cfg = session.fusion
    n_seq = session.n_sequences
    T = session.max_new_tokens
    d = bb.d_model
    clock = _Clock()
    events: list[dict] = []
    timings: list[dict] = []
    traces: list[StepTrace] = []

    use_distiller = session.esamp
    scope = None
    ring = None
    if use_distiller:
        dseed = session.seed if session.distiller_seed is None else session.distiller_seed
        scope = dist.DistillerScope(session.scope, len(session.prompts), d, session.distiller_width, dseed)
        ring = RingBuffer(2 * n_seq, d)

    states = []
    pending_prompt: list[list[int]] = []
    for seq in range(n_seq):
        p, _ = session.sequence_ids(seq)
        prompt = list(session.prompts[p])
        if session.prefill_mode == "bulk":
            states.append(bb.prefill(prompt))
            pending_prompt.append([])
        else:
            states.append(bb.prefill(prompt[:1]))
            pending_prompt.append(prompt[1:])

    generated: list[list[int]] = [[] for _ in range(n_seq)]
    finished = [T == 0] * n_seq
    rows_trained = [0] * n_seq
    hidden = np.full((n_seq, T, d), np.nan)
    train_futures: list[tuple[int, Future]] = []
    lane = _ThreadLane() if pipeline == PIPELINE_ASYNC else _InlineLane()
    sink = open(session.trace_path, "w") if session.trace_path is not None else None

    def collect_train(fut_step: int, fut: Future, timing: dict) -> None:
        results, start, end = fut.result()
        timing["train_start"], timing["train_end"] = start, end
        for g, _loss, err in results:
            if err is not None:
                events.append({"event": "train-skipped", "step": fut_step, "distiller": g, "reason": err})

    step = 0
    try:
        while not all(finished):
            for seq in range(n_seq):
                if not finished[seq] and states[seq].position >= bb.spec.max_context:
                    finished[seq] = True
                    events.append({"event": "truncated", "step": step, "seq": seq,
                                   "generated": len(generated[seq])})
            rows = [s for s in range(n_seq) if not finished[s]]
            if not rows:
                break
            timing: dict[str, Any] = {"schema": TIMING_SCHEMA, "step": step, "fallback": False}
            t_phase1 = clock.now()
            inputs = [states[s].next_input for s in rows]
            phases = [PHASE_PREFILL if pending_prompt[s] else PHASE_DECODE for s in rows]
            timing["shallow_start"] = t_phase1
            h1, pending = bb.shallow_forward([states[s] for s in rows], inputs)
            timing["shallow_end"] = clock.now()

            dec = guardrail_filter(phases)
            dec_seqs = [rows[i] for i in dec]
            groups: dict[int, list[int]] = {}
            slots = None
            predict_fut = None
            dec_h1 = h1[dec]
            finite_h1 = np.all(np.isfinite(dec_h1), axis=1) if dec else np.zeros(0, bool)
            if use_distiller and dec:
                slots = ring.write(step, dec_seqs, dec_h1)
                for j, s in enumerate(dec_seqs):
                    if finite_h1[j]:
                        groups.setdefault(scope.route(session.sequence_ids(s)[0]), []).append(j)
                predict_fut = lane.submit(_predict_job, scope, groups, dec_h1, clock)

            timing["deep_start"] = clock.now()
            hL = bb.deep_forward(pending)
            timing["deep_end"] = clock.now()
            logits_ref = bb.lm_head(hL)

            dec_hL = hL[dec]
            preds = {}
            if predict_fut is not None:
                ring.complete(slots, dec_hL)
                try:
                    preds, p_start, p_end = predict_fut.result(timeout=session.rendezvous_timeout)
                except FutureTimeout:
                    timing["fallback"] = True
                    events.append({"event": "rendezvous-timeout", "step": step})
                    preds, p_start, p_end = predict_fut.result()
                timing["predict_start"], timing["predict_end"] = p_start, p_end

            # per decode row: prediction, error, group loss
            hhat = dec_hL.copy()
            has_pred = np.zeros(len(dec), bool)
            group_loss: dict[int, float] = {}
            row_group: dict[int, int] = {}
            for g, members in groups.items():
                y, _cache = preds[g]
                hhat[members] = y
                has_pred[members] = True
                for j in members:
                    row_group[j] = g
            err = dec_hL - hhat
            finite_hL = np.all(np.isfinite(dec_hL), axis=1)
            for g, members in groups.items():
                ok = [j for j in members if finite_hL[j]]
                if ok:
                    group_loss[g] = float(np.sum(err[ok] * err[ok])) / len(ok)

            used_err = err
            if use_distiller and cfg.ablation == ABLATION_NOISE:
                used_err = err.copy()
                for j, s in enumerate(dec_seqs):
                    if has_pred[j]:
                        p, k = session.sequence_ids(s)
                        used_err[j] = matched_noise_vector(err[j], row_rng(session.seed, p, k, len(generated[s]),
                                                                           STREAM_NOISE))
            hhat_used = dec_hL - used_err

            fused_rows = None
            dist_rows = None
            if use_distiller and dec:
                if cfg.placement == PLACEMENT_LATENT_MIX:
                    fused_rows = bb.lm_head(fuse_latent(dec_hL, hhat_used, cfg.beta, cfg.form))
                else:
                    dist_rows = bb.lm_head(hhat_used)

            # phase 2 is queued before sampling so it can overlap with it
            if use_distiller and dec:
                jobs = []
                for g, members in groups.items():
                    ok = [j for j in members if finite_hL[j]]
                    if len(ok) != len(members):
                        events.append({"event": "non-finite", "step": step, "distiller": g,
                                       "rows": len(members) - len(ok)})
                    if ok:
                        cache = preds[g][1] if len(ok) == len(members) else None
                        jobs.append((g, slots[ok], cache))
                        for j in ok:
                            rows_trained[dec_seqs[j]] += 1
                    skipped = [j for j in members if not finite_hL[j]]
                    if skipped:
                        ring.consume(slots[skipped])
                unrouted = [j for j in range(len(dec)) if not finite_h1[j]]
                if unrouted:
                    events.append({"event": "non-finite", "step": step, "rows": len(unrouted)})
                    ring.consume(slots[unrouted])
                train_futures.append((step, lane.submit(_train_job, scope, ring, jobs, clock), timing))

            t_sample = clock.now()
            for i, s in enumerate(rows):
                if phases[i] == PHASE_PREFILL:
                    states[s].next_input = pending_prompt[s].pop(0)
                    continue
                j = dec.index(i) if len(dec) != len(rows) else i
                p, k = session.sequence_ids(s)
                t_seq = len(generated[s])
                if not np.all(np.isfinite(logits_ref[i])):
                    finished[s] = True
                    events.append({"event": "non-finite-logits", "step": step, "seq": s})
                    continue
                if fused_rows is not None and has_pred[j]:
                    sel = select_logits(fused_rows[j], None, cfg)
                elif dist_rows is not None and has_pred[j]:
                    sel = select_logits(logits_ref[i], dist_rows[j], cfg)
                else:
                    sel = select_logits(logits_ref[i], None, cfg)
                u = float(row_rng(session.seed, p, k, t_seq, STREAM_SAMPLE).random())
                tok = sample_token(sel, 1.0, u=u)
                logp_ref = float(log_softmax(logits_ref[i])[tok])
                logp_new = float(log_softmax(sel)[tok])
                g = row_group.get(j) if use_distiller else None
                vectors = None
                if session.trace_vectors:
                    vectors = {"logits_ref": logits_ref[i].tolist(), "hL": hL[i].tolist()}
                    if use_distiller and has_pred[j]:
                        new = fused_rows[j] if fused_rows is not None else None
                        if new is None:
                            new = select_logits(logits_ref[i], dist_rows[j],
                                                FusionConfig(cfg.beta, 1.0, placement=cfg.placement,
                                                             form=cfg.form))
                        # masked tokens are logged as null
                        vectors["logits_new"] = [float(v) if np.isfinite(v) else None for v in new]
                        vectors["logits_dist"] = bb.lm_head(hhat_used[j]).tolist()
                        vectors["e"] = used_err[j].tolist()
                trace = StepTrace(
                    step=t_seq, seq=s, prompt=p, sample=k, token=tok, logp_ref=logp_ref, logp_new=logp_new,
                    loss=group_loss.get(g) if g is not None else None,
                    e_norm=float(np.linalg.norm(err[j])) if (use_distiller and has_pred[j]) else None,
                    ablation=bool(use_distiller and cfg.ablation == ABLATION_NOISE), distiller=g,
                    vectors=vectors, engine_step=step)
                traces.append(trace)
                if sink is not None:
                    sink.write(trace.to_json() + "\n")
                hidden[s, t_seq] = hL[i]
                generated[s].append(tok)
                states[s].next_input = tok
                if len(generated[s]) >= T or (session.stop_token is not None and tok == session.stop_token):
                    finished[s] = True
            timing["sample_start"], timing["sample_end"] = t_sample, clock.now()
            timing["phase1_s"] = timing["sample_end"] - t_phase1
            timings.append(timing)
            step += 1
        for fut_step, fut, timing in train_futures:
            collect_train(fut_step, fut, timing)
    finally:
        lane.shutdown()
        if sink is not None:
            sink.close()

    for tm in timings:
        if "train_start" in tm:
            tm["phase2_s"] = tm["train_end"] - tm["train_start"]
    by_step = {tm["step"]: tm for tm in timings}
    for tr in traces:
        tm = by_step[tr.engine_step]
        tr.phase1_s = tm["phase1_s"]
        tr.phase2_s = tm.get("phase2_s", 0.0)
    if session.timing_path is not None:
        with open(session.timing_path, "w") as fh:
            for tm in timings:
                fh.write(json.dumps(tm, sort_keys=True) + "\n")
    return SessionResult(
        tokens=generated, traces=traces, events=events, timings=timings, hidden=hidden,
        rows_trained=rows_trained,
        distiller_updates=[s.updates for s in scope.states] if scope else [],
        scope=scope,
        ring_high_water=ring.high_water if ring else 0,
        ring_overwrite_attempts=ring.overwrite_attempts if ring else 0,
    )

