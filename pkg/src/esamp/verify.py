"""Numerical checks of the sampler's mathematical backing.

Three groups of checks:

* the KL-regularized one-step problem ``max_pi E_pi[r] - alpha KL(pi || pi_ref)``
  solved numerically and compared with ``pi_ref * exp(r / alpha)``;
* exact backward induction on small region-exploration MDPs, showing that the
  optimal soft Q-function equals the immediate reward when explored regions can
  never pay again, and that it does not when rewards stay armed;
* a replay audit of logged decode steps that recomputes each step's policy from
  the probability-ratio form, the fused-logit form and the per-token
  ``beta * <w_z, e>`` decomposition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError
from .numerics import log_softmax, softmax
from .sampler import novelty_decomposition

VERIFY_SCHEMA = "esamp.verify/1"

# JSON schema of the report returned by ``run_verify_suite``
REPORT_JSON_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema", "passed", "checks"],
    "properties": {
        "schema": {"const": VERIFY_SCHEMA},
        "passed": {"type": "boolean"},
        "fault_injection": {"type": "boolean"},
        "seed": {"type": "integer"},
        "checks": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "passed", "detail"],
                "properties": {
                    "name": {"type": "string"},
                    "passed": {"type": "boolean"},
                    "detail": {"type": "object"},
                },
            },
        },
    },
}


# one-step KL problem ---------------------------------------------------------

@dataclass(frozen=True)
class SimplexProblem:
    r: np.ndarray
    pi_ref: np.ndarray
    alpha: float

    def __post_init__(self):
        r = np.asarray(self.r, dtype=np.float64)
        p = np.asarray(self.pi_ref, dtype=np.float64)
        if r.ndim != 1 or p.shape != r.shape:
            raise DimensionError("r and pi_ref must be 1-d vectors of equal length")
        if r.size < 2:
            raise ContractError("need at least two actions")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(p))):
            raise NumericError("problem data must be finite")
        if np.any(p <= 0) or abs(float(p.sum()) - 1.0) > 1e-9:
            raise ContractError("pi_ref must be a strictly positive distribution")
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ContractError("alpha must be positive")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "pi_ref", p)

    @property
    def m(self) -> int:
        return self.r.size


def random_problem(rng: np.random.Generator, m: int | None = None, alpha: float | None = None) -> SimplexProblem:
    m = int(rng.integers(2, 17)) if m is None else m
    alpha = float(rng.uniform(0.1, 10.0)) if alpha is None else alpha
    pi_ref = rng.dirichlet(np.ones(m))
    pi_ref = np.maximum(pi_ref, 1e-6)
    return SimplexProblem(rng.normal(size=m), pi_ref / pi_ref.sum(), alpha)


def objective(p: SimplexProblem, pi: np.ndarray) -> float:
    """``E_pi[r] - alpha * KL(pi || pi_ref)``; zero entries contribute nothing to the KL."""
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != p.r.shape:
        raise DimensionError("policy length differs from the problem")
    nz = pi > 0
    kl = float(np.sum(pi[nz] * (np.log(pi[nz]) - np.log(p.pi_ref[nz]))))
    return float(np.dot(pi, p.r)) - p.alpha * kl


def closed_form_policy(p: SimplexProblem) -> np.ndarray:
    """``pi_ref * exp(r / alpha)`` normalized in log space."""
    return softmax(np.log(p.pi_ref) + p.r / p.alpha)


def lagrangian_residual(p: SimplexProblem, pi: np.ndarray) -> tuple[float, float]:
    """Stationarity terms ``r - alpha (ln pi + 1) + alpha ln pi_ref``; returns (lambda, spread).

    At an interior optimum every coordinate equals the same multiplier
    ``lambda``; the spread is the largest deviation from coordinate 0.
    """
    pi = np.asarray(pi, dtype=np.float64)
    if np.any(pi <= 0):
        raise NumericError("stationarity needs a strictly positive policy")
    v = p.r - p.alpha * (np.log(pi) + 1.0) + p.alpha * np.log(p.pi_ref)
    lam = float(v[0])
    return lam, float(np.max(np.abs(v - lam)))


@dataclass
class SolveResult:
    pi: np.ndarray
    iterations: int
    converged: bool
    residual: float
    method: str


def _kl_gradient(p: SimplexProblem, pi: np.ndarray) -> np.ndarray:
    return p.r - p.alpha * (np.log(pi) + 1.0 - np.log(p.pi_ref))


def _solve_scaled_gradient(p: SimplexProblem, max_iter: int, tol: float) -> SolveResult:
    # Gradient ascent in the metric diag(pi / alpha) (the inverse curvature of
    # the entropy term), projected onto the simplex's tangent plane, with a
    # fraction-to-boundary cap and Armijo backtracking.
    pi = np.full(p.m, 1.0 / p.m)
    J = objective(p, pi)
    gtol = tol * (1.0 + float(np.max(np.abs(p.r))) + p.alpha)
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        g = _kl_gradient(p, pi)
        scale = pi / p.alpha
        mu = float(np.dot(scale, g) / scale.sum())
        if float(np.max(np.abs(g - mu))) <= gtol:
            converged = True
            break
        d = scale * (g - mu)
        slope = float(np.dot(g, d))
        neg = d < 0
        t = 1.0
        if np.any(neg):
            t = min(1.0, 0.99 * float(np.min(-pi[neg] / d[neg])))
        # objective changes from tiny coordinates fall below float resolution
        slack = 8.0 * np.finfo(float).eps * (abs(J) + 1.0)
        while t >= 1e-20:
            cand = pi + t * d
            if np.all(cand > 0):
                cand /= cand.sum()
                Jc = objective(p, cand)
                if Jc >= J + 1e-4 * t * slope - slack:
                    break
            t *= 0.5
        if t < 1e-20:
            break
        pi, J = cand, Jc
    spread = lagrangian_residual(p, pi)[1]
    return SolveResult(pi, it, converged, spread, "scaled-gradient")


def simplex_grid(m: int, resolution: float) -> np.ndarray:
    """All strictly positive points of the simplex on a lattice of the given spacing."""
    n = int(round(1.0 / resolution))
    if m == 2:
        i = np.arange(1, n)
        return np.stack([i, n - i], axis=1) / n
    if m == 3:
        i, j = np.meshgrid(np.arange(1, n), np.arange(1, n), indexing="ij")
        keep = i + j < n
        i, j = i[keep], j[keep]
        return np.stack([i, j, n - i - j], axis=1) / n
    raise ContractError("the exhaustive grid is only available for m <= 3")


def _solve_grid(p: SimplexProblem, resolution: float) -> SolveResult:
    pts = simplex_grid(p.m, resolution)
    vals = pts @ p.r - p.alpha * np.sum(pts * (np.log(pts) - np.log(p.pi_ref)), axis=1)
    best = pts[int(np.argmax(vals))]
    return SolveResult(best, len(pts), True, lagrangian_residual(p, best)[1], "grid")


def solve_kl_problem_numeric(p: SimplexProblem, method: str = "scaled-gradient", *, max_iter: int = 10_000,
                             tol: float = 1e-12, resolution: float = 1e-3) -> SolveResult:
    """Numeric maximizer of the KL-regularized objective, found without the closed form.

    ``method="grid"`` evaluates every lattice point for ``m <= 3``.  A solver
    that exhausts its budget returns ``converged=False`` with its residual.
    """
    if method == "scaled-gradient":
        return _solve_scaled_gradient(p, max_iter, tol)
    if method == "grid":
        return _solve_grid(p, resolution)
    raise ConfigError(f"unknown solver {method!r}")


def total_variation(a: np.ndarray, b: np.ndarray) -> float:
    return 0.5 * float(np.sum(np.abs(np.asarray(a) - np.asarray(b))))


# region-exploration MDP ------------------------------------------------------

MAX_REGIONS = 8
MAX_HORIZON = 10
MAX_ACTIONS = 4


@dataclass(frozen=True)
class ToyMDP:
    """Deterministic walk over semantic regions with a visited-region registry.

    State is ``(t, region, registry bitmask)``.  Action ``a`` moves from region
    ``x`` to ``succ[x][a]`` and pays ``reward[next]`` unless ``next`` is
    already registered.  Entering a region registers everything reachable from
    it, so an explored region can never lead to paid continuations.  With
    ``rearming=True`` only the entered region itself is registered and
    unexplored neighbours keep paying.
    """

    succ: tuple[tuple[int, ...], ...]
    reward: tuple[Fraction, ...]
    pi_ref: tuple[tuple[Fraction, ...], ...]
    horizon: int
    gamma: Fraction = Fraction(1)
    alpha: Fraction = Fraction(1)
    start: int = 0
    rearming: bool = False

    def __post_init__(self):
        n = len(self.succ)
        if not 1 <= n <= MAX_REGIONS:
            raise ContractError(f"need 1..{MAX_REGIONS} regions")
        if not 1 <= self.horizon <= MAX_HORIZON:
            raise ContractError(f"horizon must be in 1..{MAX_HORIZON}")
        n_act = len(self.succ[0])
        if not 1 <= n_act <= MAX_ACTIONS:
            raise ContractError(f"need 1..{MAX_ACTIONS} actions")
        for row, pr in zip(self.succ, self.pi_ref):
            if len(row) != n_act or len(pr) != n_act:
                raise DimensionError("every region needs the same action count")
            if any(not 0 <= s < n for s in row):
                raise ContractError("transition leaves the region set")
            if any(q <= 0 for q in pr) or sum(pr) != 1:
                raise ContractError("pi_ref rows must be strictly positive distributions")
        if len(self.reward) != n or any(r < 0 for r in self.reward):
            raise ContractError("one non-negative reward per region is required")
        if not 0 < self.gamma <= 1:
            raise ContractError("gamma must lie in (0, 1]")
        if self.alpha <= 0 or not 0 <= self.start < n:
            raise ContractError("alpha must be positive and start a valid region")

    @property
    def n_regions(self) -> int:
        return len(self.succ)

    @property
    def n_actions(self) -> int:
        return len(self.succ[0])

    def closure_mask(self, region: int) -> int:
        """Bitmask of every region reachable from ``region`` (itself included)."""
        seen, todo = {region}, [region]
        while todo:
            x = todo.pop()
            for y in self.succ[x]:
                if y not in seen:
                    seen.add(y)
                    todo.append(y)
        return sum(1 << y for y in seen)

    def initial_state(self) -> tuple[int, int, int]:
        return (0, self.start, 0)

    def reward_of(self, state: tuple[int, int, int], action: int) -> Fraction:
        _, region, registry = state
        nxt = self.succ[region][action]
        return Fraction(0) if registry >> nxt & 1 else Fraction(self.reward[nxt])

    def step(self, state: tuple[int, int, int], action: int) -> tuple[int, int, int]:
        t, region, registry = state
        nxt = self.succ[region][action]
        added = (1 << nxt) if self.rearming else self.closure_mask(nxt)
        return (t + 1, nxt, registry | added)


def random_toy_mdp(rng: np.random.Generator, *, rearming: bool = False, gamma: Fraction = Fraction(1),
                   zero_reward: bool = False) -> ToyMDP:
    """Random small MDP; action 0 always moves to the next region so every walk can keep exploring."""
    n = int(rng.integers(2, MAX_REGIONS + 1))
    n_act = int(rng.integers(2, MAX_ACTIONS + 1))
    horizon = int(rng.integers(2, MAX_HORIZON + 1))
    succ = tuple(((x + 1) % n, *(int(v) for v in rng.integers(0, n, n_act - 1))) for x in range(n))
    reward = tuple(Fraction(0) if zero_reward else Fraction(int(v), int(rng.integers(1, 4)))
                   for v in rng.integers(1, 6, n))
    pi_ref = []
    for _ in range(n):
        w = [int(v) for v in rng.integers(1, 5, n_act)]
        pi_ref.append(tuple(Fraction(v, sum(w)) for v in w))
    return ToyMDP(succ, reward, tuple(pi_ref), horizon, gamma, Fraction(1), int(rng.integers(0, n)), rearming)


def _soft_value(mdp: ToyMDP, region: int, qs: Sequence) -> Fraction | float:
    # alpha * log sum_a pi_ref(a) exp(Q(a) / alpha); exactly zero when every Q is
    # exactly zero because the pi_ref row sums to one
    if all(isinstance(q, Fraction) and q == 0 for q in qs):
        return Fraction(0)
    a = float(mdp.alpha)
    x = np.array([float(q) / a for q in qs])
    w = np.array([float(v) for v in mdp.pi_ref[region]])
    top = float(x.max())
    return a * (top + math.log(float(np.dot(w, np.exp(x - top)))))


@dataclass
class QCheck:
    gamma: float
    rearming: bool
    states: int
    pairs: int
    equal_pairs: int
    max_gap: float
    definition_holds: bool
    capped: bool

    @property
    def q_equals_r(self) -> bool:
        return not self.capped and self.equal_pairs == self.pairs


def solve_q(mdp: ToyMDP, max_states: int = 200_000):
    """Exact Q* by backward induction over the reachable augmented states.

    Returns ``(Q, reachable, capped)`` where ``Q[(state, action)]`` is a
    Fraction whenever the value is rational (always the case when every
    continuation pays nothing) and a float otherwise.
    """
    layers = [{mdp.initial_state()}]
    total = 1
    capped = False
    for _ in range(mdp.horizon - 1):
        nxt = {mdp.step(s, a) for s in layers[-1] for a in range(mdp.n_actions)}
        total += len(nxt)
        if total > max_states:
            capped = True
            break
        layers.append(nxt)
    Q: dict = {}
    V: dict = {}
    for t in range(len(layers) - 1, -1, -1):
        for s in layers[t]:
            qs = []
            for a in range(mdp.n_actions):
                r = mdp.reward_of(s, a)
                s2 = mdp.step(s, a)
                cont = V.get(s2, Fraction(0)) if s2[0] < mdp.horizon else Fraction(0)
                q = r + mdp.gamma * cont if isinstance(cont, Fraction) else float(r) + float(mdp.gamma) * cont
                Q[(s, a)] = q
                qs.append(q)
            V[s] = _soft_value(mdp, s[1], qs)
    reachable = [s for layer in layers for s in layer]
    return Q, reachable, capped


def _definition_holds(mdp: ToyMDP, reachable) -> bool:
    # zero reward now must imply zero reward on every continuation
    best: dict = {}
    for s in sorted(reachable, key=lambda s: -s[0]):
        m = Fraction(0)
        for a in range(mdp.n_actions):
            s2 = mdp.step(s, a)
            fut = best.get(s2, Fraction(0)) if s2[0] < mdp.horizon else Fraction(0)
            m = max(m, mdp.reward_of(s, a) + fut)
        best[s] = m
    for s in reachable:
        for a in range(mdp.n_actions):
            s2 = mdp.step(s, a)
            if mdp.reward_of(s, a) == 0 and s2[0] < mdp.horizon and best.get(s2, Fraction(0)) != 0:
                return False
    return True


def q_check(mdp: ToyMDP, max_states: int = 200_000) -> QCheck:
    Q, reachable, capped = solve_q(mdp, max_states)
    equal = 0
    gap = 0.0
    for (s, a), q in Q.items():
        r = mdp.reward_of(s, a)
        if isinstance(q, Fraction) and q == r:
            equal += 1
        else:
            gap = max(gap, abs(float(q) - float(r)))
    return QCheck(float(mdp.gamma), mdp.rearming, len(reachable), len(Q), equal, gap,
                  _definition_holds(mdp, reachable), capped)


@dataclass
class PropositionReport:
    checks: list[QCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        vanishing = [c for c in self.checks if not c.rearming]
        controls = [c for c in self.checks if c.rearming]
        return (all(c.q_equals_r and c.definition_holds for c in vanishing)
                and all(not c.capped and not c.q_equals_r for c in controls))


def check_proposition_q_equals_r(mdp: ToyMDP, gammas: Sequence[Fraction] = (Fraction(9, 10), Fraction(1)),
                                 control: bool = True, max_states: int = 200_000) -> PropositionReport:
    """Q* == r on every reachable pair of ``mdp`` for each discount, plus the re-arming control.

    The control is the same MDP with ``rearming=True``; it passes when the
    equality fails there.
    """
    if mdp.rearming:
        raise ContractError("pass the vanishing-redundancy variant; the control is derived from it")
    rep = PropositionReport()
    for g in gammas:
        rep.checks.append(q_check(replace(mdp, gamma=Fraction(g)), max_states))
        if control:
            rep.checks.append(q_check(replace(mdp, gamma=Fraction(g), rearming=True), max_states))
    return rep


# session audit ---------------------------------------------------------------

@dataclass
class AuditReport:
    steps: int
    fused_steps: int
    max_deviation: float
    max_decomposition_residual: float
    worst: tuple[int, int] | None
    flagged: list[tuple[int, int]]
    tol: float

    @property
    def passed(self) -> bool:
        return not self.flagged


def _record(rec: Any) -> dict:
    if isinstance(rec, dict):
        return rec
    return {"seq": rec.seq, "step": rec.step, "vectors": rec.vectors}


def session_identity_audit(records: Iterable, head: np.ndarray, beta: float, tol: float = 1e-9) -> AuditReport:
    """Replay every logged step's fused policy three ways and report the largest disagreement.

    Records are trace dicts (or StepTrace objects) logged with vectors.  For
    each step with a distiller prediction:

    * ratio form: ``pi_ref^(1 + beta) / q_dist^beta`` normalized;
    * logit form: softmax of the logits the engine actually sampled from;
    * decomposition: ``logits_ref + beta * <w_z, e>`` per token.

    Steps whose three policies, or whose logit shift and ``beta * <w_z, e>``,
    disagree by more than ``tol`` are flagged as ``(seq, step)``.  Steps
    without a prediction are counted but have nothing to replay.
    """
    head = np.asarray(head, dtype=np.float64)
    n = fused = 0
    worst_dev, worst_res, worst = 0.0, 0.0, None
    flagged = []
    for rec in records:
        rec = _record(rec)
        vec = rec.get("vectors")
        if vec is None or "logits_ref" not in vec or "seq" not in rec or "step" not in rec:
            raise ContractError(f"trace record lacks logged vectors: {sorted(rec)}")
        n += 1
        if "logits_dist" not in vec:
            continue
        for key in ("logits_new", "e"):
            if key not in vec:
                raise ContractError(f"trace record with a prediction lacks {key!r}")
        fused += 1
        ref = np.asarray(vec["logits_ref"], dtype=np.float64)
        dist = np.asarray(vec["logits_dist"], dtype=np.float64)
        new = np.array([-np.inf if v is None else v for v in vec["logits_new"]], dtype=np.float64)
        e = np.asarray(vec["e"], dtype=np.float64)
        if not (ref.shape == dist.shape == new.shape):
            raise ContractError("logged logit vectors differ in length")
        keep = np.isfinite(new)  # post-filter steps carry masked entries
        sig = novelty_decomposition(e, head, np.flatnonzero(keep), beta, tol=np.inf)
        # ratio form in probability space
        p = np.exp(log_softmax(ref[keep]))
        q = np.exp(log_softmax(dist[keep]))
        w = p ** (1.0 + beta) * q ** (-beta)
        pa = w / w.sum()
        pb = softmax(new[keep])
        pc = softmax(ref[keep] + sig.delta_logit)
        dev = max(float(np.max(np.abs(pa - pb))), float(np.max(np.abs(pb - pc))),
                  float(np.max(np.abs(pa - pc))),
                  float(np.max(np.abs((new[keep] - ref[keep]) - sig.delta_logit))))
        res = sig.identity_residual()
        key = (int(rec["seq"]), int(rec["step"]))
        if max(dev, res) > worst_dev:
            worst = key
        worst_dev = max(worst_dev, dev, res)
        worst_res = max(worst_res, res)
        if not (dev <= tol and res <= tol):
            flagged.append(key)
    return AuditReport(n, fused, worst_dev, worst_res, worst, flagged, tol)


# suite -----------------------------------------------------------------------

def _check(name: str, passed: bool, **detail) -> dict:
    return {"name": name, "passed": bool(passed), "detail": detail}


def simplex_checks(rng: np.random.Generator, n_problems: int = 200, tv_tol: float = 1e-5,
                   residual_tol: float = 1e-8) -> list[dict]:
    worst_tv = worst_res = worst_gap = 0.0
    failures = 0
    for _ in range(n_problems):
        p = random_problem(rng)
        star = closed_form_policy(p)
        sol = solve_kl_problem_numeric(p)
        tv = total_variation(sol.pi, star)
        res = lagrangian_residual(p, star)[1]
        gap = objective(p, sol.pi) - objective(p, star)
        worst_tv, worst_res, worst_gap = max(worst_tv, tv), max(worst_res, res), max(worst_gap, gap)
        if not (sol.converged and tv <= tv_tol and res <= residual_tol and gap <= 1e-8):
            failures += 1
    grid_tv = 0.0
    grid_beaten = 0
    for m in (2, 3):
        for _ in range(5):
            p = random_problem(rng, m=m, alpha=float(rng.uniform(0.5, 5.0)))
            star = closed_form_policy(p)
            g = solve_kl_problem_numeric(p, "grid")
            grid_tv = max(grid_tv, total_variation(g.pi, star))
            grid_beaten += objective(p, g.pi) > objective(p, star) + 1e-12
    return [
        _check("closed-form-vs-numeric", failures == 0, problems=n_problems, max_tv=worst_tv,
               max_objective_gain_over_closed_form=worst_gap, tv_tol=tv_tol),
        _check("lagrangian-stationarity", worst_res <= residual_tol, max_spread=worst_res, tol=residual_tol),
        _check("closed-form-vs-grid", grid_beaten == 0 and grid_tv <= 3e-3, max_tv=grid_tv,
               grid_points_beating_closed_form=int(grid_beaten)),
    ]


def proposition_checks(rng: np.random.Generator, n_mdps: int = 40) -> list[dict]:
    ok = controls_violated = definition_ok = 0
    for _ in range(n_mdps):
        rep = check_proposition_q_equals_r(random_toy_mdp(rng))
        van = [c for c in rep.checks if not c.rearming]
        ctl = [c for c in rep.checks if c.rearming]
        ok += all(c.q_equals_r for c in van)
        definition_ok += all(c.definition_holds for c in van)
        controls_violated += all(not c.q_equals_r and not c.capped for c in ctl)
    zero = check_proposition_q_equals_r(random_toy_mdp(rng, zero_reward=True), control=False)
    return [
        _check("q-equals-r", ok == n_mdps and definition_ok == n_mdps, mdps=n_mdps, exact=ok,
               definition_holds=definition_ok),
        _check("rearming-control-violates", controls_violated == n_mdps, mdps=n_mdps, violated=controls_violated),
        _check("zero-reward-q-is-zero", zero.passed),
    ]


def audit_session(seed: int = 0, steps: int = 64, beta: float = 0.25):
    """Run a small traced session on the tiny transformer and audit it."""
    from .backbone import BackboneSpec, build_tiny_transformer
    from .engine import DecodeSession, run_session
    from .sampler import FusionConfig

    bb = build_tiny_transformer(BackboneSpec(vocab_size=48, d_model=32, n_layers=2, max_context=steps + 8,
                                             seed=seed))
    res = run_session(DecodeSession(bb, [[1, 2, 3]], samples_per_prompt=2, fusion=FusionConfig(beta=beta),
                                    max_new_tokens=steps, seed=seed, distiller_width=64, trace_vectors=True))
    return session_identity_audit(res.traces, bb.head, beta)


def run_verify_suite(seed: int = 0, n_problems: int = 200, n_mdps: int = 40, audit_steps: int = 64) -> dict:
    """Every check, as a JSON-ready report matching ``REPORT_JSON_SCHEMA``."""
    from .sampler import fault_injection_enabled

    rng = np.random.default_rng(seed)
    checks = simplex_checks(rng, n_problems)
    checks += proposition_checks(rng, n_mdps)
    audit = audit_session(seed, audit_steps)
    checks.append(_check("session-identity-audit", audit.passed and audit.fused_steps > 0, steps=audit.steps,
                         fused_steps=audit.fused_steps, max_deviation=audit.max_deviation,
                         flagged=[list(k) for k in audit.flagged[:20]], tol=audit.tol))
    return {"schema": VERIFY_SCHEMA, "seed": seed, "fault_injection": fault_injection_enabled(),
            "passed": all(c["passed"] for c in checks), "checks": checks}
