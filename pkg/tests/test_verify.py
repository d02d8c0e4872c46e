import copy
import json
import math
from fractions import Fraction

import jsonschema
import numpy as np
import pytest

from esamp import verify as v
from esamp.backbone import BackboneSpec, build_tiny_transformer
from esamp.engine import DecodeSession, run_session
from esamp.errors import ContractError, DimensionError
from esamp.sampler import PLACEMENT_POST_FILTER, FilterPolicy, FusionConfig, set_fault_injection

H = Fraction(1, 2)


def test_problem_validation():
    with pytest.raises(ContractError):
        v.SimplexProblem(np.zeros(1), np.ones(1), 1.0)
    with pytest.raises(ContractError):
        v.SimplexProblem(np.zeros(2), np.array([1.0, 0.0]), 1.0)
    with pytest.raises(ContractError):
        v.SimplexProblem(np.zeros(2), np.array([0.5, 0.5]), 0.0)
    with pytest.raises(DimensionError):
        v.SimplexProblem(np.zeros(3), np.array([0.5, 0.5]), 1.0)


def test_closed_form_examples():
    p = v.SimplexProblem(np.array([math.log(2) * 3.0, 0.0]), np.array([0.5, 0.5]), 3.0)
    assert np.allclose(v.closed_form_policy(p), [2 / 3, 1 / 3], atol=1e-15)
    ref = np.array([0.2, 0.3, 0.5])
    p = v.SimplexProblem(np.full(3, 7.0), ref, 0.4)
    assert np.allclose(v.closed_form_policy(p), ref, atol=1e-15)


@pytest.mark.parametrize("method", ["scaled-gradient", "grid"])
def test_numeric_solver_limits(method):
    ref = np.array([0.2, 0.3, 0.5])
    sol = v.solve_kl_problem_numeric(v.SimplexProblem(np.zeros(3), ref, 1.0), method)
    assert v.total_variation(sol.pi, ref) <= (1e-10 if method != "grid" else 1e-3)
    sol = v.solve_kl_problem_numeric(v.SimplexProblem(np.array([1.0, -1.0, 0.5]), ref, 1e6), method)
    assert v.total_variation(sol.pi, ref) <= 1e-4 + (1e-3 if method == "grid" else 0.0)


@pytest.mark.parametrize("seed", range(10))
def test_numeric_matches_closed_form(seed):
    p = v.random_problem(np.random.default_rng(seed))
    sol = v.solve_kl_problem_numeric(p)
    star = v.closed_form_policy(p)
    assert sol.converged and v.total_variation(sol.pi, star) <= 1e-6
    assert v.objective(p, star) >= v.objective(p, sol.pi) - 1e-8
    assert v.lagrangian_residual(p, star)[1] <= 1e-8


def test_grid_solver_small_m():
    rng = np.random.default_rng(3)
    for m in (2, 3):
        p = v.random_problem(rng, m=m, alpha=1.0)
        g = v.solve_kl_problem_numeric(p, "grid")
        assert v.total_variation(g.pi, v.closed_form_policy(p)) <= 3e-3
    assert v.simplex_grid(2, 0.25).tolist() == [[0.25, 0.75], [0.5, 0.5], [0.75, 0.25]]  # interior only
    assert np.allclose(v.simplex_grid(3, 0.5).sum(axis=1), 1.0)
    with pytest.raises(ContractError):
        v.solve_kl_problem_numeric(v.random_problem(rng, m=5), "grid")


def test_closed_form_beats_perturbations():
    rng = np.random.default_rng(4)
    p = v.random_problem(rng, m=6)
    star = v.closed_form_policy(p)
    best = v.objective(p, star)
    for _ in range(1000):
        q = np.maximum(star + rng.normal(scale=0.05, size=6), 1e-12)
        assert best >= v.objective(p, q / q.sum())


def _two_region(rearming=False, gamma=Fraction(1)):
    return v.ToyMDP(succ=((1, 0), (0, 1)), reward=(Fraction(1), Fraction(2)), pi_ref=((H, H), (H, H)),
                    horizon=3, gamma=gamma, rearming=rearming)


def test_two_region_mdp():
    mdp = _two_region()
    assert mdp.closure_mask(0) == 0b11
    Q, reachable, capped = v.solve_q(mdp)
    assert not capped and mdp.initial_state() in reachable
    for (s, a), q in Q.items():
        assert isinstance(q, Fraction) and q == mdp.reward_of(s, a)
    rep = v.check_proposition_q_equals_r(mdp)
    assert rep.passed and len(rep.checks) == 4


def test_rearming_control_breaks_equality():
    c = v.q_check(_two_region(rearming=True))
    assert not c.q_equals_r and c.max_gap > 0


def test_zero_reward_q_is_zero():
    mdp = v.random_toy_mdp(np.random.default_rng(5), zero_reward=True)
    Q, _, _ = v.solve_q(mdp)
    assert all(q == 0 and isinstance(q, Fraction) for q in Q.values())


@pytest.mark.parametrize("seed", range(5))
def test_random_mdps(seed):
    rng = np.random.default_rng(seed)
    mdp = v.random_toy_mdp(rng)
    assert v.check_proposition_q_equals_r(mdp).passed
    with pytest.raises(ContractError):
        v.check_proposition_q_equals_r(v.random_toy_mdp(rng, rearming=True))
    assert mdp.n_regions <= v.MAX_REGIONS


def test_toy_mdp_validation():
    with pytest.raises(ContractError):
        v.ToyMDP(((0,),), (Fraction(1),), ((Fraction(1),),), horizon=11)
    with pytest.raises(ContractError):
        v.ToyMDP(((1,),), (Fraction(1),), ((Fraction(1),),), horizon=2)
    with pytest.raises(ContractError):
        v.ToyMDP(((0,),), (Fraction(1),), ((H,),), horizon=2)


def _traced(beta=0.25, fusion=None, steps=12):
    bb = build_tiny_transformer(BackboneSpec(vocab_size=20, d_model=16, n_layers=2, n_heads=2, max_context=40))
    fusion = fusion or FusionConfig(beta=beta)
    res = run_session(DecodeSession(bb, [[1, 2]], samples_per_prompt=2, fusion=fusion, max_new_tokens=steps,
                                    distiller_width=24, trace_vectors=True))
    return bb, res


def test_audit_clean_session():
    bb, res = _traced()
    rep = v.session_identity_audit(res.traces, bb.head, 0.25)
    assert rep.passed and rep.fused_steps == rep.steps == 24 and rep.max_deviation <= 1e-9


def test_audit_post_filter_session_from_json():
    fusion = FusionConfig(beta=0.5, filter=FilterPolicy("top-k", 4), placement=PLACEMENT_POST_FILTER)
    bb, res = _traced(fusion=fusion)
    records = [json.loads(line) for line in res.trace_lines()]
    rep = v.session_identity_audit(records, bb.head, 0.5)
    assert rep.passed and rep.fused_steps == 24


def test_audit_beta_zero_is_reference():
    bb, res = _traced(beta=0.0)
    for t in res.traces:
        assert t.vectors["logits_new"] == t.vectors["logits_ref"]
    rep = v.session_identity_audit(res.traces, bb.head, 0.0)
    assert rep.passed and rep.max_deviation <= 1e-15


def test_audit_flags_the_corrupted_step():
    bb, res = _traced()
    records = [json.loads(line) for line in res.trace_lines()]
    bad = copy.deepcopy(records)
    bad[7]["vectors"]["logits_new"][3] += 1e-3
    rep = v.session_identity_audit(bad, bb.head, 0.25)
    assert rep.flagged == [(bad[7]["seq"], bad[7]["step"])]


def test_audit_detects_fault_injection():
    try:
        set_fault_injection(True)
        bb, res = _traced()
    finally:
        set_fault_injection(False)
    rep = v.session_identity_audit(res.traces, bb.head, 0.25)
    assert not rep.passed and len(rep.flagged) == rep.fused_steps


def test_audit_missing_fields():
    with pytest.raises(ContractError):
        v.session_identity_audit([{"seq": 0, "step": 0}], np.eye(2), 0.25)
    rec = {"seq": 0, "step": 0, "vectors": {"logits_ref": [0.0, 0.0], "logits_dist": [0.0, 0.0]}}
    with pytest.raises(ContractError):
        v.session_identity_audit([rec], np.eye(2), 0.25)


def test_suite_report_schema():
    rep = v.run_verify_suite(seed=1, n_problems=20, n_mdps=5, audit_steps=16)
    jsonschema.validate(rep, v.REPORT_JSON_SCHEMA)
    assert rep["passed"], [c for c in rep["checks"] if not c["passed"]]
    names = [c["name"] for c in rep["checks"]]
    assert names == ["closed-form-vs-numeric", "lagrangian-stationarity", "closed-form-vs-grid", "q-equals-r",
                     "rearming-control-violates", "zero-reward-q-is-zero", "session-identity-audit"]
    json.dumps(rep, allow_nan=False)
