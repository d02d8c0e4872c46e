import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from esamp import metrics, sampler
from esamp.numerics import AdamState, adam_step, softmax, sym_eigenvalues
from esamp.verify import SimplexProblem, closed_form_policy, lagrangian_residual, objective

finite = st.floats(-30.0, 30.0, allow_nan=False, allow_infinity=False)


def vectors(min_size=2, max_size=12):
    return st.integers(min_size, max_size).flatmap(lambda n: arrays(np.float64, n, elements=finite))


def pairs(min_size=2, max_size=12):
    return st.integers(min_size, max_size).flatmap(
        lambda n: st.tuples(arrays(np.float64, n, elements=finite), arrays(np.float64, n, elements=finite)))


@given(vectors(), st.floats(-100, 100))
def test_softmax_is_a_shift_invariant_distribution(x, c):
    p = softmax(x)
    assert np.all(p >= 0) and abs(p.sum() - 1.0) <= 1e-12
    assert np.max(np.abs(softmax(x + c) - p)) <= 1e-12


@given(pairs(), st.sampled_from([0.0, 0.1, 0.25, 0.5, 1.0]))
def test_fusion_equals_normalized_ratio(xy, beta):
    ref, dist = xy
    p, q = softmax(ref), softmax(dist)
    # ratio form in log space: (1 + beta) log p - beta log q
    w = np.exp((1 + beta) * np.log(p) - beta * np.log(q) - np.max((1 + beta) * np.log(p) - beta * np.log(q)))
    assert np.max(np.abs(softmax(sampler.fuse_logits(ref, dist, beta)) - w / w.sum())) <= 1e-10


@given(vectors(), st.floats(-50, 50), st.floats(0.0, 2.0))
def test_constant_shift_distiller_is_inert(ref, c, beta):
    assert np.max(np.abs(softmax(sampler.fuse_logits(ref, ref + c, beta)) - softmax(ref))) <= 1e-10


@given(st.integers(1, 6), st.integers(2, 10), st.integers(0, 2**32 - 1), st.floats(0.0, 2.0))
def test_decomposition_identity(d, V, seed, beta):
    rng = np.random.default_rng(seed)
    head, e, hL = rng.normal(size=(V, d)), rng.normal(size=d), rng.normal(size=d)
    sig = sampler.novelty_decomposition(e, head, beta=beta)
    gap = head @ sampler.fuse_latent(hL, hL - e, beta) - head @ hL
    assert np.max(np.abs(sig.delta_logit - gap)) <= 1e-9
    assert sig.identity_residual() <= 1e-9


@given(vectors(), st.integers(1, 12))
def test_top_k_keeps_the_k_largest(x, k):
    keep = sampler.retained_mask(x, sampler.FilterPolicy("top-k", k))
    assert keep.sum() == min(k, x.size)
    if keep.sum() < x.size:
        assert x[keep].min() >= x[~keep].max()


@given(vectors(), st.floats(0.01, 1.0))
def test_top_p_and_min_p_keep_the_argmax(x, p):
    for kind in ("top-p", "min-p"):
        keep = sampler.retained_mask(x, sampler.FilterPolicy(kind, p))
        assert keep[int(np.argmax(x))]


@given(vectors(), st.floats(0.0, 0.999999), st.floats(0.1, 5.0))
def test_sample_token_lands_on_a_live_token(x, u, T):
    x = x.copy()
    x[::2] = -np.inf
    tok = sampler.sample_token(x, T, u=u)
    assert np.isfinite(x[tok])


@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-10, 10)), st.integers(0, 2**32 - 1))
def test_matched_noise_keeps_the_norm(e, seed):
    g = sampler.matched_noise_vector(e, np.random.default_rng(seed))
    assert abs(np.linalg.norm(g) - np.linalg.norm(e)) <= 1e-12 * max(1.0, np.linalg.norm(e))


@given(arrays(np.float64, st.integers(1, 8), elements=finite))
def test_adam_zero_gradient_is_noop(p):
    params = [p.copy()]
    adam_step(params, [np.zeros_like(p)], AdamState.zeros_like(params))
    assert np.array_equal(params[0], p)


@settings(max_examples=50)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_eigenvalues_preserve_trace_and_frobenius(n, seed):
    a = np.random.default_rng(seed).normal(size=(n, n))
    k = a + a.T
    lam = sym_eigenvalues(k)
    assert abs(lam.sum() - np.trace(k)) <= 1e-9 * max(1.0, np.abs(k).sum())
    assert abs(np.sum(lam**2) - np.sum(k**2)) <= 1e-9 * max(1.0, np.sum(k**2))


@given(st.integers(1, 8), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_vendi_range_and_eigen_mass(n, d, seed):
    e = np.random.default_rng(seed).normal(size=(n, d))
    vs = metrics.vendi_score(e)
    assert 1.0 - 1e-9 <= vs <= n + 1e-9
    u = e / np.linalg.norm(e, axis=1, keepdims=True)
    assert abs(sym_eigenvalues(u @ u.T / n).sum() - 1.0) <= 1e-9


@given(st.integers(2, 8), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_pairwise_cosine_is_permutation_invariant(n, d, seed):
    rng = np.random.default_rng(seed)
    e = rng.normal(size=(n, d))
    a, b = metrics.pairwise_cosine_mean(e), metrics.pairwise_cosine_mean(e[rng.permutation(n)])
    assert abs(a - b) <= 1e-12 and -1.0 - 1e-12 <= a <= 1.0 + 1e-12


def test_pass_at_k_is_monotone_over_the_full_small_grid():
    for n in range(1, 13):
        for c in range(n + 1):
            for k in range(1, n + 1):
                v = metrics.pass_at_k(n, c, k)
                assert 0.0 <= v <= 1.0
                if k < n:
                    assert metrics.pass_at_k(n, c, k + 1) >= v - 1e-15
                if c < n:
                    assert metrics.pass_at_k(n, c + 1, k) >= v - 1e-15


@given(st.integers(2, 16), st.floats(0.1, 10.0), st.integers(0, 2**32 - 1))
def test_closed_form_is_stationary_and_locally_optimal(m, alpha, seed):
    rng = np.random.default_rng(seed)
    ref = rng.dirichlet(np.ones(m))
    ref = np.maximum(ref, 1e-6)
    p = SimplexProblem(rng.normal(size=m), ref / ref.sum(), alpha)
    star = closed_form_policy(p)
    assert lagrangian_residual(p, star)[1] <= 1e-8
    q = np.maximum(star + rng.normal(scale=0.01, size=m), 1e-12)
    assert objective(p, star) >= objective(p, q / q.sum()) - 1e-12
