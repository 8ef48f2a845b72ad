import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcnet import infotheory as it
from lcnet.errors import InsufficientSamplesError, ZeroVarianceError
from lcnet.synth import analytic_gaussian_cmi, gaussian_triplet


# -- digamma -----------------------------------------------------------------


@pytest.mark.parametrize("x", [1e-3, 0.1, 0.5, 1.0, 1.5, 2.5, 7.0, 9.999, 10.0, 33.3, 1e3, 1e6])
def test_digamma_matches_mpmath(x):
    assert abs(it.digamma(x) - float(mpmath.digamma(x))) <= 1e-10 * max(1.0, abs(float(mpmath.digamma(x))))


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=1e-2, max_value=1e5))
def test_digamma_random_points(x):
    assert abs(it.digamma(x) - float(mpmath.digamma(x))) <= 1e-10


@pytest.mark.parametrize("x", [1.0, 2.5, 10.0])
def test_digamma_recurrence(x):
    assert abs(it.digamma(x + 1) - it.digamma(x) - 1.0 / x) <= 1e-10


def test_digamma_known_values():
    assert it.digamma(1.0) == pytest.approx(-0.5772156649015329, abs=1e-12)
    assert it.digamma(10.0) == pytest.approx(2.251752589066721, abs=1e-12)


def test_digamma_vectorized_and_domain():
    xs = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = it.digamma(xs)
    assert out.shape == xs.shape
    assert out[1, 1] == it.digamma(4.0)
    with pytest.raises(ValueError):
        it.digamma(0.0)
    with pytest.raises(ValueError):
        it.digamma(np.array([1.0, -2.0]))


# -- queries and preprocessing -----------------------------------------------------


def test_query_shapes_and_minimum_size():
    q = it.CmiQuery(np.arange(10.0), np.arange(10.0) ** 2, k=3)
    assert q.d_z == 0 and q.n == 10
    q = it.CmiQuery(np.arange(10.0), np.arange(10.0), np.arange(10.0), k=3)
    assert q.z.shape == (10, 1)
    with pytest.raises(InsufficientSamplesError):
        it.CmiQuery(np.arange(6.0), np.arange(6.0), k=5)
    with pytest.raises(ValueError):
        it.CmiQuery(np.arange(10.0), np.arange(9.0), k=3)


def test_preprocess_drops_constant_z_column():
    rng = np.random.default_rng(0)
    z = np.column_stack([rng.normal(size=50), np.full(50, -1e4), rng.normal(size=50)])
    q = it.preprocess_for_knn(it.CmiQuery(rng.normal(size=50), rng.normal(size=50), z))
    assert q.d_z == 2


def test_preprocess_breaks_ties_and_is_deterministic():
    x = np.repeat(np.arange(10.0), 5)
    y = np.tile(np.arange(5.0), 10)
    q0 = it.CmiQuery(x, y)
    a = it.preprocess_for_knn(q0, seed=3)
    b = it.preprocess_for_knn(q0, seed=3)
    assert np.unique(a.x).size == a.n and np.unique(a.y).size == a.n
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    c = it.preprocess_for_knn(q0, seed=4)
    assert not np.array_equal(a.x, c.x)


def test_preprocess_rejects_constant_x_or_y():
    with pytest.raises(ZeroVarianceError):
        it.preprocess_for_knn(it.CmiQuery(np.ones(20), np.arange(20.0)))
    with pytest.raises(ZeroVarianceError):
        it.preprocess_for_knn(it.CmiQuery(np.arange(20.0), np.ones(20)))


def test_standardize_transform():
    rng = np.random.default_rng(1)
    q = it.preprocess_for_knn(it.CmiQuery(rng.normal(5, 3, 100), rng.normal(size=100)), transform="standardize")
    assert abs(q.x.mean()) < 1e-6 and abs(q.x.std() - 1) < 1e-6
    with pytest.raises(ValueError):
        it.preprocess_for_knn(q, transform="bogus")


# -- estimators -------------------------------------------------------------------


def _prep(q, seed=0):
    return it.preprocess_for_knn(q, seed=seed)


def test_mi_independent_uniforms():
    vals = []
    for s in range(20):
        rng = np.random.default_rng(s)
        vals.append(it.estimate_mi(rng.random(2000), rng.random(2000), 5))
    assert abs(np.mean(vals)) <= 0.02


def test_mi_bivariate_gaussian():
    rng = np.random.default_rng(7)
    q = _prep(gaussian_triplet(0.9, 0, 10000, rng))
    assert abs(it.estimate_mi(q.x, q.y, 5) - 0.830366) <= 0.05


def test_mi_of_permuted_copy():
    rng = np.random.default_rng(3)
    x = rng.normal(size=3000)
    assert abs(it.estimate_mi(x, rng.permutation(x), 5)) <= 0.02


def test_cmi_without_z_is_mi_exactly():
    rng = np.random.default_rng(11)
    q = _prep(gaussian_triplet(0.5, 0, 700, rng))
    assert it.estimate_cmi(q) == it.estimate_mi(q.x, q.y, q.k)


def test_cmi_chain_null():
    rng = np.random.default_rng(5)
    z = rng.normal(size=5000)
    q = _prep(it.CmiQuery(z + rng.normal(size=5000), z + rng.normal(size=5000), z))
    assert abs(it.estimate_cmi(q)) <= 0.05


def test_cmi_gaussian_oracle():
    rng = np.random.default_rng(2)
    q = _prep(gaussian_triplet(0.6, 3, 10000, rng))
    assert abs(it.estimate_cmi(q) - analytic_gaussian_cmi(0.6)) <= 0.05


def test_brute_force_and_tree_counts_agree():
    rng = np.random.default_rng(4)
    q = _prep(gaussian_triplet(0.4, 2, 700, rng))
    tree = it.neighbor_counts(q)
    saved = it.BRUTE_FORCE_BELOW
    it.BRUTE_FORCE_BELOW = 10**9
    try:
        brute = it.neighbor_counts(q)
    finally:
        it.BRUTE_FORCE_BELOW = saved
    for name in ("eps", "k_z", "k_xz", "k_yz"):
        assert np.array_equal(getattr(tree, name), getattr(brute, name)), name


def test_counts_include_self_and_are_ordered():
    rng = np.random.default_rng(9)
    q = _prep(gaussian_triplet(0.3, 2, 300, rng))
    c = it.neighbor_counts(q)
    assert (c.eps > 0).all()
    assert (c.k_xz >= 1).all() and (c.k_yz >= 1).all()
    assert (c.k_z >= c.k_xz).all() and (c.k_z >= c.k_yz).all()


def test_rank_preprocessing_monotone_invariance():
    rng = np.random.default_rng(12)
    q = gaussian_triplet(0.5, 2, 800, rng)
    base = it.estimate_cmi(it.preprocess_for_knn(q, seed=1))
    z2 = q.z.copy()
    z2[:, 1] = np.exp(z2[:, 1])
    warped = it.CmiQuery(q.x**3, 2.0 * q.y + 7.0, z2, q.k)
    assert abs(it.estimate_cmi(it.preprocess_for_knn(warped, seed=1)) - base) <= 1e-9


# -- fast surrogate engine --------------------------------------------------------


@pytest.mark.parametrize("d_z,n,candidates", [(1, 300, 64), (1, 900, 64), (2, 600, 8), (4, 800, 64), (6, 1200, 8)])
def test_surrogate_engine_is_exact(d_z, n, candidates):
    rng = np.random.default_rng(d_z * 1000 + n)
    q = _prep(gaussian_triplet(0.3, d_z, n, rng))
    eng = it.SurrogateCmi(q.y, q.z, q.k, candidates=candidates)
    for trial in range(3):
        x = q.x if trial == 0 else rng.permutation(q.x)
        ref = it.neighbor_counts(it.CmiQuery(x, q.y, q.z, q.k))
        eps, k_z, k_xz, k_yz = eng.counts(x)
        assert np.array_equal(eps, ref.eps)
        assert np.array_equal(k_z, ref.k_z)
        assert np.array_equal(k_xz, ref.k_xz)
        assert np.array_equal(k_yz, ref.k_yz)
        assert eng(x) == it.estimate_cmi(it.CmiQuery(x, q.y, q.z, q.k))


@settings(max_examples=25, deadline=None)
@given(
    st.integers(min_value=0, max_value=10**6),
    st.integers(min_value=1, max_value=4),
    st.integers(min_value=12, max_value=200),
    st.integers(min_value=1, max_value=6),
)
def test_surrogate_engine_exact_property(seed, d_z, n, k):
    rng = np.random.default_rng(seed)
    if n < k + 2:
        return
    q = _prep(gaussian_triplet(float(rng.uniform(-0.9, 0.9)), d_z, n, rng, k=k), seed=seed)
    eng = it.SurrogateCmi(q.y, q.z, q.k, candidates=int(rng.integers(1, 40)))
    x = rng.permutation(q.x)
    assert eng(x) == it.estimate_cmi(it.CmiQuery(x, q.y, q.z, q.k))


# -- local permutation --------------------------------------------------------------


def test_local_permutation_is_a_rearrangement():
    rng = np.random.default_rng(0)
    q = _prep(gaussian_triplet(0.2, 2, 500, rng))
    for s in range(5):
        xs = it.local_permutation_surrogate(q, 5, np.random.default_rng(s))
        assert np.array_equal(np.sort(xs), np.sort(q.x))


def test_global_limit_is_plain_shuffle():
    rng = np.random.default_rng(1)
    q = _prep(gaussian_triplet(0.2, 0, 50, rng))
    xs = it.local_permutation_surrogate(q, 5, np.random.default_rng(3))
    assert np.array_equal(xs, np.random.default_rng(3).permutation(q.x))
    q2 = _prep(gaussian_triplet(0.2, 1, 50, rng))
    xs = it.local_permutation_surrogate(q2, 50, np.random.default_rng(3))
    assert np.array_equal(xs, np.random.default_rng(3).permutation(q2.x))


def test_local_permutation_preserves_x_z_dependence():
    rng = np.random.default_rng(8)
    z = rng.normal(size=2000)
    x = z + 0.2 * rng.normal(size=2000)
    y = rng.normal(size=2000)
    q = _prep(it.CmiQuery(x, y, z))
    base = it.estimate_mi(q.x, q.z, 5)
    local = it.estimate_mi(it.local_permutation_surrogate(q, 5, np.random.default_rng(0)), q.z, 5)
    shuffled = it.estimate_mi(np.random.default_rng(0).permutation(q.x), q.z, 5)
    assert abs(local - base) <= 0.2 * base
    assert abs(shuffled) <= 0.05


# -- CI test --------------------------------------------------------------------------


def test_ci_test_counting_form():
    rng = np.random.default_rng(0)
    z = rng.normal(size=400)
    x = rng.normal(size=400)
    q = _prep(it.CmiQuery(x, x + 0.05 * rng.normal(size=400), z))
    res = it.ci_test(q, it.CiTestConfig(B=100, seed=1))
    assert res.exceedances == 0 and res.p_value == 0.0 and res.significant
    assert len(res.surrogate_cmis) == 100
    assert res.p_value * 100 == int(np.sum(res.surrogate_cmis >= res.cmi))


def test_ci_test_power():
    rng = np.random.default_rng(1)
    y = rng.normal(size=500)
    z = rng.normal(size=(500, 2))
    q = _prep(it.CmiQuery(y + 1e-3 * rng.normal(size=500), y, z))
    assert it.ci_test(q, it.CiTestConfig(B=200, seed=2)).p_value <= 0.05


def test_ci_test_null_p_value_is_count_over_B_and_deterministic():
    rng = np.random.default_rng(2)
    z = rng.normal(size=600)
    q = _prep(it.CmiQuery(z + rng.normal(size=600), z + rng.normal(size=600), z))
    cfg = it.CiTestConfig(B=50, seed=9)
    a = it.ci_test(q, cfg)
    b = it.ci_test(q, cfg)
    assert a.p_value == b.p_value and np.array_equal(a.surrogate_cmis, b.surrogate_cmis)
    assert a.p_value * cfg.B == a.exceedances
    assert a.significant == (a.p_value <= cfg.alpha)


def test_ci_test_surrogates_match_slow_path():
    rng = np.random.default_rng(3)
    q = _prep(gaussian_triplet(0.0, 3, 700, rng))
    cfg = it.CiTestConfig(B=5, seed=4)
    res = it.ci_test(q, cfg)
    nbrs = it.z_neighbors(q.z, cfg.k_perm)
    for b in range(cfg.B):
        xs = it.local_permutation_surrogate(q, cfg.k_perm, it.surrogate_stream(cfg.seed, b), nbrs)
        assert res.surrogate_cmis[b] == it.estimate_cmi(it.CmiQuery(xs, q.y, q.z, q.k))


def test_ci_test_without_z_uses_global_shuffles():
    rng = np.random.default_rng(4)
    q = _prep(gaussian_triplet(0.0, 0, 200, rng))
    res = it.ci_test(q, it.CiTestConfig(B=20, seed=0))
    expect = it.estimate_mi(it.surrogate_stream(0, 3).permutation(q.x), q.y, q.k)
    assert res.surrogate_cmis[3] == expect


def test_conservative_mode():
    rng = np.random.default_rng(5)
    z = rng.normal(size=300)
    q = _prep(it.CmiQuery(z + rng.normal(size=300), z + rng.normal(size=300), z))
    plain = it.ci_test(q, it.CiTestConfig(B=40, seed=1))
    cons = it.ci_test(q, it.CiTestConfig(B=40, seed=1, conservative=True))
    assert cons.p_value == (1 + plain.exceedances) / 41


@pytest.mark.parametrize("kwargs", [dict(B=0), dict(alpha=0.0), dict(alpha=1.0), dict(k_perm=0)])
def test_ci_config_validation(kwargs):
    with pytest.raises(ValueError):
        it.CiTestConfig(**kwargs)


def test_analytic_cmi_is_log_formula():
    assert analytic_gaussian_cmi(0.6) == pytest.approx(-0.5 * math.log(1 - 0.36), abs=1e-15)
