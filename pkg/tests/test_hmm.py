import itertools
import json

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment
from scipy.stats import multivariate_normal

from lcnet import hmm, synth
from lcnet.errors import DataError
from lcnet.trajectory import ObservationSequence

FAST = hmm.FitConfig(restarts=2, max_iterations=200)


def assert_monotone(history, slack=1e-8):
    for a, b in zip(history, history[1:]):
        assert b >= a - slack * max(1.0, abs(a))


def tiny_model(seed=0, K=2, D=2):
    return synth.random_hmm(np.random.default_rng(seed), K, D)


def test_model_validation():
    with pytest.raises(ValueError):
        hmm.GaussianHmm([0.5, 0.6], np.eye(2), np.zeros((2, 1)), np.ones((2, 1, 1)))
    with pytest.raises(ValueError):
        hmm.GaussianHmm([0.5, 0.5], [[0.5, 0.6], [0.5, 0.5]], np.zeros((2, 1)), np.ones((2, 1, 1)))
    with pytest.raises(Exception):
        hmm.GaussianHmm([1.0], [[1.0]], np.zeros((1, 2)), np.zeros((1, 2, 2)))


def test_log_emission_matches_scipy():
    m = tiny_model(1, K=3, D=4)
    X = np.random.default_rng(0).normal(size=(7, 4))
    ref = np.column_stack([multivariate_normal(m.means[k], m.covariances[k]).logpdf(X) for k in range(3)])
    assert np.allclose(m.log_emission(X), ref, atol=1e-10)


def test_single_observation_likelihood_is_normal_density():
    m = hmm.GaussianHmm([1.0], [[1.0]], [[1.0, -2.0]], [[[2.0, 0.3], [0.3, 1.0]]])
    x = np.array([[0.5, 0.5]])
    ll = hmm.log_likelihood(m, [ObservationSequence("a", x)])
    assert ll == pytest.approx(multivariate_normal([1.0, -2.0], [[2.0, 0.3], [0.3, 1.0]]).logpdf(x[0]), abs=1e-12)


def test_forward_matches_path_enumeration():
    for seed in range(5):
        m = tiny_model(seed, K=2, D=2)
        X = np.random.default_rng(seed + 10).normal(size=(2, 2))
        total = np.logaddexp.reduce(
            [hmm.path_log_probability(m, X, p) for p in itertools.product(range(2), repeat=2)]
        )
        assert hmm.log_likelihood(m, [ObservationSequence("a", X)]) == pytest.approx(total, abs=1e-10)


def test_likelihood_additive_over_sequences():
    m = tiny_model(3, K=3, D=2)
    rng = np.random.default_rng(0)
    data = [ObservationSequence(str(i), rng.normal(size=(int(rng.integers(2, 9)), 2))) for i in range(4)]
    one = hmm.log_likelihood(m, data)
    assert hmm.log_likelihood(m, data + data) == pytest.approx(2 * one, rel=1e-12)


def test_dimension_mismatch():
    m = tiny_model()
    with pytest.raises(DataError):
        hmm.log_likelihood(m, [ObservationSequence("a", np.zeros((3, 4)))])
    with pytest.raises(DataError):
        hmm.viterbi(m, ObservationSequence("a", np.zeros((3, 4))))


def test_single_state_fit_is_gaussian_mle():
    rng = np.random.default_rng(0)
    data = [ObservationSequence(str(i), rng.normal(size=(10, 4)) @ np.diag([1, 2, 3, 4])) for i in range(5)]
    res = hmm.fit_em(data, 1, hmm.FitConfig(standardize=False, restarts=1))
    pooled = np.vstack([d.matrix for d in data])
    assert np.allclose(res.model.means[0], pooled.mean(axis=0))
    assert np.allclose(res.model.covariances[0], np.cov(pooled, rowvar=False, bias=True))
    assert_monotone(res.history)


def test_fit_recovers_planted_means():
    truth_model = synth.planted_three_state(D=4, separation=5.0, seed=2)
    obs, truth = synth.planted_corpus(truth_model, 60, (20, 40), seed=3)
    res = hmm.fit_em(obs, 3, hmm.FitConfig(standardize=False, restarts=3))
    assert_monotone(res.history)
    cost = np.linalg.norm(res.model.means[:, None] - truth_model.means[None], axis=2)
    r, c = linear_sum_assignment(cost)
    assert cost[r, c].max() <= 0.1 * 5.0


def test_fit_is_deterministic_and_invariants_hold():
    obs, _ = synth.planted_corpus(synth.planted_three_state(D=4, seed=1), 20, (10, 20), seed=1)
    a = hmm.fit_em(obs, 3, FAST)
    b = hmm.fit_em(obs, 3, FAST)
    assert a.model.to_json() == b.model.to_json()
    assert_monotone(a.history)
    m = a.model
    assert np.allclose(m.transitions.sum(axis=1), 1, atol=1e-9)
    assert abs(m.initial.sum() - 1) <= 1e-9
    for cov in m.covariances:
        assert np.allclose(cov, cov.T)
        assert np.linalg.eigvalsh(cov).min() >= FAST.covariance_floor * (1 - 1e-6)


def test_sentinel_columns_are_handled():
    rng = np.random.default_rng(4)
    seqs = []
    for i in range(10):
        X = rng.normal(size=(15, 4))
        mask = np.zeros((15, 2), dtype=bool)
        if i % 2:
            X[:, 2:] = -1e4
            mask[:, 1] = True
        seqs.append(ObservationSequence(str(i), X, mask))
    res = hmm.fit_em(seqs, 2, FAST)
    assert_monotone(res.history)
    feats = res.model.features(seqs[1])
    assert np.all(feats[:, 2:] == -10.0)


def test_constant_feature_rejected_when_standardizing():
    seqs = [ObservationSequence("a", np.column_stack([np.arange(5.0), np.ones(5)]))]
    with pytest.raises(DataError):
        hmm.fit_em(seqs, 1, FAST)


def test_short_sequences_rejected():
    with pytest.raises(DataError):
        hmm.fit_em([ObservationSequence("a", np.zeros((1, 2)))], 1, FAST)
    with pytest.raises(DataError):
        hmm.fit_em([], 1, FAST)


def test_json_roundtrip():
    obs, _ = synth.planted_corpus(synth.planted_three_state(D=4), 10, (10, 12), seed=0)
    m = hmm.fit_em(obs, 2, FAST).model
    back = hmm.GaussianHmm.from_json(m.to_json())
    assert back.to_json() == m.to_json()
    assert hmm.log_likelihood(back, obs) == hmm.log_likelihood(m, obs)
    assert json.loads(m.to_json())["K"] == 2


# -- selection -------------------------------------------------------------------


def test_elbow_rule():
    curve = [(2, -1000.0), (3, -400.0), (4, -385.0), (5, -380.0)]
    assert hmm.elbow(curve) == 4  # 15 > 2% of 620
    assert hmm.elbow([(2, -1000.0), (3, -400.0), (4, -395.0), (5, -390.0)]) == 3
    assert hmm.elbow([(4, -10.0)]) == 4
    assert hmm.elbow([(2, -5.0), (3, -6.0)]) == 2


def test_selection_singleton_range():
    obs, _ = synth.planted_corpus(synth.planted_three_state(D=4), 10, (10, 12), seed=0)
    sel = hmm.select_state_count(obs, [4], FAST)
    assert sel.k_best == 4 and [k for k, _ in sel.curve] == [4]


def test_selection_planted_small():
    model = synth.planted_three_state(D=10, seed=5)
    obs, _ = synth.planted_corpus(model, 200, (20, 40), seed=5)
    sel = hmm.select_state_count(obs, range(2, 6), FAST)
    assert sel.k_best == 3
    for f in sel.fits.values():
        assert_monotone(f.history)


# -- viterbi ---------------------------------------------------------------------------


def test_viterbi_single_state_constant():
    m = hmm.GaussianHmm([1.0], [[1.0]], [[0.0]], [[[1.0]]])
    path = hmm.viterbi_path(m, np.random.default_rng(0).normal(size=(6, 1)))
    assert (path == 0).all()


@pytest.mark.parametrize("seed", range(30))
def test_viterbi_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(1, 4))
    T = int(rng.integers(1, 9))
    m = synth.random_hmm(rng, K, 2, ties=seed % 3 == 0)
    X = rng.normal(size=(T, 2))
    assert np.array_equal(hmm.viterbi_path(m, X), synth.brute_force_viterbi(m, X))


def test_viterbi_tie_goes_to_lower_index():
    m = hmm.GaussianHmm([0.5, 0.5], [[0.5, 0.5], [0.5, 0.5]], [[0.0], [0.0]], [[[1.0]], [[1.0]]])
    assert (hmm.viterbi_path(m, np.zeros((5, 1))) == 0).all()


def test_viterbi_beats_random_paths():
    rng = np.random.default_rng(1)
    m = synth.random_hmm(rng, 4, 3)
    X = rng.normal(size=(30, 3))
    best = hmm.path_log_probability(m, X, hmm.viterbi_path(m, X))
    for _ in range(1000):
        p = rng.integers(0, 4, size=30)
        assert hmm.path_log_probability(m, X, p) <= best


def test_viterbi_nearest_mean_when_separated():
    means = np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 100.0]])
    m = hmm.GaussianHmm(np.full(3, 1 / 3), np.full((3, 3), 1 / 3), means, np.repeat(np.eye(2)[None], 3, 0))
    rng = np.random.default_rng(0)
    truth = rng.integers(0, 3, size=50)
    X = means[truth] + rng.normal(size=(50, 2))
    assert np.array_equal(hmm.viterbi_path(m, X), truth)


# -- relabeling and statistics --------------------------------------------------------


def test_relabel_by_occupancy():
    m = tiny_model(0, K=3, D=2)
    decoded = [hmm.StateSequence("a", [0] * 1 + [1] * 6 + [2] * 3)]
    m2, d2, perm = hmm.relabel_by_occupancy(m, decoded)
    assert list(perm) == [1, 2, 0]
    assert list(d2[0].states) == [2] + [0] * 6 + [1] * 3
    X = np.random.default_rng(0).normal(size=(10, 2))
    seq = ObservationSequence("a", X)
    assert hmm.log_likelihood(m2, [seq]) == pytest.approx(hmm.log_likelihood(m, [seq]), abs=1e-10)
    assert hmm.path_log_probability(m2, X, d2[0].states) == pytest.approx(
        hmm.path_log_probability(m, X, decoded[0].states), abs=1e-10
    )
    m3, d3, perm3 = hmm.relabel_by_occupancy(m2, d2)
    assert list(perm3) == [0, 1, 2]


def test_stats_constant_sequence():
    st = hmm.state_statistics([hmm.StateSequence("a", [0, 0, 0, 0])], K=1)
    assert st.occupancy[0] == 100 and st.frequency[0] == 0 and st.lifetime_rate[0] == 1


def test_stats_hand_counted():
    st = hmm.state_statistics([hmm.StateSequence("a", [0, 0, 1, 1]), hmm.StateSequence("b", [1, 1, 0, 0])])
    assert list(st.occupancy) == [50, 50]
    assert list(st.frequency) == [1, 1]
    assert list(st.lifetime_rate) == [0.5, 0.5]


def test_stats_invariants_and_unvisited():
    rng = np.random.default_rng(0)
    decoded = [hmm.StateSequence(str(i), rng.integers(0, 3, size=int(rng.integers(2, 20)))) for i in range(12)]
    st = hmm.state_statistics(decoded, K=4)
    assert st.occupancy.sum() == pytest.approx(100, abs=1e-6)
    n_runs = sum(len(hmm.runs(d.states)[0]) for d in decoded)
    assert st.frequency.sum() == n_runs - len(decoded)
    assert np.isnan(st.lifetime_rate[3]) and st.occupancy[3] == 0
    assert st.to_dict()["states"][3]["mean_lifetime_rate"] is None
