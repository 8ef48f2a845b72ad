import itertools
import math
import random

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import nnls

from lcnet import hmm
from lcnet import network as nw
from lcnet.infotheory import CiTestConfig
from lcnet.trajectory import ROLES, ObservationSequence

# weighted degrees per DIN, columns s, f, r, ft, rt
DEGREE_TABLE = {
    ("DLC", 1): (0.24, 0.12, 0.25, 0.25, 0.24),
    ("DLC", 2): (0.29, 0.38, 0.22, 0.39, 0.32),
    ("DLC", 3): (0.94, 0.22, 0.41, 0.39, 0.26),
    ("DLC", 4): (0.77, 0.42, 0.66, 0.63, 0.59),
    ("DLC", 5): (0.30, 0.32, 0.00, 0.33, 0.39),
    ("MLC", 1): (1.74, 0.00, 1.00, 0.82, 0.87),
    ("MLC", 2): (0.89, 1.18, 0.86, 0.39, 0.25),
    ("MLC", 3): (0.97, 1.06, 1.02, 0.72, 0.41),
    ("MLC", 4): (1.29, 0.01, 0.93, 0.95, 0.39),
    ("MLC", 5): (0.52, 0.88, 0.35, 0.86, 1.06),
}
DOMINANT = {("DLC", 3): "s", ("DLC", 4): "s", ("MLC", 1): "s", ("MLC", 2): "f", ("MLC", 3): "f", ("MLC", 4): "s"}


def network_with_degrees(deg):
    """Non-negative edge weights whose node sums reproduce ``deg``."""
    inc = np.zeros((len(ROLES), len(nw.PAIRS)))
    for j, (a, b) in enumerate(nw.PAIRS):
        inc[ROLES.index(a), j] = inc[ROLES.index(b), j] = 1.0
    w, resid = nnls(inc, np.asarray(deg, dtype=float))
    assert resid < 1e-9
    return nw.InteractionNetwork.from_edges({p: v for p, v in zip(nw.PAIRS, w) if v > 0})


# -- graph statistics ----------------------------------------------------------------


def test_density_and_degree_examples():
    net = nw.InteractionNetwork.from_edges({("s", "f"): 0.3, ("rt", "s"): 0.2, ("r", "ft"): 0.1})
    assert nw.density(net) == pytest.approx(0.3)
    assert nw.weighted_degree(net, "s") == pytest.approx(0.5)
    assert nw.weighted_degree(net, "rt") == pytest.approx(0.2)
    with pytest.raises(KeyError):
        nw.weighted_degree(net, "x")
    star = nw.InteractionNetwork.from_edges({("s", r): 1.0 for r in ROLES[1:]})
    assert nw.density(star) == pytest.approx(0.4)
    assert nw.critical_vehicle(star)[0] == "s"
    full = nw.InteractionNetwork.from_edges({p: 1.0 for p in nw.PAIRS})
    assert nw.density(full) == 1.0


def test_edge_validation():
    with pytest.raises(ValueError):
        nw.InteractionNetwork.from_edges({("s", "s"): 1.0})
    with pytest.raises(ValueError):
        nw.InteractionNetwork.from_edges({("s", "f"): -0.1})
    with pytest.raises(ValueError):
        nw.InteractionNetwork.from_edges({("s", "f"): 0.1, ("f", "s"): 0.2})
    with pytest.raises(KeyError):
        nw.InteractionNetwork.from_edges({("s", "q"): 0.1})


def _brute_density(edges):
    present = sum(1 for a, b in itertools.combinations(ROLES, 2) if (a, b) in edges or (b, a) in edges)
    return present / 10


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(nw.PAIRS), st.floats(0, 5)), max_size=10, unique_by=lambda t: t[0]))
def test_statistics_match_brute_force(items):
    net = nw.InteractionNetwork.from_edges(dict(items))
    assert nw.density(net) == _brute_density(dict(items))
    for node in ROLES:
        expect = 0.0
        for (a, b), w in items:
            if node in (a, b):
                expect += w
        assert nw.weighted_degree(net, node) == pytest.approx(expect, abs=1e-12)


@pytest.mark.parametrize("key", sorted(DEGREE_TABLE))
def test_critical_vehicle_on_degree_table(key):
    net = network_with_degrees(DEGREE_TABLE[key])
    role, deg = nw.critical_vehicle(net)
    assert [round(deg[r], 9) for r in ROLES] == pytest.approx(DEGREE_TABLE[key], abs=1e-9)
    assert role == ROLES[int(np.argmax(DEGREE_TABLE[key]))]
    if key in DOMINANT:
        assert role == DOMINANT[key]


def test_isolated_node_has_zero_degree():
    net = network_with_degrees(DEGREE_TABLE[("DLC", 5)])
    assert nw.weighted_degree(net, "r") == 0.0


def test_empty_network_ties_resolve_to_subject():
    net = nw.InteractionNetwork.from_edges({})
    assert nw.density(net) == 0.0
    assert nw.critical_vehicle(net)[0] == "s"


# -- pooling and estimation -------------------------------------------------------------


def test_pool_state_samples_partitions_rows():
    rng = np.random.default_rng(0)
    obs = [ObservationSequence(f"e{i}", rng.normal(size=(n, 10))) for i, n in enumerate((5, 7, 3))]
    dec = [hmm.StateSequence(o.event_id, rng.integers(0, 3, size=o.T)) for o in obs]
    pooled = [nw.pool_state_samples(dec, obs, s) for s in range(3)]
    assert sum(p.n for p in pooled) == 15
    rows = np.vstack([p.matrix for p in pooled])
    allrows = np.vstack([o.matrix for o in obs])
    assert sorted(map(tuple, rows)) == sorted(map(tuple, allrows))
    assert nw.pool_state_samples(dec, obs, 7).n == 0
    with pytest.raises(ValueError):
        nw.pool_state_samples(dec[:2], obs, 0)


FAST_NET = nw.NetworkConfig(ci=CiTestConfig(B=60, seed=3))


def _samples(n, coupled=(), rho=0.8, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 10))
    for a, b in coupled:
        i, j = 2 * ROLES.index(a), 2 * ROLES.index(b)
        X[:, j] = rho * X[:, i] + math.sqrt(1 - rho * rho) * X[:, j]
    return nw.PooledSamples(X, np.zeros((n, 5), dtype=bool))


def test_build_network_null_is_sparse():
    net, mat = nw.build_network(_samples(300, seed=1), 0, FAST_NET)
    assert len(net.edges) <= 1
    assert np.allclose(mat.matrix, mat.matrix.T, equal_nan=True)
    assert set(net.p_values) == set(nw.PAIRS)


def test_build_network_finds_planted_edge():
    net, mat = nw.build_network(_samples(300, coupled=[("s", "rt")], seed=2), 4, FAST_NET)
    assert ("s", "rt") in net.edges
    assert net.weights[("s", "rt")] > 0.2
    assert net.state == 4
    assert ",s,f,r,ft,rt" in mat.to_csv()


def test_absent_vehicle_is_isolated():
    s = _samples(300, coupled=[("s", "f")], seed=3)
    mask = s.sentinel_mask.copy()
    mask[:, 2] = True
    X = s.matrix.copy()
    X[:, 4:6] = -1e4
    net, mat = nw.build_network(nw.PooledSamples(X, mask), 0, FAST_NET)
    assert nw.weighted_degree(net, "r") == 0.0
    assert math.isnan(net.cmi[("s", "r")]) and math.isnan(mat.matrix[0, 2])
    assert ("s", "f") in net.edges


def test_build_network_is_deterministic():
    s = _samples(200, coupled=[("f", "ft")], seed=4)
    a, _ = nw.build_network(s, 0, FAST_NET)
    b, _ = nw.build_network(s, 0, FAST_NET)
    assert a == b


def test_too_few_samples():
    with pytest.raises(Exception):
        nw.build_network(_samples(5), 0, FAST_NET)


# -- DINs ------------------------------------------------------------------------------------


def test_prune_rare_states():
    stats = hmm.StateStats(np.array([50, 30, 18, 1.5, 0.5]), np.zeros(5), np.zeros(5), np.zeros(5))
    assert nw.prune_rare_states(stats, 98) == [0, 1, 2]
    assert nw.prune_rare_states(stats, 100) == [0, 1, 2, 3, 4]
    shuffled = hmm.StateStats(np.array([1.5, 18, 50, 0.5, 30]), np.zeros(5), np.zeros(5), np.zeros(5))
    assert nw.prune_rare_states(shuffled, 98) == [1, 2, 4]


def test_jaccard():
    a = frozenset({("s", "f"), ("s", "r")})
    assert nw.jaccard(a, a) == 1.0
    assert nw.jaccard(frozenset(), frozenset()) == 1.0
    assert nw.jaccard(a, frozenset({("s", "f")})) == 0.5


def _net(state, edges, w=0.2):
    return nw.InteractionNetwork(state, {e: w for e in edges}, {p: (0.01 if p in edges else 0.5) for p in nw.PAIRS})


BIG = [("s", "f"), ("s", "r"), ("s", "ft"), ("s", "rt"), ("f", "r")]


def test_grouping_merges_similar_states():
    nets = [
        _net(0, BIG),
        _net(1, [("ft", "rt")]),
        _net(2, BIG[:4] + [("f", "r")], w=0.4),
        _net(3, BIG[:4] + [("r", "ft")]),
    ]
    cat = nw.group_states_into_dins(nets)
    # 0 and 2 identical, 3 shares 4 of 6 edges with them (0.667 < 0.8)
    assert cat.members == {0: [0, 2], 1: [1], 2: [3]}
    assert cat.din_of_state == {0: 0, 2: 0, 1: 1, 3: 2}
    rep = cat.representative_networks[0]
    assert rep.edges == frozenset(BIG) and rep.weights[("s", "f")] == pytest.approx(0.3)
    assert cat.classes[1] == "sparse" and cat.classes[0] == "dense"
    assert cat.density_threshold == pytest.approx(np.mean(list(cat.densities.values())))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_grouping_is_order_invariant(seed):
    rnd = random.Random(seed)
    nets = [_net(i, rnd.sample(nw.PAIRS, rnd.randint(0, 4))) for i in range(6)]
    a = nw.group_states_into_dins(nets)
    shuffled = nets[:]
    rnd.shuffle(shuffled)
    b = nw.group_states_into_dins(shuffled)
    assert a.members == b.members and a.din_of_state == b.din_of_state


def test_single_linkage_chains():
    e = list(nw.PAIRS)
    nets = [_net(0, e[:5]), _net(1, e[:5] + e[5:6]), _net(2, e[:6] + e[6:7]), _net(3, e[1:7])]
    cat = nw.group_states_into_dins(nets, nw.SimilarityConfig(0.8))
    assert cat.n_dins == 1


def test_din_statistics_collapse_and_orders():
    nets = [_net(0, BIG), _net(1, [("ft", "rt")]), _net(2, BIG)]
    cat = nw.group_states_into_dins(nets)
    dec = [
        hmm.StateSequence("a", [0, 0, 2, 2, 1, 1]),
        hmm.StateSequence("b", [1, 1, 1, 1]),
        hmm.StateSequence("c", [0, 3, 1, 3, 1]),  # state 3 is pruned
    ]
    ds = nw.din_statistics(dec, cat)
    assert ds.orders == {"a": [0, 1], "b": [1], "c": [0, 1]}
    assert ds.dins_per_event == pytest.approx(5 / 3)
    assert nw.format_order(ds.orders["a"]) == "DIN 1-DIN 2"
    assert ds.order_entropy() == 0.0
    assert ds.to_dict()["dins"][0]["din"] == 1


def test_order_entropy_values():
    assert nw.order_entropy([[0, 1], [0, 2]]) == pytest.approx(1.0)
    assert nw.order_entropy([[0], [1]]) == 0.0
    assert nw.order_entropy([[0, 1, 0, 1]]) == 0.0


def test_summary_means():
    a = nw.InteractionNetwork(0, {("s", "f"): 0.2}, cmi={("s", "f"): 0.2, ("s", "r"): -0.01, ("f", "r"): math.nan})
    b = nw.InteractionNetwork(1, {("s", "r"): 0.4, ("f", "r"): 0.6})
    assert nw.mean_edge_cmi([a, b]) == pytest.approx(0.4)
    assert nw.mean_pair_cmi([a]) == pytest.approx(0.1)
    assert nw.mean_edge_cmi([]) == 0.0


# -- export -----------------------------------------------------------------------------------


def test_graphml_roundtrip(tmp_path):
    net = nw.InteractionNetwork(0, {("s", "f"): 0.25, ("r", "rt"): 0.5}, {("s", "f"): 0.01, ("r", "rt"): 0.0})
    path = tmp_path / "g.graphml"
    nw.write_graphml(net, path)
    g = nx.read_graphml(path)
    assert set(g.nodes) == set(ROLES)
    assert g.edges["s", "f"]["weight"] == 0.25 and g.number_of_edges() == 2


def test_dot_export():
    net = nw.InteractionNetwork(0, {("s", "f"): 0.25})
    dot = nw.to_dot(net, "state1")
    assert dot.startswith("graph state1 {") and '"s" -- "f"' in dot and dot.count("--") == 1


def test_degree_table_layout():
    cat = nw.group_states_into_dins([network_with_degrees(DEGREE_TABLE[("MLC", 2)])])
    row = nw.degree_table(cat)[0]
    assert row["din"] == 1 and row["critical"] == "f" and row["f"] == pytest.approx(1.18)
