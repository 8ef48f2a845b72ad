"""Per-state interaction networks, dynamic interaction networks (DINs) and
their statistics.

Nodes are the five vehicle roles. A role pair is tested with four scalar
CMI queries, one per coordinate combination; the pair CMI is the largest of
the four and the pair p value is the smallest, Bonferroni-corrected.
"""
from __future__ import annotations

import io
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .errors import InsufficientSamplesError, ZeroVarianceError
from .hmm import StateSequence, StateStats, runs, state_statistics
from .infotheory import CiTestConfig, CmiQuery, ci_test, preprocess_for_knn
from .trajectory import ROLES, ObservationSequence

PAIRS = tuple(itertools.combinations(ROLES, 2))
COORDINATE_PAIRS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _pair(a: str, b: str) -> tuple[str, str]:
    if a not in ROLES or b not in ROLES:
        raise KeyError(f"unknown role in ({a}, {b})")
    if a == b:
        raise ValueError("self loops are not allowed")
    return (a, b) if ROLES.index(a) < ROLES.index(b) else (b, a)


@dataclass(frozen=True)
class InteractionNetwork:
    """Weighted undirected graph over the five roles.

    ``weights`` holds the edges only. ``p_values`` and ``cmi`` cover all ten
    pairs; NaN marks a pair that could not be tested.
    """

    state: int
    weights: Mapping[tuple[str, str], float]
    p_values: Mapping[tuple[str, str], float] = field(default_factory=dict)
    cmi: Mapping[tuple[str, str], float] = field(default_factory=dict)
    nodes: tuple[str, ...] = ROLES

    def __post_init__(self):
        w = {}
        for (a, b), v in self.weights.items():
            key = _pair(a, b)
            if key in w:
                raise ValueError(f"duplicate edge {key}")
            if not v >= 0:
                raise ValueError(f"edge {key} has negative or undefined weight {v}")
            w[key] = float(v)
        object.__setattr__(self, "weights", dict(sorted(w.items(), key=lambda kv: PAIRS.index(kv[0]))))
        for name in ("p_values", "cmi"):
            d = {_pair(a, b): float(v) for (a, b), v in getattr(self, name).items()}
            object.__setattr__(self, name, d)

    @property
    def edges(self) -> frozenset:
        return frozenset(self.weights)

    @classmethod
    def from_edges(cls, edges: Mapping[tuple[str, str], float], state: int = 0) -> "InteractionNetwork":
        return cls(state, dict(edges))


def density(network: InteractionNetwork) -> float:
    """Share of possible undirected edges that are present."""
    v = len(network.nodes)
    if v < 2:
        raise ValueError("density needs at least two nodes")
    return 2.0 * len(network.weights) / (v * (v - 1))


def weighted_degree(network: InteractionNetwork, node: str) -> float:
    if node not in network.nodes:
        raise KeyError(f"unknown node {node!r}")
    total = 0.0
    for (a, b), w in network.weights.items():
        if node in (a, b):
            total += w
    return total


def degrees(network: InteractionNetwork) -> dict[str, float]:
    return {n: weighted_degree(network, n) for n in network.nodes}


def critical_vehicle(network: InteractionNetwork) -> tuple[str, dict[str, float]]:
    """Role with the largest weighted degree; earlier roles win ties."""
    deg = degrees(network)
    best = network.nodes[0]
    for n in network.nodes[1:]:
        if deg[n] > deg[best]:
            best = n
    return best, deg


# -- estimation ------------------------------------------------------------------


class PooledSamples(NamedTuple):
    matrix: np.ndarray
    sentinel_mask: np.ndarray

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def pool_state_samples(
    decoded: Sequence[StateSequence], observations: Sequence[ObservationSequence], state: int
) -> PooledSamples:
    """All time samples assigned to ``state`` across events, in event order."""
    if len(decoded) != len(observations):
        raise ValueError("decoded and observations are not aligned")
    mats, masks = [], []
    width, roles = 2 * len(ROLES), len(ROLES)
    for d, o in zip(decoded, observations):
        if len(d.states) != o.T:
            raise ValueError(f"{o.event_id}: state sequence length {len(d.states)} != T {o.T}")
        sel = d.states == state
        mats.append(o.matrix[sel])
        masks.append(o.sentinel_mask[sel])
        width, roles = o.matrix.shape[1], o.sentinel_mask.shape[1]
    if not mats:
        return PooledSamples(np.empty((0, width)), np.empty((0, roles), dtype=bool))
    return PooledSamples(np.vstack(mats), np.vstack(masks))


@dataclass(frozen=True)
class NetworkConfig:
    k: int = 5
    ci: CiTestConfig = CiTestConfig()
    jitter_scale: float = 1e-10
    transform: str = "rank"
    workers: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.transform not in ("rank", "standardize"):
            raise ValueError(f"unknown transform {self.transform!r}")


@dataclass(frozen=True)
class CmiMatrix:
    state: int
    matrix: np.ndarray

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("," + ",".join(ROLES) + "\n")
        for i, a in enumerate(ROLES):
            cells = ["" if (i == j or math.isnan(self.matrix[i, j])) else f"{self.matrix[i, j]:.6f}" for j in range(len(ROLES))]
            out.write(a + "," + ",".join(cells) + "\n")
        return out.getvalue()


def query_seed(seed: int, a: int, b: int, cx: int, cy: int) -> int:
    """Seed of one coordinate query, a pure function of its position."""
    return int(np.random.SeedSequence([seed, a, b, cx, cy]).generate_state(1)[0])


def _coordinate_query(args):
    x, y, z, k, cfg, jitter, transform, seed = args
    try:
        q = preprocess_for_knn(CmiQuery(x, y, z, k), jitter_scale=jitter, seed=seed, transform=transform)
    except (ZeroVarianceError, InsufficientSamplesError):
        return math.nan, math.nan
    res = ci_test(q, CiTestConfig(B=cfg.B, alpha=cfg.alpha, k_perm=cfg.k_perm, seed=seed, conservative=cfg.conservative))
    return res.cmi, res.p_value


def _pair_jobs(samples: PooledSamples, config: NetworkConfig):
    X, mask = samples.matrix, samples.sentinel_mask
    jobs, slots, skipped = [], [], set()
    for a, b in itertools.combinations(range(len(ROLES)), 2):
        if mask[:, a].all() or mask[:, b].all():
            skipped.add((a, b))
            continue
        rows = ~(mask[:, a] | mask[:, b])
        others = [m for m in range(len(ROLES)) if m not in (a, b)]
        z = X[rows][:, [2 * m + c for m in others for c in (0, 1)]]
        for cx, cy in COORDINATE_PAIRS:
            jobs.append(
                (
                    X[rows, 2 * a + cx],
                    X[rows, 2 * b + cy],
                    z,
                    config.k,
                    config.ci,
                    config.jitter_scale,
                    config.transform,
                    query_seed(config.ci.seed, a, b, cx, cy),
                )
            )
            slots.append((a, b))
    return jobs, slots, skipped


def build_network(
    samples: PooledSamples, state: int = 0, config: NetworkConfig = NetworkConfig()
) -> tuple[InteractionNetwork, CmiMatrix]:
    """CI-gated interaction network from pooled samples of one state.

    For each role pair the rows where either vehicle is absent are dropped and
    the remaining three vehicles form the conditioning set (their constant
    columns are removed by preprocessing). The pair is an edge when the
    corrected p value is at most alpha; its weight is the pair CMI clamped
    at zero. Pairs with a vehicle absent throughout get no edge and NaN CMI.
    """
    if samples.n < config.k + 2:
        raise InsufficientSamplesError(f"state {state}: {samples.n} samples, need at least {config.k + 2}")
    jobs, slots, _ = _pair_jobs(samples, config)
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_coordinate_query, jobs, chunksize=1))
    else:
        results = [_coordinate_query(j) for j in jobs]
    per_pair: dict[tuple[int, int], list] = {}
    for slot, res in zip(slots, results):
        per_pair.setdefault(slot, []).append(res)
    mat = np.full((len(ROLES), len(ROLES)), np.nan)
    weights, p_values, cmis = {}, {}, {}
    for a, b in itertools.combinations(range(len(ROLES)), 2):
        key = (ROLES[a], ROLES[b])
        vals = [(c, p) for c, p in per_pair.get((a, b), []) if not math.isnan(c)]
        if not vals:
            p_values[key] = math.nan
            cmis[key] = math.nan
            continue
        cmi = max(c for c, _ in vals)
        p = min(1.0, len(COORDINATE_PAIRS) * min(p for _, p in vals))
        mat[a, b] = mat[b, a] = cmi
        cmis[key] = cmi
        p_values[key] = p
        if p <= config.ci.alpha:
            weights[key] = max(cmi, 0.0)
    return InteractionNetwork(state, weights, p_values, cmis), CmiMatrix(state, mat)


# -- DINs ------------------------------------------------------------------------


def prune_rare_states(stats: StateStats, cumulative_threshold: float = 98.0) -> list[int]:
    """Smallest set of most-occupied states reaching the cumulative occupancy threshold."""
    order = np.argsort(-np.asarray(stats.occupancy), kind="stable")
    kept, total = [], 0.0
    for k in order:
        kept.append(int(k))
        total += float(stats.occupancy[k])
        if total >= cumulative_threshold - 1e-9:
            break
    return sorted(kept)


def jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


@dataclass(frozen=True)
class SimilarityConfig:
    threshold: float = 0.8

    def __post_init__(self):
        if not 0 <= self.threshold <= 1:
            raise ValueError("threshold must lie in [0, 1]")


@dataclass(frozen=True)
class DinCatalog:
    din_of_state: dict
    members: dict
    representative_networks: dict
    densities: dict
    classes: dict
    density_threshold: float

    @property
    def n_dins(self) -> int:
        return len(self.members)


def _representative(din: int, nets: Sequence[InteractionNetwork], alpha_rule=True) -> InteractionNetwork:
    m = len(nets)
    weights, p_values, cmis = {}, {}, {}
    for pair in PAIRS:
        having = [n.weights[pair] for n in nets if pair in n.weights]
        if 2 * len(having) >= m and having:
            weights[pair] = float(np.mean(having))
        ps = sorted(n.p_values.get(pair, math.nan) for n in nets)
        ps = [p for p in ps if not math.isnan(p)]
        # lower median: at or below alpha whenever half the members pass
        p_values[pair] = ps[(len(ps) - 1) // 2] if ps else math.nan
        cs = [n.cmi.get(pair, math.nan) for n in nets]
        cs = [c for c in cs if not math.isnan(c)]
        cmis[pair] = float(np.mean(cs)) if cs else math.nan
    return InteractionNetwork(din, weights, p_values, cmis)


def group_states_into_dins(
    networks: Sequence[InteractionNetwork], config: SimilarityConfig = SimilarityConfig()
) -> DinCatalog:
    """Single-linkage merge of states whose edge sets are Jaccard-similar.

    DINs are numbered 0, 1, ... in order of their smallest member state. A
    representative network keeps the edges present in at least half of the
    members, weighted by the mean over the members that have them.
    """
    if not networks:
        raise ValueError("no networks to group")
    nets = sorted(networks, key=lambda n: n.state)
    states = [n.state for n in nets]
    if len(set(states)) != len(states):
        raise ValueError("duplicate state ids")
    parent = list(range(len(nets)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in itertools.combinations(range(len(nets)), 2):
        if jaccard(nets[i].edges, nets[j].edges) >= config.threshold:
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(len(nets)):
        groups.setdefault(find(i), []).append(i)
    ordered = sorted(groups.values(), key=lambda g: states[g[0]])
    din_of_state, members, reps, dens = {}, {}, {}, {}
    for d, g in enumerate(ordered):
        members[d] = [states[i] for i in g]
        for i in g:
            din_of_state[states[i]] = d
        reps[d] = _representative(d, [nets[i] for i in g])
        dens[d] = density(reps[d])
    threshold = float(np.mean(list(dens.values())))
    classes = {d: ("dense" if dens[d] > threshold else "sparse") for d in dens}
    return DinCatalog(din_of_state, members, reps, dens, classes, threshold)


@dataclass(frozen=True)
class DinStats:
    occupancy: np.ndarray
    frequency: np.ndarray
    lifetime_rate: np.ndarray
    orders: dict

    @property
    def dins_per_event(self) -> float:
        return float(np.mean([len(o) for o in self.orders.values()])) if self.orders else 0.0

    def order_entropy(self) -> float:
        return order_entropy(self.orders.values())

    def to_dict(self) -> dict:
        return {
            "dins": [
                {
                    "din": d + 1,
                    "occupancy_percent": float(self.occupancy[d]),
                    "frequency": int(self.frequency[d]),
                    "mean_lifetime_rate": None
                    if math.isnan(self.lifetime_rate[d])
                    else float(self.lifetime_rate[d]),
                }
                for d in range(len(self.occupancy))
            ],
            "dins_per_event": self.dins_per_event,
            "order_entropy_bits": self.order_entropy(),
        }


def order_entropy(orders) -> float:
    """Conditional entropy (bits) of the next DIN given the current one."""
    counts: dict[int, dict[int, int]] = {}
    for o in orders:
        for cur, nxt in zip(o, o[1:]):
            row = counts.setdefault(cur, {})
            row[nxt] = row.get(nxt, 0) + 1
    total = sum(sum(r.values()) for r in counts.values())
    if total == 0:
        return 0.0
    h = 0.0
    for row in counts.values():
        n_row = sum(row.values())
        for c in row.values():
            h -= (c / total) * math.log2(c / n_row)
    return h + 0.0


def din_statistics(
    decoded: Sequence[StateSequence], catalog: DinCatalog, durations: Sequence[int] | None = None
) -> DinStats:
    """State statistics after relabeling states to DINs.

    Time steps in states outside the catalog (pruned) are dropped before
    repeats are collapsed, so each event's DIN order lists its DIN visits.
    """
    if durations is None:
        durations = [len(d.states) for d in decoded]
    relabeled, orders = [], {}
    for d in decoded:
        kept = [catalog.din_of_state[int(s)] for s in d.states if int(s) in catalog.din_of_state]
        seq = np.asarray(kept, dtype=np.int64)
        relabeled.append(StateSequence(d.event_id, seq))
        vals, _ = runs(seq)
        orders[d.event_id] = [int(v) for v in vals]
    nonempty = [r for r in relabeled if len(r.states)]
    n = catalog.n_dins
    if not nonempty:
        return DinStats(np.zeros(n), np.zeros(n, dtype=np.int64), np.full(n, np.nan), orders)
    st = state_statistics(nonempty, K=n, durations=durations)
    return DinStats(st.occupancy, st.frequency, st.lifetime_rate, orders)


def format_order(order: Sequence[int]) -> str:
    return "-".join(f"DIN {d + 1}" for d in order)


# -- summaries and export -------------------------------------------------------------


def mean_edge_cmi(networks: Sequence[InteractionNetwork]) -> float:
    """Mean weight over all significant edges of the given networks."""
    w = [v for n in networks for v in n.weights.values()]
    return float(np.mean(w)) if w else 0.0


def mean_pair_cmi(networks: Sequence[InteractionNetwork]) -> float:
    """Mean clamped CMI over every tested pair, significant or not."""
    c = [max(v, 0.0) for n in networks for v in n.cmi.values() if not math.isnan(v)]
    return float(np.mean(c)) if c else 0.0


def degree_table(catalog: DinCatalog) -> list[dict]:
    rows = []
    for d in sorted(catalog.representative_networks):
        role, deg = critical_vehicle(catalog.representative_networks[d])
        rows.append({"din": d + 1, **{r: round(deg[r], 6) for r in ROLES}, "critical": role})
    return rows


def to_networkx(network: InteractionNetwork):
    import networkx as nx

    g = nx.Graph()
    g.add_nodes_from(network.nodes)
    for (a, b), w in network.weights.items():
        g.add_edge(a, b, weight=w, p=network.p_values.get((a, b), math.nan))
    return g


def write_graphml(network: InteractionNetwork, path) -> None:
    import networkx as nx

    nx.write_graphml(to_networkx(network), path)


def to_dot(network: InteractionNetwork, name: str = "G") -> str:
    lines = [f"graph {name} {{"]
    for n in network.nodes:
        lines.append(f'  "{n}";')
    for (a, b), w in network.weights.items():
        p = network.p_values.get((a, b), math.nan)
        lines.append(f'  "{a}" -- "{b}" [weight={w:.6f}, p={p:.6f}, label="{w:.2f}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
