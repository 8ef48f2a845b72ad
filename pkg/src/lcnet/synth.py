"""Synthetic corpora and independent oracles for tests and benchmarks."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .hmm import GaussianHmm, StateSequence
from .infotheory import CmiQuery
from .trajectory import ROLES, ObservationSequence, TrajectoryTable


def analytic_gaussian_cmi(rho: float) -> float:
    """CMI in nats of jointly Gaussian X, Y given Z with partial correlation rho."""
    if not abs(rho) < 1:
        raise ValueError("|rho| must be < 1")
    return -0.5 * math.log1p(-rho * rho)


def gaussian_triplet(rho: float, d_z: int, n: int, rng: np.random.Generator, k: int = 5) -> CmiQuery:
    """Jointly Gaussian (X, Y, Z) whose partial correlation given Z is ``rho``.

    Z ~ N(0, I); X and Y share the common driver sum(Z)/sqrt(d_z) plus a pair
    of residuals with correlation rho, so the conditional covariance of
    (X, Y) given Z is [[1, rho], [rho, 1]].
    """
    if not abs(rho) < 1:
        raise ValueError("|rho| must be < 1")
    z = rng.standard_normal((n, d_z))
    e1 = rng.standard_normal(n)
    e2 = rho * e1 + math.sqrt(1.0 - rho * rho) * rng.standard_normal(n)
    drive = z.sum(axis=1) / math.sqrt(d_z) if d_z else np.zeros(n)
    return CmiQuery(drive + e1, drive + e2, z, k)


def sample_hmm(model: GaussianHmm, T: int, rng: np.random.Generator, event_id: str = "sample"):
    """Forward-sample a state path and emissions; returns (observations, truth)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    K = model.K
    states = np.empty(T, dtype=np.int64)
    states[0] = rng.choice(K, p=model.initial)
    for t in range(1, T):
        states[t] = rng.choice(K, p=model.transitions[states[t - 1]])
    chol = np.linalg.cholesky(model.covariances)
    noise = rng.standard_normal((T, model.D))
    X = model.means[states] + np.einsum("tij,tj->ti", chol[states], noise)
    return ObservationSequence(event_id, X), StateSequence(event_id, states)


def brute_force_viterbi(model: GaussianHmm, X: np.ndarray, max_paths: int = 10**6) -> np.ndarray:
    """Exhaustive MAP path. Among exactly tied paths the one that is smallest
    when read backwards from the last state wins, which is the order a
    lowest-index dynamic program produces.
    """
    X = np.atleast_2d(X)
    T, K = X.shape[0], model.K
    if K**T > max_paths:
        raise ValueError(f"{K}^{T} paths exceed the limit of {max_paths}")
    logb = model.log_emission(X)
    with np.errstate(divide="ignore"):
        log_a = np.log(model.transitions)
        log_pi = np.log(model.initial)
    best_score = -np.inf
    best = None
    for path in itertools.product(range(K), repeat=T):
        s = log_pi[path[0]] + logb[0, path[0]]
        for t in range(1, T):
            s = (s + log_a[path[t - 1], path[t]]) + logb[t, path[t]]
        key = path[::-1]
        if best is None or s > best_score or (s == best_score and key < best[::-1]):
            best_score = s
            best = path
    return np.array(best, dtype=np.int64)


def random_hmm(rng: np.random.Generator, K: int, D: int, ties: bool = False) -> GaussianHmm:
    """Small random model; with ``ties`` some states are exact copies so paths tie."""
    initial = rng.dirichlet(np.ones(K))
    A = rng.dirichlet(np.ones(K), size=K)
    means = rng.normal(0.0, 1.5, size=(K, D))
    covs = np.empty((K, D, D))
    for k in range(K):
        M = rng.normal(size=(D, D))
        covs[k] = M @ M.T / D + 0.3 * np.eye(D)
    if ties and K > 1:
        initial = np.full(K, 1.0 / K)
        A = np.full((K, K), 1.0 / K)
        means[1:] = means[0]
        covs[1:] = covs[0]
        if K > 2 and rng.random() < 0.5:
            means[2] = rng.normal(0.0, 1.5, size=D)
    return GaussianHmm(initial, A, means, covs)


def planted_three_state(D: int = 10, separation: float = 6.0, stay: float = 0.92, seed: int = 0) -> GaussianHmm:
    """Well separated 3-state model with sticky transitions."""
    rng = np.random.default_rng(seed)
    K = 3
    directions = rng.normal(size=(K, D))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = separation * directions
    covs = np.empty((K, D, D))
    for k in range(K):
        M = rng.normal(scale=0.3, size=(D, D))
        covs[k] = 0.5 * np.eye(D) + M @ M.T / D
    A = np.full((K, K), (1.0 - stay) / (K - 1))
    np.fill_diagonal(A, stay)
    return GaussianHmm(np.full(K, 1.0 / K), A, means, covs)


def planted_corpus(model: GaussianHmm, n_events: int, T_range: tuple[int, int], seed: int):
    """Sequences with lengths uniform in T_range, one child stream per event."""
    lo, hi = T_range
    children = np.random.SeedSequence(seed).spawn(n_events)
    obs, truth = [], []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        T = int(rng.integers(lo, hi + 1))
        o, s = sample_hmm(model, T, rng, event_id=f"ev{i:04d}")
        obs.append(o)
        truth.append(s)
    return obs, truth


# -- interaction presets -------------------------------------------------------


@dataclass(frozen=True)
class PlantedScenario:
    """Regime-switching corpus whose regimes carry known interaction graphs.

    Each regime r has an edge set over the five roles. Longitudinal and
    lateral coordinates are independent Gaussian blocks, each drawn from a
    Gaussian graphical model whose partial correlation on every edge is the
    coupling strength (capped so the precision stays positive definite).
    The CMI of a coupled pair, given all other vehicles, is then
    -0.5 * ln(1 - c^2) and every non-edge has CMI zero.
    """

    name: str
    regimes: tuple[tuple[tuple[str, str], ...], ...]
    coupling: float
    ordered: bool
    n_events: int = 200
    T_range: tuple[int, int] = (30, 60)
    min_segment: int = 6
    seed: int = 0
    #: per-regime shift of every coordinate, meters
    regime_shift: float = 4.0
    noise_scale: float = 1.0
    base_offsets: Sequence[tuple[float, float]] = field(
        default=((0.0, 0.0), (25.0, 0.0), (-25.0, 0.0), (20.0, 3.5), (-20.0, 3.5))
    )

    def __post_init__(self):
        if not 0 <= self.coupling < 1:
            raise ValueError("coupling must lie in [0, 1)")

    @property
    def K(self) -> int:
        return len(self.regimes)

    def adjacency(self, r: int) -> np.ndarray:
        adj = np.zeros((len(ROLES), len(ROLES)))
        for a, b in self.regimes[r]:
            i, j = ROLES.index(a), ROLES.index(b)
            adj[i, j] = adj[j, i] = 1.0
        return adj

    def partial_correlation(self, r: int) -> float:
        adj = self.adjacency(r)
        lam = float(np.max(np.abs(np.linalg.eigvalsh(adj)))) if adj.any() else 0.0
        return self.coupling if lam == 0 else min(self.coupling, 0.9 / lam)

    def block_covariance(self, r: int) -> np.ndarray:
        """5x5 unit-diagonal covariance with partial correlation c on each edge."""
        c = self.partial_correlation(r)
        prec = np.eye(len(ROLES)) - c * self.adjacency(r)
        cov = np.linalg.inv(prec)
        sd = np.sqrt(np.diag(cov))
        return cov / np.outer(sd, sd)

    def regime_means(self) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(10**6,)))
        base = np.array(self.base_offsets, dtype=float).ravel()
        means = np.empty((self.K, 2 * len(ROLES)))
        for r in range(self.K):
            direction = rng.normal(size=base.size)
            direction /= np.linalg.norm(direction)
            means[r] = base + self.regime_shift * math.sqrt(base.size) * direction / 2.0
        return means

    def emission_covariance(self, r: int) -> np.ndarray:
        blk = self.block_covariance(r) * self.noise_scale**2
        cov = np.zeros((2 * len(ROLES), 2 * len(ROLES)))
        idx_x = np.arange(0, 2 * len(ROLES), 2)
        idx_y = idx_x + 1
        cov[np.ix_(idx_x, idx_x)] = blk
        cov[np.ix_(idx_y, idx_y)] = blk
        return cov

    def ground_truth_cmi(self, r: int) -> float:
        return analytic_gaussian_cmi(self.partial_correlation(r))

    def hmm(self) -> GaussianHmm:
        """Emission parameters of the regimes with a nominal transition matrix."""
        K = self.K
        A = np.full((K, K), 0.05 / max(K - 1, 1)) if K > 1 else np.ones((1, 1))
        np.fill_diagonal(A, 0.95 if K > 1 else 1.0)
        if self.ordered and K > 1:
            A = np.zeros((K, K))
            for r in range(K):
                A[r, r] = 0.95 if r < K - 1 else 1.0
                if r < K - 1:
                    A[r, r + 1] = 0.05
        initial = np.zeros(K)
        initial[0] = 1.0
        if not self.ordered:
            initial[:] = 1.0 / K
        return GaussianHmm(
            initial, A, self.regime_means(), np.stack([self.emission_covariance(r) for r in range(self.K)])
        )

    def _segments(self, rng: np.random.Generator) -> list[int]:
        if self.ordered:
            return list(range(self.K))
        n_seg = int(rng.integers(2, self.K + 1))
        seq = [int(rng.integers(self.K))]
        while len(seq) < n_seg:
            nxt = int(rng.integers(self.K - 1))
            seq.append(nxt if nxt < seq[-1] else nxt + 1)
        return seq

    def generate(self):
        """Observation sequences and ground-truth regime paths, one stream per event."""
        model = self.hmm()
        chol = np.linalg.cholesky(model.covariances)
        children = np.random.SeedSequence(self.seed).spawn(self.n_events)
        observations, truth = [], []
        for i, child in enumerate(children):
            rng = np.random.default_rng(child)
            segs = self._segments(rng)
            lo = max(self.T_range[0], self.min_segment * len(segs))
            T = int(rng.integers(lo, max(lo, self.T_range[1]) + 1))
            # random cut points with every segment at least min_segment long
            free = T - self.min_segment * len(segs)
            cuts = np.sort(rng.integers(0, free + 1, size=len(segs) - 1))
            lengths = np.diff(np.r_[0, cuts, free]) + self.min_segment
            states = np.repeat(np.array(segs, dtype=np.int64), lengths)
            X = model.means[states] + np.einsum("tij,tj->ti", chol[states], rng.standard_normal((T, model.D)))
            eid = f"{self.name}{i:04d}"
            observations.append(ObservationSequence(eid, X))
            truth.append(StateSequence(eid, states))
        return observations, truth


MLC_REGIMES = (
    (("s", "f"), ("s", "r"), ("ft", "rt")),
    (("s", "ft"), ("f", "r")),
    (("s", "rt"), ("s", "ft"), ("f", "ft")),
    (("s", "f"), ("f", "ft"), ("r", "rt")),
)
DLC_REGIMES = (
    (("s", "f"), ("r", "ft")),
    (("s", "rt"), ("f", "r")),
    (("s", "ft"), ("s", "r")),
)


def mlc_like(n_events: int = 200, seed: int = 0, coupling: float = 0.6) -> PlantedScenario:
    """Four regimes visited in a fixed order with strong coupling."""
    return PlantedScenario("mlc", MLC_REGIMES, coupling, ordered=True, n_events=n_events, seed=seed)


def dlc_like(n_events: int = 200, seed: int = 0, coupling: float = 0.3) -> PlantedScenario:
    """Three regimes, two or three segments per event in random order, weak coupling."""
    return PlantedScenario("dlc", DLC_REGIMES, coupling, ordered=False, n_events=n_events, seed=seed)


# -- trajectory tables ---------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryScenario:
    """Straight-lane scene with planted lane changes for the extraction stage.

    Lanes are numbered 1..n_lanes from y = 0 upward, each ``lane_width`` wide.
    Every event places a subject in ``origin_lane`` that moves sinusoidally
    into ``target_lane`` over ``lc_duration`` seconds, surrounded by lead and
    lag vehicles in both lanes plus a dense target-lane platoon.
    """

    n_events: int = 20
    origin_lane: int = 1
    target_lane: int = 2
    n_lanes: int = 4
    lane_width: float = 3.5
    dt_ms: int = 100
    speed: float = 15.0
    lc_duration: float = 4.0
    pre: float = 3.0
    post: float = 3.0
    platoon_spacing: float = 12.0
    seed: int = 0

    def marker_y(self) -> float:
        return self.lane_width * min(self.origin_lane, self.target_lane)

    def lane_center(self, lane: int) -> float:
        return self.lane_width * (lane - 0.5)

    def marker_points(self, x_max: float = 5000.0) -> list[tuple[float, float]]:
        return [(float(x), self.marker_y()) for x in np.linspace(-500.0, x_max, 12)]

    def generate(self) -> TrajectoryTable:
        rng = np.random.default_rng(self.seed)
        rows = []
        span = self.pre + self.lc_duration + self.post
        n_steps = int(round(span * 1000 / self.dt_ms)) + 1
        y0 = self.lane_center(self.origin_lane)
        y1 = self.lane_center(self.target_lane)
        for e in range(self.n_events):
            t0 = e * int((span + 2.0) * 1000)
            times = t0 + self.dt_ms * np.arange(n_steps)
            tau = (times - t0) / 1000.0
            x0 = float(rng.uniform(0.0, 50.0))
            u = np.clip((tau - self.pre) / self.lc_duration, 0.0, 1.0)
            y_s = y0 + (y1 - y0) * 0.5 * (1.0 - np.cos(np.pi * u))
            x_s = x0 + self.speed * tau
            lane_s = np.where(np.abs(y_s - y0) < np.abs(y_s - y1), self.origin_lane, self.target_lane)
            lane_s = np.where(np.abs(y_s - y0) == np.abs(y_s - y1), self.target_lane, lane_s)
            ev = f"e{e:03d}"
            rows += _rows(f"{ev}_s", times, x_s, y_s, lane_s, "car")
            for role, lane, gap in (("f", self.origin_lane, 25.0), ("r", self.origin_lane, -25.0)):
                yc = self.lane_center(lane)
                rows += _rows(f"{ev}_{role}", times, x_s + gap + rng.normal(0, 0.5), yc + _wander(rng, tau), lane, "car")
            yt = self.lane_center(self.target_lane)
            for j in range(-6, 7):
                gap = j * self.platoon_spacing + self.platoon_spacing / 2.0
                kind = "truck" if j == 3 else "car"
                rows += _rows(f"{ev}_p{j + 6:02d}", times, x_s + gap, yt + _wander(rng, tau), self.target_lane, kind)
        if not rows:
            return TrajectoryTable([], [], [], [], [], [], lanes=range(1, self.n_lanes + 1))
        return TrajectoryTable.from_records(rows, lanes=range(1, self.n_lanes + 1))


def _wander(rng, tau):
    """Smooth in-lane lateral drift of a few decimeters."""
    amp = rng.uniform(0.05, 0.25)
    period = rng.uniform(4.0, 12.0)
    return amp * np.sin(2.0 * np.pi * tau / period + rng.uniform(0.0, 2.0 * np.pi))


def _rows(vid, times, x, y, lane, kind):
    n = len(times)
    x = np.broadcast_to(x, (n,))
    y = np.broadcast_to(y, (n,))
    lane = np.broadcast_to(lane, (n,))
    return [(vid, int(times[i]), float(x[i]), float(y[i]), int(lane[i]), kind) for i in range(n)]


def write_trajectory_csv(table: TrajectoryTable, path) -> None:
    """Canonical CSV with fixed float formatting."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("track_id,timestamp_ms,x,y,lane_id,agent_type\n")
        for i in range(len(table)):
            fh.write(
                f"{table.vehicle_id[i]},{table.timestamp[i]},{table.x[i]:.6f},{table.y[i]:.6f},"
                f"{table.lane_id[i]},{table.agent_type[i]}\n"
            )
