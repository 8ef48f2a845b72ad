"""Nearest-neighbor mutual information, conditional mutual information and a
local-permutation conditional independence test.

All estimators use the max-norm. Neighbor radii come from the joint space and
subspace counts use strict inequality with the point itself included, so every
count is at least 1 and the digamma terms are always finite::

    I(X;Y|Z) ~ psi(k) + < psi(k_z) - psi(k_xz) - psi(k_yz) >

Inputs are expected to be preprocessed (see :func:`preprocess_for_knn`) so
that no two samples are tied.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from . import _knn
from .errors import InsufficientSamplesError, ZeroVarianceError

#: below this sample count neighbor statistics are computed by brute force
BRUTE_FORCE_BELOW = 512

# psi(x) ~ ln x - 1/(2x) - sum_n B_2n / (2n x^2n); coefficients of x^-2, x^-4, ...
_ASYMPTOTIC = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)
_SHIFT_TO = 10.0


def digamma(x):
    """Logarithmic derivative of the gamma function for positive arguments.

    Small arguments are shifted above 10 with psi(x) = psi(x + 1) - 1/x and the
    asymptotic expansion is summed to the x**-14 term, which leaves a
    truncation error below 1e-16 there.

    Accepts scalars or arrays; returns the same shape.
    """
    arr = np.asarray(x, dtype=float)
    if arr.size and not (np.all(arr > 0) and np.all(np.isfinite(arr))):
        raise ValueError("digamma is only defined here for finite x > 0")
    v = arr.copy()
    acc = np.zeros_like(v)
    small = v < _SHIFT_TO
    while np.any(small):
        acc[small] -= 1.0 / v[small]
        v[small] += 1.0
        small = v < _SHIFT_TO
    inv2 = 1.0 / (v * v)
    series = np.zeros_like(v)
    for coef in reversed(_ASYMPTOTIC):
        series = (series + coef) * inv2
    out = acc + np.log(v) - 0.5 / v - series
    if np.ndim(x) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class CmiQuery:
    """Row-aligned samples of X, Y and the conditioning set Z."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    k: int = 5

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        z = np.asarray(self.z, dtype=float)
        if z.size == 0:
            z = np.empty((x.shape[0], 0))
        elif z.ndim == 1:
            z = z[:, None]
        if y.shape[0] != x.shape[0] or z.shape[0] != x.shape[0]:
            raise ValueError(
                f"x, y, z are not row-aligned: {x.shape[0]}, {y.shape[0]}, {z.shape[0]}"
            )
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if x.shape[0] < self.k + 2:
            raise InsufficientSamplesError(
                f"need at least k + 2 = {self.k + 2} samples, got {x.shape[0]}"
            )
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", np.ascontiguousarray(z))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d_z(self) -> int:
        return self.z.shape[1]


@dataclass(frozen=True)
class NeighborCounts:
    eps: np.ndarray
    k_z: np.ndarray
    k_xz: np.ndarray
    k_yz: np.ndarray


@dataclass(frozen=True)
class CiTestConfig:
    B: int = 1000
    alpha: float = 0.05
    k_perm: int = 5
    seed: int = 0
    #: use (1 + count) / (1 + B) instead of the plain exceedance fraction
    conservative: bool = False

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("B must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.k_perm < 1:
            raise ValueError("k_perm must be >= 1")


@dataclass(frozen=True)
class CiTestResult:
    cmi: float
    p_value: float
    surrogate_cmis: np.ndarray
    significant: bool
    exceedances: int


def preprocess_for_knn(
    query: CmiQuery,
    jitter_scale: float = 1e-10,
    seed: int = 0,
    transform: str = "rank",
) -> CmiQuery:
    """Make a query safe for tie-sensitive neighbor counting.

    Constant z columns (absent vehicles held at the sentinel point) are
    dropped. Each remaining column is rank-transformed (``"rank"``) or
    z-scored (``"standardize"``), then uniform noise of amplitude
    ``jitter_scale * std(column)`` is added from a generator seeded by
    ``seed``. Raises :class:`ZeroVarianceError` if x or y is constant.
    """
    if transform not in ("rank", "standardize"):
        raise ValueError(f"unknown transform {transform!r}")
    for name, col in (("x", query.x), ("y", query.y)):
        if np.ptp(col) == 0:
            raise ZeroVarianceError(f"{name} has zero variance")
    keep = [c for c in range(query.d_z) if np.ptp(query.z[:, c]) > 0]
    cols = np.column_stack([query.x, query.y, query.z[:, keep]])
    if transform == "rank":
        cols = np.column_stack([rankdata(cols[:, c]) for c in range(cols.shape[1])])
    else:
        cols = (cols - cols.mean(axis=0)) / cols.std(axis=0)
    rng = np.random.default_rng(seed)
    amplitude = jitter_scale * cols.std(axis=0)
    cols = cols + amplitude * rng.random(cols.shape)
    return CmiQuery(cols[:, 0], cols[:, 1], cols[:, 2:], query.k)


def _as_2d(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def _pairwise_maxdist(a: np.ndarray) -> np.ndarray:
    return np.abs(a[:, None, :] - a[None, :, :]).max(axis=2)


def _kth_neighbor_distance(points: np.ndarray, k: int) -> np.ndarray:
    """Max-norm distance from each point to its k-th nearest other point."""
    n = points.shape[0]
    if n < BRUTE_FORCE_BELOW:
        d = _pairwise_maxdist(points)
        np.fill_diagonal(d, np.inf)
        return np.partition(d, k - 1, axis=1)[:, k - 1]
    dist, _ = cKDTree(points).query(points, k=k + 1, p=np.inf)
    return dist[:, -1]


def _count_within(points: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Number of points strictly closer than eps[i] to point i, itself included."""
    n = points.shape[0]
    if points.shape[1] == 0:
        return np.full(n, n, dtype=np.int64)
    if n < BRUTE_FORCE_BELOW:
        return (_pairwise_maxdist(points) < eps[:, None]).sum(axis=1)
    # query_ball_point is inclusive; the next float below eps makes it strict
    radius = np.nextafter(eps, 0.0)
    return np.asarray(
        cKDTree(points).query_ball_point(points, r=radius, p=np.inf, return_length=True),
        dtype=np.int64,
    )


def neighbor_counts(query: CmiQuery) -> NeighborCounts:
    x = query.x[:, None]
    y = query.y[:, None]
    z = query.z
    eps = _kth_neighbor_distance(np.hstack([x, y, z]), query.k)
    return NeighborCounts(
        eps=eps,
        k_z=_count_within(z, eps),
        k_xz=_count_within(np.hstack([x, z]), eps),
        k_yz=_count_within(np.hstack([y, z]), eps),
    )


def _cmi_from_counts(k, k_z, k_xz, k_yz, table=None) -> float:
    if table is None:
        psi = lambda c: digamma(c.astype(float))  # noqa: E731
    else:
        # table[m - 1] == digamma(m); digamma is elementwise, so values are identical
        psi = lambda c: table[c - 1]  # noqa: E731
    return digamma(float(k)) + float(np.mean(psi(k_z) - psi(k_xz) - psi(k_yz)))


def estimate_mi(x, y, k: int = 5) -> float:
    """KSG mutual information (first algorithm) in nats; may be slightly negative."""
    xs = _as_2d(x)
    ys = _as_2d(y)
    n = xs.shape[0]
    if ys.shape[0] != n:
        raise ValueError("x and y are not row-aligned")
    if n < k + 2:
        raise InsufficientSamplesError(f"need at least k + 2 = {k + 2} samples, got {n}")
    eps = _kth_neighbor_distance(np.hstack([xs, ys]), k)
    k_x = _count_within(xs, eps)
    k_y = _count_within(ys, eps)
    return digamma(float(k)) + digamma(float(n)) - float(
        np.mean(digamma(k_x.astype(float)) + digamma(k_y.astype(float)))
    )


def estimate_cmi(query: CmiQuery) -> float:
    """Conditional mutual information I(X;Y|Z) in nats; reduces to MI when Z is empty."""
    if query.d_z == 0:
        return estimate_mi(query.x, query.y, query.k)
    c = neighbor_counts(query)
    return _cmi_from_counts(query.k, c.k_z, c.k_xz, c.k_yz)


def z_neighbors(z: np.ndarray, k_perm: int) -> np.ndarray:
    """Indices of the k_perm nearest points (self included) of each row in z-space."""
    k_perm = min(k_perm, z.shape[0])
    _, idx = cKDTree(z).query(z, k=k_perm, p=np.inf)
    return np.asarray(idx, dtype=np.int64).reshape(z.shape[0], k_perm)


def local_permutation_surrogate(
    query: CmiQuery,
    k_perm: int,
    rng: np.random.Generator,
    neighbors: np.ndarray | None = None,
) -> np.ndarray:
    """Rearrangement of x that keeps each value near its original z.

    Every sample draws a donor uniformly from its ``k_perm`` nearest z-space
    neighbors, visiting samples in random order and skipping donors that are
    already taken. Samples left without a donor are matched to the remaining
    unused donors at random, so the output is always a permutation of x. With
    no conditioning variables, or ``k_perm >= n``, this is a plain shuffle.
    """
    n = query.n
    if query.d_z == 0 or k_perm >= n:
        return rng.permutation(query.x)
    if neighbors is None:
        neighbors = z_neighbors(query.z, k_perm)
    keys = rng.random(neighbors.shape)
    shuffled = np.take_along_axis(neighbors, np.argsort(keys, axis=1), axis=1)
    order = rng.permutation(n)
    donor = _knn.greedy_local_assignment(np.ascontiguousarray(shuffled), order)
    missing = donor < 0
    if missing.any():
        taken = np.zeros(n, dtype=bool)
        taken[donor[~missing]] = True
        donor[missing] = rng.permutation(np.flatnonzero(~taken))
    return query.x[donor]


class SurrogateCmi:
    """CMI estimator for many rearrangements of x against the same (y, z).

    Neighbor structure in the (y, z) and z subspaces is built once; each
    evaluation then costs roughly n times the typical neighbor count. Results
    are identical to :func:`estimate_cmi` on the same data.

    With a single conditioning column the z-sorted order replaces candidate
    lists entirely.
    """

    def __init__(self, y: np.ndarray, z: np.ndarray, k: int, candidates: int = 64):
        self.k = k
        self._z = np.ascontiguousarray(z, dtype=float)
        self._y = np.ascontiguousarray(y, dtype=float)
        n, d_z = self._z.shape
        self._psi = digamma(np.arange(1, n + 1, dtype=float))
        if d_z == 0:
            raise ValueError("SurrogateCmi needs at least one conditioning column")
        if d_z == 1:
            self._order = np.argsort(self._z[:, 0], kind="stable")
            return
        self._order = None
        self._yz = np.ascontiguousarray(np.column_stack([self._y, self._z]))
        self._width = min(n, max(candidates, 4 * k))
        self._build()

    def _build(self):
        self._yz_dist, self._yz_nbr = self._lists(self._yz)
        self._z_dist, self._z_nbr = self._lists(self._z)

    def _lists(self, points):
        dist, idx = cKDTree(points).query(points, k=self._width, p=np.inf)
        n = points.shape[0]
        return (
            np.ascontiguousarray(np.asarray(dist, dtype=float).reshape(n, -1)),
            np.ascontiguousarray(np.asarray(idx, dtype=np.int64).reshape(n, -1)),
        )

    def widen_for(self, x: np.ndarray, quantile: float = 0.99):
        """Size candidate lists from the counts observed at ``x``."""
        if self._order is not None:
            return self
        _, k_z, _, k_yz = self.counts(x)
        need = int(2 * np.quantile(np.concatenate([k_z, k_yz]), quantile)) + 1
        n = self._z.shape[0]
        if need > self._width and self._width < n:
            self._width = min(n, need)
            self._build()
        return self

    def counts(self, x: np.ndarray):
        x = np.ascontiguousarray(x, dtype=float)
        if self._order is not None:
            return _knn.surrogate_counts_1d(x, self._y, self._z[:, 0], self._order, self.k)
        return _knn.surrogate_counts(
            x, self._yz, self._z, self._yz_nbr, self._yz_dist, self._z_nbr, self._z_dist, self.k
        )

    def __call__(self, x: np.ndarray) -> float:
        _, k_z, k_xz, k_yz = self.counts(x)
        return _cmi_from_counts(self.k, k_z, k_xz, k_yz, self._psi)


def surrogate_stream(seed: int, b: int) -> np.random.Generator:
    """Independent generator for surrogate ``b``; depends only on (seed, b)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))


def ci_test(query: CmiQuery, config: CiTestConfig = CiTestConfig()) -> CiTestResult:
    """Local-permutation test of X independent of Y given Z.

    The p value is the fraction of surrogate estimates that reach the observed
    one, p = #{b : I_b >= I} / B.
    """
    cmi = estimate_cmi(query)
    surrogates = np.empty(config.B)
    if query.d_z == 0:
        for b in range(config.B):
            xs = surrogate_stream(config.seed, b).permutation(query.x)
            surrogates[b] = estimate_mi(xs, query.y, query.k)
    else:
        engine = SurrogateCmi(query.y, query.z, query.k).widen_for(query.x)
        nbrs = z_neighbors(query.z, config.k_perm) if config.k_perm < query.n else None
        for b in range(config.B):
            xs = local_permutation_surrogate(query, config.k_perm, surrogate_stream(config.seed, b), nbrs)
            surrogates[b] = engine(xs)
    count = int(np.sum(surrogates >= cmi))
    if config.conservative:
        p = (1 + count) / (1 + config.B)
    else:
        p = count / config.B
    return CiTestResult(
        cmi=cmi,
        p_value=p,
        surrogate_cmis=surrogates,
        significant=p <= config.alpha,
        exceedances=count,
    )

