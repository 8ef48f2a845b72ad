"""Gaussian hidden Markov models over pooled lane-change observation sequences.

States are 0-based in memory. File formats and reports use 1-based labels.
"""
from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from sklearn.cluster import KMeans

from . import _hmmkern
from .errors import DataError, NumericalError
from .trajectory import ObservationSequence

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Standardizer:
    """Per-column z-scoring fitted on non-sentinel entries.

    Entries flagged in an observation's sentinel mask are replaced by
    ``sentinel_fill`` after scaling, so absent vehicles sit at one constant
    point regardless of the raw sentinel coordinates.
    """

    mean: np.ndarray
    scale: np.ndarray
    sentinel_fill: float = -10.0

    @classmethod
    def fit(cls, dataset: Sequence[ObservationSequence], sentinel_fill: float = -10.0) -> "Standardizer":
        mat = np.vstack([s.matrix for s in dataset])
        mask = np.vstack([np.repeat(s.sentinel_mask, 2, axis=1) for s in dataset])
        d = mat.shape[1]
        mean = np.zeros(d)
        scale = np.ones(d)
        for c in range(d):
            vals = mat[~mask[:, c], c]
            if vals.size == 0:
                continue
            sd = vals.std()
            if sd == 0:
                raise DataError(f"feature column {c} is constant across the training pool")
            mean[c] = vals.mean()
            scale[c] = sd
        return cls(mean, scale, sentinel_fill)

    def transform(self, seq: ObservationSequence) -> np.ndarray:
        out = (seq.matrix - self.mean) / self.scale
        out[np.repeat(seq.sentinel_mask, 2, axis=1)] = self.sentinel_fill
        return out


@dataclass(frozen=True)
class GaussianHmm:
    initial: np.ndarray
    transitions: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    standardizer: Standardizer | None = None
    seed: int | None = None

    def __post_init__(self):
        for name in ("initial", "transitions", "means", "covariances"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        K = self.initial.shape[0]
        if self.transitions.shape != (K, K):
            raise ValueError("transition matrix must be K x K")
        if self.means.ndim != 2 or self.means.shape[0] != K:
            raise ValueError("means must be K x D")
        D = self.means.shape[1]
        if self.covariances.shape != (K, D, D):
            raise ValueError("covariances must be K x D x D")
        if abs(self.initial.sum() - 1.0) > 1e-9 or np.any(self.initial < 0):
            raise ValueError("initial distribution must be a probability vector")
        if np.any(np.abs(self.transitions.sum(axis=1) - 1.0) > 1e-9) or np.any(self.transitions < 0):
            raise ValueError("transition rows must be probability vectors")
        if not np.allclose(self.covariances, np.swapaxes(self.covariances, 1, 2), rtol=0, atol=1e-12):
            raise ValueError("covariances must be symmetric")
        chol = np.empty_like(self.covariances)
        for k in range(K):
            try:
                chol[k] = np.linalg.cholesky(self.covariances[k])
            except np.linalg.LinAlgError:
                raise NumericalError(f"covariance of state {k} is not positive definite") from None
        object.__setattr__(self, "_chol", chol)

    @property
    def K(self) -> int:
        return self.initial.shape[0]

    @property
    def D(self) -> int:
        return self.means.shape[1]

    def features(self, seq: ObservationSequence) -> np.ndarray:
        if seq.matrix.shape[1] != self.D:
            raise DataError(f"{seq.event_id}: expected {self.D} columns, got {seq.matrix.shape[1]}")
        if self.standardizer is None:
            return seq.matrix
        return self.standardizer.transform(seq)

    def log_emission(self, X: np.ndarray) -> np.ndarray:
        """(T, K) matrix of log N(x_t; mu_k, Sigma_k)."""
        X = np.atleast_2d(X)
        K, D = self.K, self.D
        # whitening maps W_k = L_k^{-1} stacked column-wise: one matmul for all states
        W = np.empty((D, K * D))
        shift = np.empty(K * D)
        logdet = np.empty(K)
        for k in range(K):
            inv = solve_triangular(self._chol[k], np.eye(D), lower=True)
            W[:, k * D : (k + 1) * D] = inv.T
            shift[k * D : (k + 1) * D] = inv @ self.means[k]
            logdet[k] = 2.0 * np.log(np.diag(self._chol[k])).sum()
        white = X @ W - shift
        maha = np.square(white).reshape(X.shape[0], K, D).sum(axis=2)
        return -0.5 * (D * _LOG_2PI + logdet + maha)

    def permuted(self, perm: Sequence[int]) -> "GaussianHmm":
        """Model whose new state i is old state perm[i]."""
        p = np.asarray(perm)
        return GaussianHmm(
            self.initial[p],
            self.transitions[np.ix_(p, p)],
            self.means[p],
            self.covariances[p],
            self.standardizer,
            self.seed,
        )

    def to_dict(self) -> dict:
        doc = {
            "K": self.K,
            "D": self.D,
            "initial": self.initial.tolist(),
            "transitions": self.transitions.tolist(),
            "states": [
                {"mean": self.means[k].tolist(), "covariance": self.covariances[k].tolist()}
                for k in range(self.K)
            ],
            "seed": self.seed,
            "standardization": None,
        }
        if self.standardizer is not None:
            doc["standardization"] = {
                "mean": self.standardizer.mean.tolist(),
                "scale": self.standardizer.scale.tolist(),
                "sentinel_fill": self.standardizer.sentinel_fill,
            }
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "GaussianHmm":
        std = doc.get("standardization")
        return cls(
            initial=doc["initial"],
            transitions=doc["transitions"],
            means=[s["mean"] for s in doc["states"]],
            covariances=[s["covariance"] for s in doc["states"]],
            standardizer=None
            if std is None
            else Standardizer(np.asarray(std["mean"]), np.asarray(std["scale"]), std["sentinel_fill"]),
            seed=doc.get("seed"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "GaussianHmm":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class StateSequence:
    event_id: str
    states: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "states", np.asarray(self.states, dtype=np.int64))

    @property
    def labels(self) -> np.ndarray:
        """1-based state labels."""
        return self.states + 1

    def __len__(self):
        return len(self.states)


@dataclass(frozen=True)
class FitConfig:
    max_iterations: int = 500
    tolerance: float = 1e-6
    covariance_floor: float = 1e-6
    restarts: int = 5
    seed: int = 0
    standardize: bool = True
    sentinel_fill: float = -10.0
    #: relative slack for the per-iteration monotonicity assertion
    monotone_slack: float = 1e-8

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.covariance_floor > 0:
            raise ValueError("covariance_floor must be positive")


class FitResult(NamedTuple):
    model: GaussianHmm
    log_likelihood: float
    history: list
    converged: bool


# -- batched scaled forward-backward ---------------------------------------


class _Batch:
    """Row-stacked sequences with their offsets."""

    def __init__(self, arrays: Sequence[np.ndarray]):
        self.lengths = np.array([a.shape[0] for a in arrays], dtype=np.int64)
        self.starts = np.r_[0, np.cumsum(self.lengths)[:-1]].astype(np.int64)
        self.pooled = np.ascontiguousarray(np.vstack(arrays), dtype=float)
        n, d = self.pooled.shape
        self.outer = (self.pooled[:, :, None] * self.pooled[:, None, :]).reshape(n, d * d)


def _forward_backward(model: GaussianHmm, batch: _Batch, want_posteriors: bool = True):
    """Per-sequence log-likelihoods, posteriors gamma (N, K) and summed xi (K, K)."""
    logb = model.log_emission(batch.pooled)
    m = logb.max(axis=1, keepdims=True)
    B = np.exp(logb - m)
    alpha, beta, c, xi = _hmmkern.forward_backward(
        B, batch.starts, batch.lengths, model.initial, model.transitions, want_posteriors
    )
    with np.errstate(divide="ignore"):
        per_row = np.log(c) + m[:, 0]
    per_seq = np.add.reduceat(per_row, batch.starts)
    if not want_posteriors:
        return per_seq, None, None
    return per_seq, alpha * beta, xi


def _prepare(model_or_scaler, dataset: Sequence[ObservationSequence]) -> list[np.ndarray]:
    return [model_or_scaler.features(s) for s in dataset]


def log_likelihood(model: GaussianHmm, dataset: Sequence[ObservationSequence]) -> float:
    """Forward-algorithm log marginal likelihood summed over sequences.

    With a standardizer attached the density is that of the standardized
    features.
    """
    if not dataset:
        return 0.0
    per_seq, _, _ = _forward_backward(model, _Batch(_prepare(model, dataset)), want_posteriors=False)
    return float(per_seq.sum())


def _clip_covariance(cov: np.ndarray, floor: float) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    out = (vecs * np.maximum(vals, floor)) @ vecs.T
    return 0.5 * (out + out.T)


def _m_step(model: GaussianHmm, batch: _Batch, gamma, xi, floor: float) -> GaussianHmm:
    K, D = model.K, model.D
    g0 = gamma[batch.starts].sum(axis=0)
    initial = g0 / g0.sum()
    rows = xi.sum(axis=1)
    transitions = model.transitions.copy()
    live = rows > 0
    transitions[live] = xi[live] / rows[live, None]
    X = batch.pooled
    weight = gamma.sum(axis=0)
    first = gamma.T @ X
    second = (gamma.T @ batch.outer).reshape(K, D, D)
    means = model.means.copy()
    covs = model.covariances.copy()
    for k in range(K):
        if weight[k] <= 0:
            continue
        mu = first[k] / weight[k]
        means[k] = mu
        covs[k] = _clip_covariance(second[k] / weight[k] - np.outer(mu, mu), floor)
    return GaussianHmm(initial, transitions, means, covs, model.standardizer, model.seed)


def _initial_model(X: np.ndarray, K: int, seed: int, floor: float, standardizer) -> GaussianHmm:
    D = X.shape[1]
    if K == 1:
        centers = X.mean(axis=0, keepdims=True)
    else:
        km = KMeans(n_clusters=K, n_init=1, random_state=seed).fit(X)
        centers = km.cluster_centers_
    pooled = _clip_covariance(np.cov(X, rowvar=False, bias=True).reshape(D, D), floor)
    return GaussianHmm(
        np.full(K, 1.0 / K),
        np.full((K, K), 1.0 / K),
        centers,
        np.repeat(pooled[None], K, axis=0),
        standardizer,
        seed,
    )


def _run_em(model: GaussianHmm, batch: _Batch, config: FitConfig) -> FitResult:
    history = []
    converged = False
    prev = None
    for _ in range(config.max_iterations):
        per_seq, gamma, xi = _forward_backward(model, batch)
        ll = float(per_seq.sum())
        if not math.isfinite(ll):
            raise NumericalError("log-likelihood is not finite")
        if prev is not None:
            slack = config.monotone_slack * max(1.0, abs(prev))
            if ll < prev - slack:
                raise NumericalError(f"EM log-likelihood decreased from {prev!r} to {ll!r}")
        history.append(ll)
        if prev is not None and abs(ll - prev) < config.tolerance * max(1.0, abs(prev)):
            converged = True
            break
        prev = ll
        model = _m_step(model, batch, gamma, xi, config.covariance_floor)
    else:
        # the last M-step has not been scored yet
        ll = log_likelihood_batch(model, batch)
        if ll < history[-1] - config.monotone_slack * max(1.0, abs(history[-1])):
            raise NumericalError("EM log-likelihood decreased on the final step")
        history.append(ll)
    return FitResult(model, history[-1], history, converged)


def log_likelihood_batch(model: GaussianHmm, batch: _Batch) -> float:
    per_seq, _, _ = _forward_backward(model, batch, want_posteriors=False)
    return float(per_seq.sum())


def fit_em(dataset: Sequence[ObservationSequence], K: int, config: FitConfig = FitConfig()) -> FitResult:
    """Baum-Welch on pooled sequences; best of ``config.restarts`` k-means seeded runs.

    Every run is checked for a nondecreasing log-likelihood; a decrease beyond
    ``monotone_slack * |ll|`` raises :class:`NumericalError`.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if not dataset:
        raise DataError("empty dataset")
    short = [s.event_id for s in dataset if s.T < 2]
    if short:
        raise DataError(f"sequences need T >= 2: {short[:5]}")
    D = dataset[0].matrix.shape[1]
    if any(s.matrix.shape[1] != D for s in dataset):
        raise DataError("sequences have different column counts")
    scaler = Standardizer.fit(dataset, config.sentinel_fill) if config.standardize else None
    arrays = [scaler.transform(s) for s in dataset] if scaler else [s.matrix for s in dataset]
    batch = _Batch(arrays)
    if batch.pooled.shape[0] < K:
        raise DataError(f"fewer samples ({batch.pooled.shape[0]}) than states ({K})")
    best = None
    for r in range(config.restarts):
        init = _initial_model(batch.pooled, K, config.seed + r, config.covariance_floor, scaler)
        res = _run_em(init, batch, config)
        if best is None or res.log_likelihood > best.log_likelihood:
            best = res
    if not best.converged:
        delta = best.history[-1] - best.history[-2] if len(best.history) > 1 else float("nan")
        warnings.warn(f"EM did not converge for K={K}; final delta {delta:.3g}")
    model = best.model
    model = GaussianHmm(model.initial, model.transitions, model.means, model.covariances, scaler, config.seed)
    return FitResult(model, best.log_likelihood, best.history, best.converged)


class Selection(NamedTuple):
    k_best: int
    curve: list
    fits: dict
    errors: dict


def elbow(curve: Sequence[tuple[int, float]], fraction: float = 0.02) -> int:
    """Largest K whose gain over the previous K exceeds ``fraction`` of the total gain."""
    pts = sorted(curve)
    if not pts:
        raise ValueError("empty curve")
    total = pts[-1][1] - pts[0][1]
    chosen = pts[0][0]
    if total <= 0:
        return chosen
    for (_, prev), (k, ll) in zip(pts, pts[1:]):
        if ll - prev > fraction * total:
            chosen = k
    return chosen


def _fit_one(args):
    dataset, K, config = args
    return fit_em(dataset, K, config)


def select_state_count(
    dataset: Sequence[ObservationSequence],
    k_range: Sequence[int] = range(2, 21),
    config: FitConfig = FitConfig(),
    workers: int = 1,
    fraction: float = 0.02,
) -> Selection:
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise ValueError("k_range is empty")
    fits, errors = {}, {}
    jobs = [(dataset, k, config) for k in ks]
    if workers > 1 and len(ks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {k: pool.submit(_fit_one, job) for k, job in zip(ks, jobs)}
            for k, fut in futures.items():
                try:
                    fits[k] = fut.result()
                except (DataError, NumericalError) as exc:
                    errors[k] = exc
    else:
        for k, job in zip(ks, jobs):
            try:
                fits[k] = _fit_one(job)
            except (DataError, NumericalError) as exc:
                errors[k] = exc
    if not fits:
        first = errors[ks[0]]
        raise type(first)(f"every fit failed: { {k: str(e) for k, e in errors.items()} }")
    curve = [(k, fits[k].log_likelihood) for k in sorted(fits)]
    return Selection(elbow(curve, fraction), curve, fits, errors)


# -- decoding ----------------------------------------------------------------


def viterbi_path(model: GaussianHmm, X: np.ndarray) -> np.ndarray:
    """MAP path over feature rows X; ties go to the lower state index."""
    with np.errstate(divide="ignore"):
        log_pi = np.log(model.initial)
        log_a = np.log(model.transitions)
    return _hmmkern.viterbi_path(log_pi, log_a, np.ascontiguousarray(model.log_emission(X)))


def viterbi(model: GaussianHmm, sequence: ObservationSequence) -> StateSequence:
    return StateSequence(sequence.event_id, viterbi_path(model, model.features(sequence)))


def path_log_probability(model: GaussianHmm, X: np.ndarray, path: Sequence[int]) -> float:
    """Joint log-probability of a state path and the observations, summed left to right."""
    logb = model.log_emission(X)
    with np.errstate(divide="ignore"):
        log_a = np.log(model.transitions)
        s = np.log(model.initial[path[0]]) + logb[0, path[0]]
    for t in range(1, len(path)):
        s = (s + log_a[path[t - 1], path[t]]) + logb[t, path[t]]
    return float(s)


def relabel_by_occupancy(model: GaussianHmm, decoded: Sequence[StateSequence]):
    """Renumber states by descending occupancy (stable on ties).

    Returns (model, decoded, perm) where new state i was old state perm[i].
    """
    counts = np.bincount(np.concatenate([d.states for d in decoded]), minlength=model.K)
    perm = np.argsort(-counts, kind="stable")
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(model.K)
    relabeled = [StateSequence(d.event_id, inverse[d.states]) for d in decoded]
    return model.permuted(perm), relabeled, perm


# -- statistics --------------------------------------------------------------


@dataclass(frozen=True)
class StateStats:
    occupancy: np.ndarray
    frequency: np.ndarray
    lifetime_rate: np.ndarray
    mean_duration: float

    @property
    def K(self) -> int:
        return len(self.occupancy)

    def to_dict(self) -> dict:
        return {
            "states": [
                {
                    "state": k + 1,
                    "occupancy_percent": float(self.occupancy[k]),
                    "frequency": int(self.frequency[k]),
                    "mean_lifetime_rate": None
                    if math.isnan(self.lifetime_rate[k])
                    else float(self.lifetime_rate[k]),
                }
                for k in range(self.K)
            ],
            "mean_duration_samples": self.mean_duration,
        }


def runs(states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run values and run lengths of a 1-D integer sequence."""
    states = np.asarray(states)
    if states.size == 0:
        return states, np.empty(0, dtype=np.int64)
    edges = np.flatnonzero(states[1:] != states[:-1]) + 1
    starts = np.r_[0, edges]
    lengths = np.diff(np.r_[starts, states.size])
    return states[starts], lengths


def state_statistics(
    decoded: Sequence[StateSequence], K: int | None = None, durations: Sequence[int] | None = None
) -> StateStats:
    """Occupancy (percent), inbound-transition frequency and mean lifetime rate.

    The lifetime rate of a state is its mean run length divided by the mean
    event duration, both in samples. Unvisited states get NaN.
    """
    if not decoded:
        raise ValueError("decoded is empty")
    seqs = [d.states for d in decoded]
    if K is None:
        K = int(max(s.max() for s in seqs)) + 1
    if durations is None:
        durations = [len(s) for s in seqs]
    pooled = np.concatenate(seqs)
    occupancy = 100.0 * np.bincount(pooled, minlength=K) / pooled.size
    frequency = np.zeros(K, dtype=np.int64)
    run_total = np.zeros(K)
    run_count = np.zeros(K, dtype=np.int64)
    for s in seqs:
        vals, lengths = runs(s)
        np.add.at(frequency, vals[1:], 1)
        np.add.at(run_total, vals, lengths)
        np.add.at(run_count, vals, 1)
    mean_duration = float(np.mean(durations))
    with np.errstate(invalid="ignore", divide="ignore"):
        lifetime = np.where(run_count > 0, run_total / np.maximum(run_count, 1) / mean_duration, np.nan)
    return StateStats(occupancy, frequency, lifetime, mean_duration)
