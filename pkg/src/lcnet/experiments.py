"""Benchmarks behind the runnable scripts and the acceptance suite."""
from __future__ import annotations

import tempfile
import time
import warnings
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.optimize import linear_sum_assignment

from . import cli, hmm, synth
from .config import PipelineConfig
from .infotheory import CiTestConfig, CmiQuery, ci_test, estimate_cmi


def cmi_accuracy(rhos=(0.0, 0.3, 0.6, 0.9), n=10_000, k=5, seeds=20, d_z=1) -> dict:
    """Mean absolute error of the CMI estimate against the Gaussian closed form."""
    t0 = time.perf_counter()
    errors = {}
    for rho in rhos:
        truth = synth.analytic_gaussian_cmi(rho)
        est = [estimate_cmi(synth.gaussian_triplet(rho, d_z, n, np.random.default_rng(s), k)) for s in range(seeds)]
        errors[rho] = float(np.mean(np.abs(np.array(est) - truth)))
    return {"mean_abs_error": errors, "seconds": time.perf_counter() - t0}


def common_cause_null(n: int, rng: np.random.Generator) -> CmiQuery:
    """X <- Z -> Y with independent noises, so X and Y are independent given Z."""
    z = rng.standard_normal(n)
    return CmiQuery(z + rng.standard_normal(n), z + rng.standard_normal(n), z[:, None], 5)


def ci_calibration(trials=500, n=1000, B=200, alpha=0.05, seed=0) -> dict:
    t0 = time.perf_counter()
    children = np.random.SeedSequence(seed).spawn(trials)
    p = np.empty(trials)
    for i, child in enumerate(children):
        q = common_cause_null(n, np.random.default_rng(child))
        p[i] = ci_test(q, CiTestConfig(B=B, alpha=alpha, seed=int(child.generate_state(1)[0]))).p_value
    return {
        "rejection_rate": float(np.mean(p <= alpha)),
        "ks_statistic": float(stats.kstest(p, "uniform").statistic),
        "p_values": p,
        "seconds": time.perf_counter() - t0,
    }


def decoded_accuracy(decoded, truth, K_fit: int, K_true: int) -> float:
    """Agreement after the label matching that maximizes it."""
    d = np.concatenate([s.states for s in decoded])
    t = np.concatenate([s.states for s in truth])
    conf = np.zeros((K_fit, K_true))
    np.add.at(conf, (d, t), 1)
    r, c = linear_sum_assignment(-conf)
    return float(conf[r, c].sum() / d.size)


def planted_selection(n_events=200, T_range=(20, 60), k_range=range(2, 9), config=hmm.FitConfig(), seed=0) -> dict:
    t0 = time.perf_counter()
    model = synth.planted_three_state(D=10, seed=seed)
    obs, truth = synth.planted_corpus(model, n_events, T_range, seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sel = hmm.select_state_count(obs, k_range, config)
    best = sel.fits[sel.k_best].model
    decoded = [hmm.viterbi(best, o) for o in obs]
    return {
        "k_best": sel.k_best,
        "curve": sel.curve,
        "histories": {k: f.history for k, f in sel.fits.items()},
        "accuracy": decoded_accuracy(decoded, truth, best.K, model.K),
        "seconds": time.perf_counter() - t0,
    }


def mlc_vs_dlc(n_events=200, k_range=range(2, 9), B=100, restarts=3, seed=0, workdir=None) -> dict:
    """Full pipeline on both presets followed by the comparison report."""
    t0 = time.perf_counter()
    cfg = PipelineConfig(
        k_min=min(k_range),
        k_max=max(k_range),
        fit=hmm.FitConfig(restarts=restarts),
        ci=CiTestConfig(B=B),
    ).with_seed(seed)
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(workdir or tmp)
        timings = {}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for preset in ("mlc", "dlc"):
                t = time.perf_counter()
                d = root / preset
                cli.run_synth(cfg, d, preset, n_events)
                cli.run_fit(cfg, d, preset)
                cli.run_networks(cfg, d, preset)
                timings[preset] = time.perf_counter() - t
        report = cli.run_report(cfg, root, root / "mlc" / "mlc", root / "dlc" / "dlc")
    report["seconds"] = time.perf_counter() - t0
    report["stage_seconds"] = timings
    return report

