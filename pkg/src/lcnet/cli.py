"""Command-line pipeline: extract, fit, decode, stats, networks, report, plus cmi and synth utilities.

All stages share one working directory (``--out``). Each stage reads what
earlier stages wrote there and adds its own files together with a
``<stage>.manifest.json`` (output hashes, config hash, seed) and a
``<stage>.metadata.json`` that holds the only wall-clock data.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
import warnings
from collections import Counter
from pathlib import Path

import numpy as np

from . import hmm
from . import io as lio
from . import network as nw
from . import synth
from .config import PipelineConfig
from .errors import ConfigError, DataError, InsufficientSamplesError, LcnetError, NumericalError
from .infotheory import CmiQuery, ci_test, preprocess_for_knn
from .trajectory import (
    ROLES,
    LaneBoundary,
    LcEvent,
    extract_events,
    filter_by_density,
    fit_lane_boundary,
    match_surrounding,
    parse_trajectories,
)

log = logging.getLogger("lcnet")

LC_TYPES = ("mlc", "dlc")

# magnitudes reported for the original field data; listed for orientation only
REFERENCE_VALUES = {
    "note": "field-data magnitudes for orientation; not reproducible from synthetic corpora",
    "reproducible": False,
    "mean_edge_cmi": {"MLC": 0.26, "DLC": 0.13},
    "dense_dins": {"MLC": 3, "DLC": 2},
    "dins_per_event": {"MLC": 4, "DLC": 3},
    "din_changes_per_event": {"MLC": 3, "DLC": 2},
}


# -- helpers -----------------------------------------------------------------------------


def _finish(out: Path, stage: str, files, cfg: PipelineConfig, extra: dict | None = None) -> None:
    doc = {"config": cfg.hashed_dict(), **(extra or {})}
    lio.write_manifest(out, stage, files, doc, cfg.seed)


def _stage_dir(out: Path, lc_type: str) -> Path:
    return out / lc_type


def _load_events(out: Path, lc_type: str | None) -> list[LcEvent]:
    path = out / "events.csv"
    if not path.exists():
        raise DataError(f"{path} not found; run extract or synth first")
    events = lio.read_events_csv(path)
    if lc_type is not None:
        events = [e for e in events if e.lc_type == lc_type.upper()]
    return events


def _load_corpus(out: Path, lc_type: str):
    events = _load_events(out, lc_type)
    if not events:
        raise DataError(f"no {lc_type.upper()} events in {out / 'events.csv'}")
    return events, lio.load_observations(out, events)


def _boundaries(cfg: PipelineConfig, base: Path) -> list[LaneBoundary]:
    if cfg.boundaries:
        wide = (-math.inf, math.inf)
        return [LaneBoundary(m, tuple(c), wide) for m, c in sorted(cfg.boundaries.items())]
    if cfg.markers is None:
        raise ConfigError("config needs either 'boundaries' or 'markers'")
    points = lio.read_marker_points(_resolve(cfg.markers, base))
    return [fit_lane_boundary(points[m], marker_id=m) for m in sorted(points)]


def _resolve(path, base: Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else base / p


# -- stages --------------------------------------------------------------------------------


def run_extract(cfg: PipelineConfig, out: Path, base: Path = Path(".")) -> dict:
    if cfg.trajectories is None:
        raise ConfigError("config has no 'trajectories' path")
    table = parse_trajectories(_resolve(cfg.trajectories, base), cfg.schema, cfg.lanes)
    events = []
    if len(table):
        events = extract_events(table, _boundaries(cfg, base), cfg.extraction)
        if cfg.filter_density:
            events = filter_by_density(events, table, cfg.extraction)
    if not events:
        warnings.warn("no lane-change events found")
    files = [lio.write_events_csv(out / "events.csv", events)]
    for ev in events:
        files.append(lio.write_observation_csv(lio.observation_path(out, ev.event_id), match_surrounding(ev, table, cfg.extraction)))
    summary = _extraction_summary(events)
    files.append(lio.write_text(out / "extraction_summary.json", lio.dumps(summary)))
    _finish(out, "extract", files, cfg)
    return summary


def _extraction_summary(events) -> dict:
    counts = Counter(e.lc_type for e in events)
    out = {"n_events": len(events), "by_type": {}}
    for t in ("MLC", "DLC"):
        dur = sorted(e.duration_ms / 1000.0 for e in events if e.lc_type == t)
        hist = Counter(int(d) for d in dur)
        out["by_type"][t] = {
            "count": counts.get(t, 0),
            "clamped": sum(1 for e in events if e.lc_type == t and e.clamped),
            "durations_s": dur,
            "duration_histogram_1s": [{"bin_start_s": b, "count": hist[b]} for b in sorted(hist)],
        }
    return out


def _selection_rows(sel: hmm.Selection):
    for k, ll in sel.curve:
        f = sel.fits[k]
        yield [k, ll, bool(f.converged), len(f.history)]


def _decode_all(model, observations):
    return [hmm.viterbi(model, o) for o in observations]


def run_fit(cfg: PipelineConfig, out: Path, lc_type: str) -> dict:
    events, obs = _load_corpus(out, lc_type)
    sel = hmm.select_state_count(obs, cfg.k_range, cfg.fit, workers=cfg.workers, fraction=cfg.elbow_fraction)
    for k, err in sel.errors.items():
        warnings.warn(f"fit with K={k} failed: {err}")
    model = sel.fits[sel.k_best].model
    decoded = _decode_all(model, obs)
    model, decoded, _ = hmm.relabel_by_occupancy(model, decoded)
    stats = hmm.state_statistics(decoded, K=model.K)
    d = _stage_dir(out, lc_type)
    files = [
        lio.write_text(d / "model.json", model.to_json() + "\n"),
        lio.write_decoded_csv(d / "decoded.csv", decoded),
        lio.write_rows(d / "selection.csv", ("K", "log_likelihood", "converged", "iterations"), _selection_rows(sel)),
        lio.write_text(d / "state_stats.json", lio.dumps({"K": model.K, **stats.to_dict()})),
    ]
    _finish(d, "fit", files, cfg, {"lc_type": lc_type})
    return {"k_best": sel.k_best, "curve": sel.curve}


def run_decode(cfg: PipelineConfig, out: Path, lc_type: str) -> list:
    d = _stage_dir(out, lc_type)
    model = _load_model(d)
    _, obs = _load_corpus(out, lc_type)
    decoded = _decode_all(model, obs)
    files = [lio.write_decoded_csv(d / "decoded.csv", decoded)]
    _finish(d, "decode", files, cfg, {"lc_type": lc_type})
    return decoded


def _load_model(d: Path) -> hmm.GaussianHmm:
    path = d / "model.json"
    if not path.exists():
        raise DataError(f"{path} not found; run fit first")
    return hmm.GaussianHmm.from_json(path.read_text(encoding="utf-8"))


def _load_decoded(d: Path):
    path = d / "decoded.csv"
    if not path.exists():
        raise DataError(f"{path} not found; run fit or decode first")
    return lio.read_decoded_csv(path)


def run_stats(cfg: PipelineConfig, out: Path, lc_type: str) -> dict:
    d = _stage_dir(out, lc_type)
    model = _load_model(d)
    stats = hmm.state_statistics(_load_decoded(d), K=model.K)
    doc = {"K": model.K, **stats.to_dict()}
    files = [lio.write_text(d / "state_stats.json", lio.dumps(doc))]
    _finish(d, "stats", files, cfg, {"lc_type": lc_type})
    return doc


def _network_doc(net: nw.InteractionNetwork) -> dict:
    return {
        "state": net.state + 1,
        "density": nw.density(net),
        "edges": [{"pair": list(p), "cmi": w, "p_value": net.p_values.get(p)} for p, w in net.weights.items()],
        "pairs": [{"pair": list(p), "cmi": net.cmi.get(p), "p_value": net.p_values.get(p)} for p in nw.PAIRS],
    }


def run_networks(cfg: PipelineConfig, out: Path, lc_type: str) -> dict:
    d = _stage_dir(out, lc_type)
    model = _load_model(d)
    decoded = _load_decoded(d)
    events, obs = _load_corpus(out, lc_type)
    by_id = {o.event_id: o for o in obs}
    missing = [s.event_id for s in decoded if s.event_id not in by_id]
    if missing:
        raise DataError(f"decoded events without observations: {missing[:3]}")
    obs = [by_id[s.event_id] for s in decoded]
    stats = hmm.state_statistics(decoded, K=model.K)
    kept = nw.prune_rare_states(stats, cfg.prune_threshold)
    ncfg = nw.NetworkConfig(k=cfg.k, ci=cfg.ci, jitter_scale=cfg.jitter_scale, transform=cfg.transform, workers=cfg.workers)
    nets, files = [], []
    nd = d / "networks"
    for s in kept:
        pooled = nw.pool_state_samples(decoded, obs, s)
        try:
            net, mat = nw.build_network(pooled, s, ncfg)
        except InsufficientSamplesError as exc:
            warnings.warn(f"skipping state {s + 1}: {exc}")
            continue
        nets.append(net)
        files.append(lio.write_text(nd / f"cmi_state{s + 1}.csv", mat.to_csv()))
        nw.write_graphml(net, nd / f"state{s + 1}.graphml")
        files.append(nd / f"state{s + 1}.graphml")
        files.append(lio.write_text(nd / f"state{s + 1}.dot", nw.to_dot(net, f"state{s + 1}")))
    if not nets:
        raise DataError("no state had enough samples for a network")
    catalog = nw.group_states_into_dins(nets, nw.SimilarityConfig(cfg.similarity_threshold))
    # the catalog covers only the states that produced networks
    dstats = nw.din_statistics(decoded, catalog)
    for din, rep in catalog.representative_networks.items():
        nw.write_graphml(rep, nd / f"din{din + 1}.graphml")
        files.append(nd / f"din{din + 1}.graphml")
        files.append(lio.write_text(nd / f"din{din + 1}.dot", nw.to_dot(rep, f"din{din + 1}")))
    report = {
        "lc_type": lc_type.upper(),
        "n_events": len(decoded),
        "K": model.K,
        "kept_states": [s + 1 for s in kept],
        "state_networks": [_network_doc(n) for n in nets],
        "dins": [
            {
                "din": din + 1,
                "member_states": [s + 1 for s in catalog.members[din]],
                "density": catalog.densities[din],
                "class": catalog.classes[din],
                "network": _network_doc(catalog.representative_networks[din]),
            }
            for din in sorted(catalog.members)
        ],
        "density_threshold": catalog.density_threshold,
        "degree_table": nw.degree_table(catalog),
        "din_statistics": dstats.to_dict(),
        "mean_edge_cmi": nw.mean_edge_cmi(nets),
        "mean_pair_cmi": nw.mean_pair_cmi(nets),
    }
    files.append(lio.write_text(d / "din_report.json", lio.dumps(report)))
    files.append(
        lio.write_rows(
            d / "din_orders.csv", ("event_id", "order"), ([eid, nw.format_order(o)] for eid, o in dstats.orders.items())
        )
    )
    _finish(d, "networks", files, cfg, {"lc_type": lc_type})
    return report


def summarize_report(doc: dict) -> dict:
    lifetimes = [d["mean_lifetime_rate"] for d in doc["din_statistics"]["dins"] if d["mean_lifetime_rate"] is not None]
    return {
        "lc_type": doc["lc_type"],
        "n_events": doc["n_events"],
        "K": doc["K"],
        "n_dins": len(doc["dins"]),
        "dense_dins": sum(1 for d in doc["dins"] if d["class"] == "dense"),
        "mean_edge_cmi": doc["mean_edge_cmi"],
        "mean_pair_cmi": doc["mean_pair_cmi"],
        "mean_din_lifetime_rate": float(np.mean(lifetimes)) if lifetimes else None,
        "dins_per_event": doc["din_statistics"]["dins_per_event"],
        "din_order_entropy_bits": doc["din_statistics"]["order_entropy_bits"],
        "critical_vehicles": {f"DIN {row['din']}": row["critical"] for row in doc["degree_table"]},
    }


def compare(a: dict, b: dict) -> dict:
    sa, sb = summarize_report(a), summarize_report(b)
    numeric = ("mean_edge_cmi", "mean_pair_cmi", "dense_dins", "n_dins", "dins_per_event", "din_order_entropy_bits", "mean_din_lifetime_rate")
    deltas = {}
    for key in numeric:
        va, vb = sa[key], sb[key]
        deltas[key] = None if va is None or vb is None else va - vb
    return {
        "a": sa,
        "b": sb,
        "delta_a_minus_b": deltas,
        "checks": {
            "a_higher_mean_edge_cmi": sa["mean_edge_cmi"] > sb["mean_edge_cmi"],
            "a_more_dins_per_event": sa["dins_per_event"] > sb["dins_per_event"],
            "a_lower_order_entropy": sa["din_order_entropy_bits"] < sb["din_order_entropy_bits"],
        },
        "reference_values": REFERENCE_VALUES,
    }


def _read_report(path: Path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "din_report.json"
    if not path.exists():
        raise DataError(f"{path} not found; run networks first")
    return json.loads(path.read_text(encoding="utf-8"))


def run_report(cfg: PipelineConfig, out: Path, a: Path | None = None, b: Path | None = None) -> dict:
    a = a or _stage_dir(out, "mlc")
    b = b or _stage_dir(out, "dlc")
    doc = compare(_read_report(a), _read_report(b))
    files = [lio.write_text(out / "report.json", lio.dumps(doc))]
    _finish(out, "report", files, cfg)
    return doc


def run_cmi(cfg: PipelineConfig, path: Path, x: str | None, y: str | None, z: str | None) -> dict:
    rows = lio.read_rows(path)
    if not rows:
        raise DataError(f"{path}: no data rows")
    header = list(rows[0])
    try:
        data = np.array([[float(r[h]) for h in header] for r in rows])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc

    def cols(spec, default):
        if spec is None:
            return default
        if spec == "":
            return []
        out = []
        for tok in spec.split(","):
            tok = tok.strip()
            if tok in header:
                out.append(header.index(tok))
            elif tok.isdigit() and int(tok) < len(header):
                out.append(int(tok))
            else:
                raise ConfigError(f"unknown column {tok!r}")
        return out

    xi, yi = cols(x, [0]), cols(y, [1])
    zi = cols(z, [i for i in range(len(header)) if i not in xi + yi])
    q = preprocess_for_knn(
        CmiQuery(data[:, xi], data[:, yi], data[:, zi] if zi else None, cfg.k),
        jitter_scale=cfg.jitter_scale,
        seed=cfg.seed,
        transform=cfg.transform,
    )
    res = ci_test(q, cfg.ci)
    return {"cmi": res.cmi, "p_value": res.p_value, "significant": bool(res.significant), "n": len(rows), "B": cfg.ci.B}


def _synth_events(obs, lc_type: str, dt_ms: int = 100) -> list[LcEvent]:
    events = []
    for o in obs:
        t_e = (o.T - 1) * dt_ms
        events.append(
            LcEvent(o.event_id, o.event_id, lc_type, (o.T // 2) * dt_ms, 0, t_e, 1, 2, 0, {r: f"{o.event_id}_{r}" for r in ROLES[1:]})
        )
    return events


def run_synth(cfg: PipelineConfig, out: Path, preset: str, n_events: int | None = None) -> dict:
    files = []
    seed = cfg.seed
    if preset in ("mlc", "dlc", "planted3"):
        if preset == "planted3":
            model = synth.planted_three_state(D=2 * len(ROLES), seed=seed)
            obs, truth = synth.planted_corpus(model, n_events or 200, (20, 60), seed)
            lc = "DLC"
        else:
            maker = synth.mlc_like if preset == "mlc" else synth.dlc_like
            obs, truth = maker(n_events=n_events or 200, seed=seed).generate()
            lc = preset.upper()
        dt = 100
        for o in obs:
            o.timestamps = np.arange(o.T, dtype=np.int64) * dt
        events = _synth_events(obs, lc, dt)
        files.append(lio.write_events_csv(out / "events.csv", events))
        for o in obs:
            files.append(lio.write_observation_csv(lio.observation_path(out, o.event_id), o))
        files.append(lio.write_decoded_csv(out / "truth.csv", truth))
        summary = {"preset": preset, "n_events": len(obs), "lc_type": lc}
    elif preset == "trajectory":
        sc = synth.TrajectoryScenario(n_events=n_events or 20, seed=seed)
        table = sc.generate()
        traj = out / "trajectories.csv"
        traj.parent.mkdir(parents=True, exist_ok=True)
        synth.write_trajectory_csv(table, traj)
        files.append(traj)
        marker = min(sc.origin_lane, sc.target_lane)
        files.append(lio.write_marker_points(out / "markers.csv", {marker: sc.marker_points()}))
        files.append(
            lio.write_text(
                out / "config.json",
                lio.dumps({"trajectories": "trajectories.csv", "markers": "markers.csv", "seed": seed}),
            )
        )
        summary = {"preset": preset, "n_events": sc.n_events, "lc_type": "DLC"}
    else:
        raise ConfigError(f"unknown preset {preset!r}")
    files.append(lio.write_text(out / "synth_summary.json", lio.dumps(summary)))
    _finish(out, "synth", files, cfg, {"preset": preset, "n_events": n_events})
    return summary


# -- argument handling ------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON pipeline config")
    common.add_argument("--seed", type=int, help="seed for every stochastic stage (overrides config)")
    common.add_argument("--workers", type=int, help="process count cap")
    common.add_argument("--out", type=Path, default=Path("lcnet_out"), help="working directory")
    common.add_argument("-v", "--verbose", action="store_true")
    typed = argparse.ArgumentParser(add_help=False)
    typed.add_argument("--lc-type", choices=LC_TYPES, default="dlc")

    p = _Parser(prog="lcnet", description="Dynamic interaction networks for lane-change events")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("extract", parents=[common], help="trajectories to lane-change events and observations")
    f = sub.add_parser("fit", parents=[common, typed], help="select K, fit the HMM, decode and summarize")
    f.add_argument("--k-min", type=int)
    f.add_argument("--k-max", type=int)
    sub.add_parser("decode", parents=[common, typed], help="Viterbi paths under a fitted model")
    sub.add_parser("stats", parents=[common, typed], help="state occupancy, frequency and lifetime")
    sub.add_parser("networks", parents=[common, typed], help="CI-gated networks, DINs and their statistics")
    r = sub.add_parser("report", parents=[common], help="compare two finished pipelines")
    r.add_argument("a", nargs="?", type=Path, help="first din_report.json or its directory (default OUT/mlc)")
    r.add_argument("b", nargs="?", type=Path, help="second one (default OUT/dlc)")
    c = sub.add_parser("cmi", parents=[common], help="CMI and CI test on a numeric CSV")
    c.add_argument("csv", type=Path)
    c.add_argument("--x", help="columns for X (names or indices, comma separated); default first")
    c.add_argument("--y", help="columns for Y; default second")
    c.add_argument("--z", help="columns for Z; default the rest, empty string for none")
    c.add_argument("--k", type=int)
    c.add_argument("--B", type=int)
    s = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    s.add_argument("--preset", choices=("mlc", "dlc", "planted3", "trajectory"), required=True)
    s.add_argument("--n-events", type=int)
    return p


def _config_from_args(args) -> tuple[PipelineConfig, Path]:
    base = Path(".")
    cfg = PipelineConfig()
    if args.config is not None:
        cfg = PipelineConfig.load(args.config)
        base = args.config.parent
    updates = {}
    if args.workers is not None:
        updates["workers"] = args.workers
    for name in ("k_min", "k_max", "k"):
        if getattr(args, name, None) is not None:
            updates[name] = getattr(args, name)
    try:
        if updates:
            cfg = dataclasses.replace(cfg, **updates)
        if getattr(args, "B", None) is not None:
            cfg = dataclasses.replace(cfg, ci=dataclasses.replace(cfg.ci, B=args.B))
        cfg = cfg.with_seed(args.seed if args.seed is not None else cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, base


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    logging.captureWarnings(True)
    try:
        cfg, base = _config_from_args(args)
        out = args.out
        cmd = args.command
        if cmd == "extract":
            result = run_extract(cfg, out, base)
            result = {"n_events": result["n_events"], **{t: v["count"] for t, v in result["by_type"].items()}}
        elif cmd == "fit":
            result = run_fit(cfg, out, args.lc_type)
            result = {"k_best": result["k_best"]}
        elif cmd == "decode":
            result = {"decoded_events": len(run_decode(cfg, out, args.lc_type))}
        elif cmd == "stats":
            result = run_stats(cfg, out, args.lc_type)
        elif cmd == "networks":
            rep = run_networks(cfg, out, args.lc_type)
            result = summarize_report(rep)
        elif cmd == "report":
            result = run_report(cfg, out, args.a, args.b)
        elif cmd == "cmi":
            result = run_cmi(cfg, args.csv, args.x, args.y, args.z)
        elif cmd == "synth":
            result = run_synth(cfg, out, args.preset, args.n_events)
        else:  # pragma: no cover - argparse rejects unknown commands
            raise ConfigError(f"unknown command {cmd}")
    except LcnetError as exc:
        print(f"lcnet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"lcnet: numerical failure: {exc}", file=sys.stderr)
        return NumericalError.exit_code
    except OSError as exc:
        print(f"lcnet: {exc}", file=sys.stderr)
        return DataError.exit_code
    sys.stdout.write(lio.dumps(result))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
