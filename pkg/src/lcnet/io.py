"""File formats shared by the CLI stages.

Floats are written with ``repr`` so that values round-trip exactly and the
same numbers always produce the same bytes.
"""
from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import math
import os
import platform
import sys
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError
from .hmm import StateSequence
from .trajectory import ROLES, LcEvent, ObservationSequence

EVENT_COLUMNS = (
    "event_id",
    "lc_type",
    "subject_id",
    "t_s",
    "t_c",
    "t_e",
    "origin_lane",
    "target_lane",
    "marker_id",
    *(f"veh_{r}" for r in ROLES[1:]),
    "clamped",
    "extrapolated",
    "density",
)
OBS_COLUMNS = ("t_index", "timestamp_ms", *(f"{c}_{r}" for r in ROLES for c in ("x", "y")), *(f"absent_{r}" for r in ROLES))


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return None if math.isnan(f) or math.isinf(f) else f
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    """Canonical JSON: sorted keys, NaN as null, trailing newline."""
    return json.dumps(_jsonable(obj), sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def write_rows(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    lines = [",".join(header)]
    lines += [",".join(fmt(v) if not isinstance(v, str) else v for v in row) for row in rows]
    return write_text(path, "\n".join(lines) + "\n")


def read_rows(path) -> list[dict]:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


# -- events ----------------------------------------------------------------------------


def write_events_csv(path, events: Sequence[LcEvent]) -> Path:
    rows = []
    for ev in events:
        rows.append(
            [
                ev.event_id,
                ev.lc_type,
                ev.subject_id,
                ev.t_s,
                ev.t_c,
                ev.t_e,
                ev.origin_lane,
                ev.target_lane,
                ev.marker_id,
                *(ev.roles.get(r) or "" for r in ROLES[1:]),
                bool(ev.clamped),
                bool(ev.extrapolated),
                math.nan if ev.density is None else ev.density,
            ]
        )
    return write_rows(path, EVENT_COLUMNS, rows)


def read_events_csv(path) -> list[LcEvent]:
    events = []
    for i, row in enumerate(read_rows(path), start=2):
        try:
            events.append(
                LcEvent(
                    event_id=row["event_id"],
                    subject_id=row["subject_id"],
                    lc_type=row["lc_type"],
                    t_c=int(row["t_c"]),
                    t_s=int(row["t_s"]),
                    t_e=int(row["t_e"]),
                    origin_lane=int(row["origin_lane"]),
                    target_lane=int(row["target_lane"]),
                    marker_id=int(row["marker_id"]),
                    roles={r: (row[f"veh_{r}"] or None) for r in ROLES[1:]},
                    clamped=row["clamped"] == "1",
                    extrapolated=row["extrapolated"] == "1",
                    density=float(row["density"]) if row["density"] else None,
                )
            )
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}, line {i}: {exc}") from exc
    return events


# -- observations --------------------------------------------------------------------------


def write_observation_csv(path, obs: ObservationSequence) -> Path:
    ts = obs.timestamps if obs.timestamps is not None else [None] * obs.T
    rows = (
        [t, ts[t], *obs.matrix[t].tolist(), *(bool(m) for m in obs.sentinel_mask[t])] for t in range(obs.T)
    )
    return write_rows(path, OBS_COLUMNS, rows)


def read_observation_csv(path, event_id: str | None = None) -> ObservationSequence:
    path = Path(path)
    rows = read_rows(path)
    if not rows:
        raise DataError(f"{path}: no observation rows")
    try:
        X = np.array([[float(r[f"{c}_{role}"]) for role in ROLES for c in ("x", "y")] for r in rows])
        mask = np.array([[r[f"absent_{role}"] == "1" for role in ROLES] for r in rows])
        ts = [r["timestamp_ms"] for r in rows]
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    stamps = np.array([int(t) for t in ts], dtype=np.int64) if all(ts) else None
    return ObservationSequence(event_id or path.stem, X, mask, stamps)


def observation_path(root, event_id: str) -> Path:
    return Path(root) / "observations" / f"{event_id}.csv"


def load_observations(root, events: Sequence[LcEvent]) -> list[ObservationSequence]:
    return [read_observation_csv(observation_path(root, ev.event_id), ev.event_id) for ev in events]


# -- decoded states ------------------------------------------------------------------------


def write_decoded_csv(path, decoded: Sequence[StateSequence]) -> Path:
    rows = ([d.event_id, t, int(s) + 1] for d in decoded for t, s in enumerate(d.states))
    return write_rows(path, ("event_id", "t_index", "state"), rows)


def read_decoded_csv(path) -> list[StateSequence]:
    by_event: dict[str, list[tuple[int, int]]] = {}
    for i, row in enumerate(read_rows(path), start=2):
        try:
            by_event.setdefault(row["event_id"], []).append((int(row["t_index"]), int(row["state"]) - 1))
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}, line {i}: {exc}") from exc
    out = []
    for eid, items in by_event.items():
        items.sort()
        if [t for t, _ in items] != list(range(len(items))):
            raise DataError(f"{path}: event {eid} has gaps in t_index")
        out.append(StateSequence(eid, np.array([s for _, s in items], dtype=np.int64)))
    return out


# -- lane markers ----------------------------------------------------------------------------


def read_marker_points(path) -> dict[int, list[tuple[float, float]]]:
    points: dict[int, list[tuple[float, float]]] = {}
    for i, row in enumerate(read_rows(path), start=2):
        try:
            points.setdefault(int(row["marker_id"]), []).append((float(row["x"]), float(row["y"])))
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}, line {i}: {exc}") from exc
    return points


def write_marker_points(path, points: Mapping[int, Sequence[tuple[float, float]]]) -> Path:
    rows = ([m, x, y] for m in sorted(points) for x, y in points[m])
    return write_rows(path, ("marker_id", "x", "y"), rows)


# -- provenance ---------------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(config_doc: Mapping) -> str:
    return hashlib.sha256(dumps(config_doc).encode()).hexdigest()


def write_manifest(out_dir, stage: str, files: Iterable, config_doc: Mapping, seed: int, argv=None) -> Path:
    """Record output hashes, config hash and seed; wall-clock data goes to a separate file."""
    out_dir = Path(out_dir)
    entries = {}
    for f in files:
        f = Path(f)
        entries[f.relative_to(out_dir).as_posix()] = sha256_file(f)
    manifest = {"stage": stage, "config_hash": config_hash(config_doc), "seed": int(seed), "files": entries}
    path = write_text(out_dir / f"{stage}.manifest.json", dumps(manifest))
    from . import __version__

    meta = {
        "stage": stage,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "argv": list(argv if argv is not None else sys.argv),
        "python": platform.python_version(),
        "lcnet": __version__,
        "host": platform.node(),
        "pid": os.getpid(),
    }
    write_text(out_dir / f"{stage}.metadata.json", dumps(meta))
    return path
