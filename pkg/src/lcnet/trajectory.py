"""Trajectory tables, lane geometry and lane-change event extraction."""
from __future__ import annotations

import csv
import io
import math
import os
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

ROLES = ("s", "f", "r", "ft", "rt")
AGENT_TYPES = ("car", "truck", "other")
CANONICAL_COLUMNS = ("track_id", "timestamp_ms", "x", "y", "lane_id", "agent_type")

KM_PER_MILE = 1.609344
#: HCM lower density bound of LOS E, pc/mi/ln
LOS_E_DENSITY_PER_MILE = 35.0
#: default congestion threshold in pc/km/ln (35 multiplied by 1.61, see README)
DEFAULT_DENSITY_THRESHOLD = 56.35


def per_mile_to_per_km(density: float) -> float:
    """Convert a density in vehicles per mile to vehicles per kilometre."""
    return density / KM_PER_MILE


class TrajectoryError(DataError):
    pass


@dataclass(frozen=True)
class Track:
    vehicle_id: str
    timestamps: np.ndarray
    x: np.ndarray
    y: np.ndarray
    lane_id: np.ndarray
    agent_type: str

    def index_of(self, t: int) -> int:
        i = int(np.searchsorted(self.timestamps, t))
        if i >= len(self.timestamps) or self.timestamps[i] != t:
            raise TrajectoryError(f"vehicle {self.vehicle_id} has no sample at t={t}")
        return i


class TrajectoryTable:
    """Immutable column store of vehicle samples sorted by (vehicle_id, timestamp)."""

    def __init__(self, vehicle_id, timestamp, x, y, lane_id, agent_type, lanes=None):
        vid = np.asarray(vehicle_id, dtype=str)
        ts = np.asarray(timestamp, dtype=np.int64)
        n = len(vid)
        cols = [np.asarray(c) for c in (x, y, lane_id, agent_type)]
        if any(len(c) != n for c in cols) or len(ts) != n:
            raise TrajectoryError("columns have different lengths")
        order = np.lexsort((ts, vid))
        self.vehicle_id = vid[order]
        self.timestamp = ts[order]
        self.x = np.asarray(x, dtype=float)[order]
        self.y = np.asarray(y, dtype=float)[order]
        self.lane_id = np.asarray(lane_id, dtype=np.int64)[order]
        self.agent_type = np.asarray(agent_type, dtype=str)[order]
        self.lanes = None if lanes is None else frozenset(int(v) for v in lanes)
        for arr in (self.vehicle_id, self.timestamp, self.x, self.y, self.lane_id, self.agent_type):
            arr.setflags(write=False)
        self._validate()
        self._by_time = None

    def _validate(self):
        if self.lanes is not None:
            unknown = sorted(set(np.unique(self.lane_id).tolist()) - self.lanes)
            if unknown:
                raise TrajectoryError(f"unknown lane_id(s) {unknown}; declared lanes {sorted(self.lanes)}")
        bad = set(np.unique(self.agent_type).tolist()) - set(AGENT_TYPES)
        if bad:
            raise TrajectoryError(f"unknown agent_type(s) {sorted(bad)}")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise TrajectoryError("non-finite coordinates")
        same = self.vehicle_id[1:] == self.vehicle_id[:-1]
        steps = np.diff(self.timestamp)[same]
        dup = np.flatnonzero(same & (np.diff(self.timestamp) <= 0))
        if dup.size:
            i = dup[0] + 1
            raise TrajectoryError(
                f"vehicle {self.vehicle_id[i]} has a repeated timestamp {self.timestamp[i]}"
            )
        self.dt = int(steps.min()) if steps.size else None
        if self.dt is not None and np.any(steps % self.dt):
            raise TrajectoryError(f"sampling is not a constant period of {self.dt} ms")

    @classmethod
    def from_records(cls, records: Iterable[Sequence], lanes=None) -> "TrajectoryTable":
        rows = list(records)
        if not rows:
            return cls([], [], [], [], [], [], lanes=lanes)
        cols = list(zip(*rows))
        return cls(*cols, lanes=lanes)

    def __len__(self):
        return len(self.vehicle_id)

    @property
    def vehicles(self) -> list[str]:
        return sorted(np.unique(self.vehicle_id).tolist())

    @property
    def time_span(self) -> tuple[int, int] | None:
        if not len(self):
            return None
        return int(self.timestamp.min()), int(self.timestamp.max())

    def track(self, vehicle_id: str) -> Track:
        lo = np.searchsorted(self.vehicle_id, vehicle_id, side="left")
        hi = np.searchsorted(self.vehicle_id, vehicle_id, side="right")
        if lo == hi:
            raise TrajectoryError(f"unknown vehicle {vehicle_id}")
        sl = slice(lo, hi)
        return Track(
            vehicle_id=str(vehicle_id),
            timestamps=self.timestamp[sl],
            x=self.x[sl],
            y=self.y[sl],
            lane_id=self.lane_id[sl],
            agent_type=str(self.agent_type[lo]),
        )

    def snapshot(self, t: int) -> np.ndarray:
        """Row indices of all samples taken at timestamp t."""
        if self._by_time is None:
            order = np.argsort(self.timestamp, kind="stable")
            ts = self.timestamp[order]
            starts = np.flatnonzero(np.r_[True, ts[1:] != ts[:-1]])
            ends = np.r_[starts[1:], len(ts)]
            self._by_time = {int(ts[s]): order[s:e] for s, e in zip(starts, ends)}
        return self._by_time.get(int(t), np.empty(0, dtype=np.int64))

    def equals(self, other: "TrajectoryTable") -> bool:
        return all(
            np.array_equal(getattr(self, a), getattr(other, a))
            for a in ("vehicle_id", "timestamp", "x", "y", "lane_id", "agent_type")
        )


def parse_trajectories(
    source,
    schema: Mapping[str, str] | None = None,
    lanes: Iterable[int] | None = None,
    delimiter: str = ",",
) -> TrajectoryTable:
    """Read a delimited trajectory file with a header row.

    ``source`` may be a path, a binary stream or a text stream. ``schema`` maps
    canonical column names (track_id, timestamp_ms, x, y, lane_id, agent_type)
    to the names used in the file; agent_type is optional and defaults to car.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return parse_trajectories(fh, schema, lanes, delimiter)
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    text = source
    if not isinstance(source, io.TextIOBase):
        text = io.TextIOWrapper(source, encoding="utf-8", newline="")
    names = {c: c for c in CANONICAL_COLUMNS}
    names.update(schema or {})
    reader = csv.reader(text, delimiter=delimiter)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise TrajectoryError("empty input: missing header row") from None
    pos = {}
    for canon in CANONICAL_COLUMNS:
        name = names[canon]
        if name in header:
            pos[canon] = header.index(name)
        elif canon != "agent_type":
            raise TrajectoryError(f"missing column {name!r} (for {canon})")
    records = []
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise TrajectoryError(f"line {line}: expected {len(header)} fields, got {len(row)}")
        try:
            agent = row[pos["agent_type"]].strip().lower() if "agent_type" in pos else "car"
            records.append(
                (
                    row[pos["track_id"]].strip(),
                    int(float(row[pos["timestamp_ms"]])),
                    float(row[pos["x"]]),
                    float(row[pos["y"]]),
                    int(float(row[pos["lane_id"]])),
                    agent if agent in AGENT_TYPES else "other",
                )
            )
        except ValueError as exc:
            raise TrajectoryError(f"line {line}: {exc}") from None
    return TrajectoryTable.from_records(records, lanes=lanes)


@dataclass(frozen=True)
class LaneBoundary:
    """Quadratic lane marker y = c2 x^2 + c1 x + c0 (meters)."""

    marker_id: int
    coefficients: tuple[float, float, float]
    valid_x_range: tuple[float, float]
    target_side_sign: int = 1

    def __post_init__(self):
        lo, hi = self.valid_x_range
        if not lo <= hi:
            raise ValueError("valid_x_range is empty")
        if self.target_side_sign not in (-1, 1):
            raise ValueError("target_side_sign must be +1 or -1")

    def __call__(self, x):
        c2, c1, c0 = self.coefficients
        return (c2 * x + c1) * x + c0

    def extrapolates(self, x, tolerance: float = 0.0):
        lo, hi = self.valid_x_range
        return (np.asarray(x) < lo - tolerance) | (np.asarray(x) > hi + tolerance)

    def oriented(self, sign: int) -> "LaneBoundary":
        return replace(self, target_side_sign=int(sign))


def fit_lane_boundary(points, marker_id: int = 0, target_side_sign: int = 1) -> LaneBoundary:
    """Least-squares quadratic through marker points."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be an (n, 2) array of (x, y)")
    if len(pts) < 3:
        raise ValueError(f"need at least 3 points to fit a quadratic, got {len(pts)}")
    x, y = pts[:, 0], pts[:, 1]
    design = np.column_stack([x * x, x, np.ones_like(x)])
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < 3:
        raise ValueError("rank-deficient design: need at least 3 distinct x values")
    return LaneBoundary(
        marker_id=marker_id,
        coefficients=tuple(float(c) for c in coef),
        valid_x_range=(float(x.min()), float(x.max())),
        target_side_sign=target_side_sign,
    )


def signed_lateral_distance(boundary: LaneBoundary, x, y):
    """Lateral offset from the marker, positive on the target side.

    Outside ``boundary.valid_x_range`` the quadratic is extrapolated; check
    :meth:`LaneBoundary.extrapolates` for the flag.
    """
    return boundary.target_side_sign * (np.asarray(y) - boundary(np.asarray(x)))


@dataclass(frozen=True)
class LaneTransition:
    from_lane: int
    to_lane: int
    lc_type: str
    marker_id: int


DEFAULT_TRANSITIONS = (
    LaneTransition(4, 3, "MLC", 3),
    LaneTransition(1, 2, "DLC", 1),
    LaneTransition(2, 1, "DLC", 1),
)


@dataclass(frozen=True)
class ExtractionConfig:
    density_threshold: float = DEFAULT_DENSITY_THRESHOLD
    lateral_offset: float = 1.0
    sentinel_point: tuple[float, float] = (-1.0e4, -1.0e4)
    #: seconds around t_c; None measures density over [t_s, t_e]
    density_window: float | None = None
    density_segment_length: float = 200.0
    transitions: tuple[LaneTransition, ...] = DEFAULT_TRANSITIONS
    #: +1 if traffic moves toward increasing x
    travel_direction: int = 1
    pcu: Mapping[str, float] = field(default_factory=lambda: {"car": 1.0, "truck": 1.0, "other": 1.0})
    rematch_per_frame: bool = False
    discard_clamped: bool = False

    def __post_init__(self):
        if not self.density_threshold > 0:
            raise ValueError("density_threshold must be positive")
        if not self.lateral_offset > 0:
            raise ValueError("lateral_offset must be positive")
        if self.travel_direction not in (-1, 1):
            raise ValueError("travel_direction must be +1 or -1")
        if self.density_segment_length <= 0:
            raise ValueError("density_segment_length must be positive")

    def transition_map(self) -> dict[tuple[int, int], LaneTransition]:
        return {(t.from_lane, t.to_lane): t for t in self.transitions}


@dataclass(frozen=True)
class Crossing:
    vehicle_id: str
    t_c: int
    lc_type: str
    origin_lane: int
    target_lane: int
    marker_id: int


def detect_crossing_events(
    table: TrajectoryTable, boundaries: Sequence[LaneBoundary], config: ExtractionConfig
) -> list[Crossing]:
    """One crossing per monitored lane_id change; t_c is the first sample in the new lane."""
    transitions = config.transition_map()
    markers = {b.marker_id for b in boundaries}
    found = []
    for vid in table.vehicles:
        tr = table.track(vid)
        changes = np.flatnonzero(tr.lane_id[1:] != tr.lane_id[:-1]) + 1
        for i in changes:
            key = (int(tr.lane_id[i - 1]), int(tr.lane_id[i]))
            rule = transitions.get(key)
            if rule is None or rule.marker_id not in markers:
                continue
            found.append(
                Crossing(vid, int(tr.timestamps[i]), rule.lc_type, key[0], key[1], rule.marker_id)
            )
    found.sort(key=lambda c: (c.t_c, c.vehicle_id))
    return found


@dataclass(frozen=True)
class LcWindow:
    t_s: int
    t_e: int
    start_clamped: bool = False
    end_clamped: bool = False
    extrapolated: bool = False

    @property
    def clamped(self) -> bool:
        return self.start_clamped or self.end_clamped


def locate_lc_window(track: Track, boundary: LaneBoundary, t_c: int, offset: float = 1.0) -> LcWindow:
    """Start and end of a lane change around the crossing time t_c.

    t_s is the last sample at or before t_c that is at least ``offset`` meters
    on the origin side of the marker, t_e the first sample at or after t_c at
    least ``offset`` meters on the target side. When the track ends first the
    window is clamped to the track and flagged.
    """
    ic = track.index_of(t_c)
    d = signed_lateral_distance(boundary, track.x, track.y)
    before = np.flatnonzero(d[: ic + 1] <= -offset)
    after = np.flatnonzero(d[ic:] >= offset)
    start_clamped = before.size == 0
    end_clamped = after.size == 0
    i_s = 0 if start_clamped else int(before[-1])
    i_e = len(d) - 1 if end_clamped else ic + int(after[0])
    extrapolated = bool(np.any(boundary.extrapolates(track.x[i_s : i_e + 1])))
    return LcWindow(
        t_s=int(track.timestamps[i_s]),
        t_e=int(track.timestamps[i_e]),
        start_clamped=start_clamped,
        end_clamped=end_clamped,
        extrapolated=extrapolated,
    )


def orient_boundary(boundary: LaneBoundary, track: Track, t_c: int) -> LaneBoundary:
    """Copy of ``boundary`` whose positive side is where the vehicle ends up."""
    ic = track.index_of(t_c)
    raw = track.y - boundary(track.x)
    # side the vehicle moves toward; robust to samples lying on the marker
    shift = raw[ic:].mean() - (raw[:ic].mean() if ic else 0.0)
    if shift == 0:
        nonzero = raw[ic:][raw[ic:] != 0]
        shift = nonzero[0] if nonzero.size else 1.0
    return boundary.oriented(1 if shift > 0 else -1)


@dataclass(frozen=True)
class LcEvent:
    event_id: str
    subject_id: str
    lc_type: str
    t_c: int
    t_s: int
    t_e: int
    origin_lane: int
    target_lane: int
    marker_id: int = 0
    roles: Mapping[str, str | None] = field(default_factory=dict)
    clamped: bool = False
    extrapolated: bool = False
    density: float | None = None

    def __post_init__(self):
        if not self.t_s <= self.t_c <= self.t_e:
            raise ValueError(f"{self.event_id}: need t_s <= t_c <= t_e")
        if self.t_e - self.t_s <= 0:
            raise ValueError(f"{self.event_id}: zero duration")
        if self.lc_type not in ("MLC", "DLC"):
            raise ValueError(f"unknown lc_type {self.lc_type!r}")
        roles = {r: None for r in ROLES}
        roles.update(self.roles)
        roles["s"] = self.subject_id
        object.__setattr__(self, "roles", roles)

    @property
    def duration_ms(self) -> int:
        return self.t_e - self.t_s


@dataclass
class ObservationSequence:
    """T x 2M position matrix of one event, columns (x_s, y_s, x_f, y_f, ...).

    ``sentinel_mask[t, m]`` marks rows where vehicle m is absent and its two
    columns hold the sentinel point.
    """

    event_id: str
    matrix: np.ndarray
    sentinel_mask: np.ndarray | None = None
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        if self.matrix.ndim != 2 or self.matrix.shape[1] % 2:
            raise ValueError("observation matrix must be T x 2M")
        if self.sentinel_mask is None:
            self.sentinel_mask = np.zeros((self.T, self.n_vehicles), dtype=bool)
        self.sentinel_mask = np.asarray(self.sentinel_mask, dtype=bool)
        if self.sentinel_mask.shape != (self.T, self.n_vehicles):
            raise ValueError("sentinel_mask must be T x M")

    @property
    def T(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_vehicles(self) -> int:
        return self.matrix.shape[1] // 2


def find_surrounding(
    table: TrajectoryTable,
    subject_id: str,
    t: int,
    origin_lane: int,
    target_lane: int,
    direction: int = 1,
) -> dict[str, str | None]:
    """Nearest lead and lag vehicles of the subject in the origin and target lanes at t."""
    rows = table.snapshot(t)
    ids = table.vehicle_id[rows]
    me = rows[ids == subject_id]
    if me.size == 0:
        raise TrajectoryError(f"subject {subject_id} has no sample at t={t}")
    x_s = table.x[me[0]]
    roles: dict[str, str | None] = {"s": subject_id}
    for lane, lead, lag in ((origin_lane, "f", "r"), (target_lane, "ft", "rt")):
        sel = rows[(table.lane_id[rows] == lane) & (ids != subject_id)]
        gap = direction * (table.x[sel] - x_s)
        ahead = gap >= 0
        roles[lead] = _nearest(table.vehicle_id[sel][ahead], gap[ahead])
        roles[lag] = _nearest(table.vehicle_id[sel][~ahead], -gap[~ahead])
    return roles


def _nearest(ids, gaps):
    if len(ids) == 0:
        return None
    # ties broken by vehicle id for determinism
    order = np.lexsort((ids, gaps))
    return str(ids[order[0]])


def match_surrounding(event: LcEvent, table: TrajectoryTable, config: ExtractionConfig) -> ObservationSequence:
    """Observation matrix over [t_s, t_e] with absent vehicles at the sentinel point."""
    dt = table.dt
    if dt is None:
        raise TrajectoryError("cannot infer the sampling period")
    times = np.arange(event.t_s, event.t_e + dt, dt, dtype=np.int64)
    subject = table.track(event.subject_id)
    pos = np.searchsorted(subject.timestamps, times)
    ok = (pos < len(subject.timestamps)) & (subject.timestamps[np.minimum(pos, len(subject.timestamps) - 1)] == times)
    if not ok.all():
        missing = times[~ok][0]
        raise TrajectoryError(f"{event.event_id}: subject {event.subject_id} has no sample at t={missing}")
    matrix = np.empty((len(times), 2 * len(ROLES)))
    mask = np.zeros((len(times), len(ROLES)), dtype=bool)
    sx, sy = config.sentinel_point
    fixed = dict(event.roles)
    if not fixed or all(fixed.get(r) is None for r in ROLES[1:]) and not config.rematch_per_frame:
        fixed = find_surrounding(
            table, event.subject_id, event.t_s, event.origin_lane, event.target_lane, config.travel_direction
        )
    tracks = {}
    for ti, t in enumerate(times):
        roles = fixed
        if config.rematch_per_frame:
            roles = find_surrounding(
                table, event.subject_id, int(t), event.origin_lane, event.target_lane, config.travel_direction
            )
        for m, role in enumerate(ROLES):
            vid = roles.get(role)
            sample = None
            if vid is not None:
                if vid not in tracks:
                    tracks[vid] = table.track(vid)
                tr = tracks[vid]
                i = np.searchsorted(tr.timestamps, t)
                if i < len(tr.timestamps) and tr.timestamps[i] == t:
                    sample = (tr.x[i], tr.y[i])
            if sample is None:
                matrix[ti, 2 * m : 2 * m + 2] = (sx, sy)
                mask[ti, m] = True
            else:
                matrix[ti, 2 * m : 2 * m + 2] = sample
    return ObservationSequence(event.event_id, matrix, mask, times)


def estimate_lane_density(
    table: TrajectoryTable,
    lane: int,
    window: tuple[int, int],
    segment_length: float,
    center=None,
    pcu: Mapping[str, float] | None = None,
) -> float:
    """Mean vehicle density of one lane over a time window, in pc/km/ln.

    At every timestamp in the window the weighted count of vehicles in
    ``lane`` within ``segment_length / 2`` of ``center`` is divided by the
    segment length in km; the result is averaged over timestamps. ``center``
    may be None (count the whole lane), a number, or a mapping from timestamp
    to longitudinal position.
    """
    if segment_length <= 0:
        raise ValueError("segment_length must be positive")
    dt = table.dt or 1
    lo, hi = window
    span = table.time_span
    if span is None or hi < lo:
        raise TrajectoryError("empty density window")
    times = [t for t in range(int(lo), int(hi) + 1, dt) if span[0] <= t <= span[1]]
    weights = pcu or {}
    per_km = []
    half = segment_length / 2.0
    for t in times:
        rows = table.snapshot(t)
        rows = rows[table.lane_id[rows] == lane]
        if center is not None and rows.size:
            c = center if isinstance(center, (int, float)) else center.get(t)
            if c is None:
                continue
            rows = rows[np.abs(table.x[rows] - c) <= half]
        count = sum(weights.get(str(a), 1.0) for a in table.agent_type[rows])
        per_km.append(count / (segment_length / 1000.0))
    if not per_km:
        raise TrajectoryError("empty density window")
    return float(np.mean(per_km))


def _density_window(event: LcEvent, config: ExtractionConfig) -> tuple[int, int]:
    if config.density_window is None:
        return event.t_s, event.t_e
    half = int(round(config.density_window * 500.0))
    return event.t_c - half, event.t_c + half


def event_density(event: LcEvent, table: TrajectoryTable, config: ExtractionConfig) -> float:
    subject = table.track(event.subject_id)
    center = dict(zip(subject.timestamps.tolist(), subject.x.tolist()))
    return estimate_lane_density(
        table,
        event.target_lane,
        _density_window(event, config),
        config.density_segment_length,
        center=center,
        pcu=config.pcu,
    )


def filter_by_density(events: Sequence[LcEvent], table: TrajectoryTable, config: ExtractionConfig) -> list[LcEvent]:
    """Keep events whose target-lane density strictly exceeds the threshold."""
    kept = []
    for ev in events:
        density = ev.density if ev.density is not None else event_density(ev, table, config)
        if density > config.density_threshold:
            kept.append(ev)
    return kept


def extract_events(
    table: TrajectoryTable, boundaries: Sequence[LaneBoundary], config: ExtractionConfig
) -> list[LcEvent]:
    """Crossings with their windows, surrounding-vehicle roles and densities.

    No density filtering happens here; see :func:`filter_by_density`.
    """
    by_marker = {b.marker_id: b for b in boundaries}
    events = []
    for c in detect_crossing_events(table, boundaries, config):
        track = table.track(c.vehicle_id)
        boundary = orient_boundary(by_marker[c.marker_id], track, c.t_c)
        win = locate_lc_window(track, boundary, c.t_c, config.lateral_offset)
        if win.t_e == win.t_s:
            warnings.warn(f"skipping zero-length lane change of {c.vehicle_id} at {c.t_c}")
            continue
        if win.clamped and config.discard_clamped:
            continue
        roles = find_surrounding(table, c.vehicle_id, win.t_s, c.origin_lane, c.target_lane, config.travel_direction)
        ev = LcEvent(
            event_id=f"{c.lc_type}_{c.vehicle_id}_{c.t_c}",
            subject_id=c.vehicle_id,
            lc_type=c.lc_type,
            t_c=c.t_c,
            t_s=win.t_s,
            t_e=win.t_e,
            origin_lane=c.origin_lane,
            target_lane=c.target_lane,
            marker_id=c.marker_id,
            roles=roles,
            clamped=win.clamped,
            extrapolated=win.extrapolated,
        )
        try:
            density = event_density(ev, table, config)
        except DataError:
            density = math.nan
        events.append(replace(ev, density=density))
    return events
