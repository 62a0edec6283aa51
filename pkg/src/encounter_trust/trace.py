"""Session traces: parsing, slicing, serialization, synthetic generation.

A trace is a start-sorted collection of association sessions
(user, location, start, duration) over a half-open window [begin, end).
Storage is columnar: identifiers are interned in sorted tables and the
per-session fields live in numpy arrays, which keeps multi-million-session
traces cheap while still exposing Session records for small-scale work.
"""

from __future__ import annotations

import csv
import gzip
import io
import re
from bisect import bisect_left
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Iterable, Iterator

import numpy as np

UserId = str
LocationId = str

DAY_S = 86400
WEEK_S = 7 * DAY_S

#: Canonical on-disk schema (epoch seconds, CSV with header).
CANONICAL_HEADER = ("user", "location", "start_epoch_s", "duration_s")

_DURATION_SUFFIX = re.compile(r"\s*(secs?|s)\s*$", re.IGNORECASE)


class TraceParseError(ValueError):
    """A malformed trace row in strict mode."""


@dataclass(frozen=True)
class Session:
    """One user's association interval with one location, [start, start + duration)."""

    user: UserId
    location: LocationId
    start: int
    duration: int

    def __post_init__(self):
        if not self.user:
            raise ValueError("user must be nonempty")
        if not self.location:
            raise ValueError("location must be nonempty")
        if self.duration < 0:
            raise ValueError(f"duration must be >= 0, got {self.duration}")

    @property
    def end(self) -> int:
        return self.start + self.duration


@dataclass(frozen=True)
class TraceFormat:
    """Input schema for delimited trace files.

    columns names the logical fields in file order; time_format is "epoch",
    "iso", or a strptime pattern (naive times are taken as UTC). Durations
    may carry a trailing "s"/"sec"/"secs" suffix.
    """

    delimiter: str = ","
    columns: tuple[str, ...] = ("user", "start", "duration", "location")
    time_format: str = "iso"
    header: bool = False

    def __post_init__(self):
        required = {"user", "location", "start", "duration"}
        if set(self.columns) != required or len(self.columns) != 4:
            raise ValueError(f"columns must be a permutation of {sorted(required)}")


#: Schema of the canonical serialized trace.
CANONICAL_FORMAT = TraceFormat(
    delimiter=",",
    columns=("user", "location", "start", "duration"),
    time_format="epoch",
    header=True,
)


class TraceWindow:
    """Immutable trace over [begin, end); sessions sorted by start time.

    Iterating yields Session values; the columnar arrays (user_idx, loc_idx,
    start, duration) plus the sorted users/locations tables are exposed
    read-only for vectorized consumers.
    """

    __slots__ = ("begin", "end", "users", "locations", "user_idx", "loc_idx", "start", "duration")

    def __init__(self, begin, end, users, locations, user_idx, loc_idx, start, duration, validate=True):
        begin = int(begin)
        end = int(end)
        users = tuple(users)
        locations = tuple(locations)
        user_idx = np.ascontiguousarray(user_idx, dtype=np.int32)
        loc_idx = np.ascontiguousarray(loc_idx, dtype=np.int32)
        start = np.ascontiguousarray(start, dtype=np.int64)
        duration = np.ascontiguousarray(duration, dtype=np.int64)

        order = np.argsort(start, kind="stable")
        if not np.array_equal(order, np.arange(len(start))):
            user_idx, loc_idx = user_idx[order], loc_idx[order]
            start, duration = start[order], duration[order]

        if validate:
            if begin > end:
                raise ValueError(f"begin {begin} > end {end}")
            if any(not u for u in users) or any(not l for l in locations):
                raise ValueError("identifiers must be nonempty")
            if list(users) != sorted(set(users)) or list(locations) != sorted(set(locations)):
                raise ValueError("identifier tables must be sorted and unique")
            n = len(start)
            if not (len(user_idx) == len(loc_idx) == len(duration) == n):
                raise ValueError("column lengths differ")
            if n:
                if user_idx.min() < 0 or (len(users) and user_idx.max() >= len(users)) or (not users):
                    raise ValueError("user_idx out of range")
                if loc_idx.min() < 0 or (len(locations) and loc_idx.max() >= len(locations)) or (not locations):
                    raise ValueError("loc_idx out of range")
                if duration.min() < 0:
                    raise ValueError("durations must be >= 0")
                send = start + duration
                inside = (start < end) & ((send > begin) | ((duration == 0) & (start >= begin)))
                if not inside.all():
                    i = int(np.flatnonzero(~inside)[0])
                    raise ValueError(
                        f"session at t={int(start[i])} (dur {int(duration[i])}) "
                        f"does not intersect [{begin}, {end})"
                    )

        for arr in (user_idx, loc_idx, start, duration):
            arr.setflags(write=False)
        self.begin = begin
        self.end = end
        self.users = users
        self.locations = locations
        self.user_idx = user_idx
        self.loc_idx = loc_idx
        self.start = start
        self.duration = duration

    @classmethod
    def from_sessions(cls, sessions: Iterable[Session], begin: int | None = None, end: int | None = None) -> "TraceWindow":
        sessions = list(sessions)
        users = sorted({s.user for s in sessions})
        locations = sorted({s.location for s in sessions})
        umap = {u: i for i, u in enumerate(users)}
        lmap = {l: i for i, l in enumerate(locations)}
        user_idx = np.fromiter((umap[s.user] for s in sessions), np.int32, len(sessions))
        loc_idx = np.fromiter((lmap[s.location] for s in sessions), np.int32, len(sessions))
        start = np.fromiter((s.start for s in sessions), np.int64, len(sessions))
        duration = np.fromiter((s.duration for s in sessions), np.int64, len(sessions))
        if begin is None:
            begin = int(start.min()) if sessions else 0
        if end is None:
            # a zero-duration session at max start must still fall inside [begin, end)
            end = max(int((start + duration).max()), int(start.max()) + 1) if sessions else begin
        return cls(begin, end, users, locations, user_idx, loc_idx, start, duration)

    def __len__(self) -> int:
        return len(self.start)

    def __iter__(self) -> Iterator[Session]:
        for i in range(len(self.start)):
            yield self.session(i)

    def session(self, i: int) -> Session:
        return Session(
            self.users[self.user_idx[i]],
            self.locations[self.loc_idx[i]],
            int(self.start[i]),
            int(self.duration[i]),
        )

    def sessions(self) -> list[Session]:
        """Materialize all sessions (intended for small windows)."""
        return list(self)

    def user_index(self, user: UserId) -> int:
        """Index of user in the sorted table; raises KeyError if absent."""
        i = bisect_left(self.users, user)
        if i >= len(self.users) or self.users[i] != user:
            raise KeyError(user)
        return int(i)

    def total_session_seconds(self) -> int:
        return int(self.duration.sum()) if len(self) else 0

    def sliced(self, t0: int, t1: int) -> "TraceWindow":
        return slice_trace(self, t0, t1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TraceWindow):
            return NotImplemented
        return (
            self.begin == other.begin
            and self.end == other.end
            and self.users == other.users
            and self.locations == other.locations
            and np.array_equal(self.user_idx, other.user_idx)
            and np.array_equal(self.loc_idx, other.loc_idx)
            and np.array_equal(self.start, other.start)
            and np.array_equal(self.duration, other.duration)
        )

    def __repr__(self) -> str:
        return (
            f"TraceWindow([{self.begin}, {self.end}), {len(self)} sessions, "
            f"{len(self.users)} users, {len(self.locations)} locations)"
        )


def slice_trace(trace: TraceWindow, t0: int, t1: int) -> TraceWindow:
    """Clip a trace to [t0, t1); straddling sessions are truncated.

    Identifier tables are compacted to users/locations actually present in
    the slice. Zero-duration sessions survive when their instant falls in
    the slice.
    """
    if t0 > t1:
        raise ValueError(f"slice bounds reversed: {t0} > {t1}")
    start = trace.start
    end = start + trace.duration
    new_start = np.clip(start, t0, t1)
    new_end = np.clip(end, t0, t1)
    keep = (new_end > new_start) | ((trace.duration == 0) & (start >= t0) & (start < t1))
    new_start = new_start[keep]
    new_dur = new_end[keep] - new_start
    uidx = trace.user_idx[keep]
    lidx = trace.loc_idx[keep]

    ukeep = np.unique(uidx)
    lkeep = np.unique(lidx)
    users = tuple(trace.users[i] for i in ukeep)
    locations = tuple(trace.locations[i] for i in lkeep)
    uidx = np.searchsorted(ukeep, uidx).astype(np.int32)
    lidx = np.searchsorted(lkeep, lidx).astype(np.int32)
    return TraceWindow(t0, t1, users, locations, uidx, lidx, new_start, new_dur, validate=False)


# ---------------------------------------------------------------------------
# Parsing and serialization


@dataclass(frozen=True)
class ParseResult:
    """Parsed window plus row accounting from parse_trace."""

    window: TraceWindow
    rows_total: int
    rows_parsed: int
    rows_skipped: int
    errors: tuple[str, ...]


def _parse_time(text: str, time_format: str) -> int:
    text = text.strip()
    if time_format == "epoch":
        return int(text)
    if time_format == "iso":
        if text.endswith(("Z", "z")):
            text = text[:-1] + "+00:00"
        dt = datetime.fromisoformat(text)
    else:
        dt = datetime.strptime(text, time_format)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def _parse_duration(text: str) -> int:
    value = int(_DURATION_SUFFIX.sub("", text.strip()))
    if value < 0:
        raise ValueError(f"negative duration {value}")
    return value


def _open_text(path: str | Path) -> IO[str]:
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rt", encoding="utf-8", newline="")
    return open(path, "rt", encoding="utf-8", newline="")


def parse_trace(
    source,
    fmt: TraceFormat = TraceFormat(),
    strict: bool = True,
    begin: int | None = None,
    end: int | None = None,
    max_errors: int = 32,
) -> ParseResult:
    """Parse a delimited trace into a TraceWindow (sorted by start).

    source may be a path (gzip by .gz suffix), an open text file, or any
    iterable of lines. In strict mode a malformed row raises
    TraceParseError; otherwise bad rows are counted and skipped. An empty
    input yields an empty window, not an error.
    """
    close_me = None
    if isinstance(source, (str, Path)):
        source = close_me = _open_text(source)
    try:
        reader = csv.reader(source, delimiter=fmt.delimiter)
        col = {name: i for i, name in enumerate(fmt.columns)}
        users: list[str] = []
        locs: list[str] = []
        starts: list[int] = []
        durs: list[int] = []
        total = skipped = 0
        errors: list[str] = []
        for lineno, row in enumerate(reader, start=1):
            if fmt.header and lineno == 1:
                continue
            if not row or all(not f.strip() for f in row):
                continue
            total += 1
            try:
                if len(row) != 4:
                    raise ValueError(f"expected 4 fields, got {len(row)}")
                user = row[col["user"]].strip()
                loc = row[col["location"]].strip()
                if not user or not loc:
                    raise ValueError("empty user or location")
                t = _parse_time(row[col["start"]], fmt.time_format)
                d = _parse_duration(row[col["duration"]])
            except (ValueError, KeyError, OverflowError) as exc:
                msg = f"row {lineno}: {exc}"
                if strict:
                    raise TraceParseError(msg) from exc
                skipped += 1
                if len(errors) < max_errors:
                    errors.append(msg)
                continue
            users.append(user)
            locs.append(loc)
            starts.append(t)
            durs.append(d)
    finally:
        if close_me is not None:
            close_me.close()

    utable = sorted(set(users))
    ltable = sorted(set(locs))
    umap = {u: i for i, u in enumerate(utable)}
    lmap = {l: i for i, l in enumerate(ltable)}
    n = len(users)
    start_a = np.array(starts, dtype=np.int64)
    dur_a = np.array(durs, dtype=np.int64)
    uidx = np.fromiter((umap[u] for u in users), np.int32, n)
    lidx = np.fromiter((lmap[l] for l in locs), np.int32, n)
    if begin is None:
        begin = int(start_a.min()) if n else 0
    if end is None:
        end = max(int((start_a + dur_a).max()), int(start_a.max()) + 1) if n else begin
    window = TraceWindow(begin, end, utable, ltable, uidx, lidx, start_a, dur_a)
    return ParseResult(window, total, n, skipped, tuple(errors))


def write_trace(trace: TraceWindow, dest) -> None:
    """Write the canonical CSV (`user,location,start_epoch_s,duration_s`).

    dest is a path (gzip by .gz suffix) or an open text file.
    """
    if isinstance(dest, (str, Path)):
        path = Path(dest)
        opener = gzip.open if path.suffix == ".gz" else open
        with opener(path, "wt", encoding="utf-8", newline="") as fh:
            _write_trace_rows(trace, fh)
    else:
        _write_trace_rows(trace, dest)


def _write_trace_rows(trace: TraceWindow, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CANONICAL_HEADER)
    users, locations = trace.users, trace.locations
    uidx = trace.user_idx.tolist()
    lidx = trace.loc_idx.tolist()
    starts = trace.start.tolist()
    durs = trace.duration.tolist()
    for i in range(len(starts)):
        w.writerow((users[uidx[i]], locations[lidx[i]], starts[i], durs[i]))


def trace_to_csv_text(trace: TraceWindow) -> str:
    buf = io.StringIO()
    _write_trace_rows(trace, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Synthetic traces


@dataclass(frozen=True)
class SyntheticTraceSpec:
    """Desk-scale trace generator parameters; the seed fully determines output.

    Each user gets a private preference order over locations; visit
    probabilities fall off as rank**(-concentration), so larger
    concentration means fewer effective locations per user. Every user
    emits exactly sessions_per_day sessions each day at uniform offsets.
    """

    users: int
    locations: int
    days: int
    sessions_per_day: int
    concentration: float = 1.0
    seed: int = 0
    session_seconds: tuple[int, int] = (600, 7200)

    def __post_init__(self):
        for name in ("users", "locations", "days", "sessions_per_day"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.concentration < 0:
            raise ValueError("concentration must be >= 0")
        lo, hi = self.session_seconds
        if not (0 < lo <= hi):
            raise ValueError("session_seconds must satisfy 0 < lo <= hi")


def generate_synthetic(spec: SyntheticTraceSpec) -> TraceWindow:
    """Generate a deterministic synthetic trace over [0, days * 86400)."""
    rng = np.random.default_rng(spec.seed)
    nu, nl, nd, r = spec.users, spec.locations, spec.days, spec.sessions_per_day
    per_user = nd * r

    # private location preference order per user
    perms = np.argsort(rng.random((nu, nl)), axis=1)
    weights = np.arange(1, nl + 1, dtype=np.float64) ** (-spec.concentration)
    cdf = np.cumsum(weights / weights.sum())

    u = rng.random((nu, per_user))
    rank = np.minimum(np.searchsorted(cdf, u, side="right"), nl - 1)
    loc_idx = np.take_along_axis(perms, rank, axis=1).astype(np.int32)

    day = np.tile(np.repeat(np.arange(nd, dtype=np.int64), r), nu)
    offset = rng.integers(0, DAY_S, size=nu * per_user, dtype=np.int64)
    start = day * DAY_S + offset
    lo, hi = spec.session_seconds
    duration = rng.integers(lo, hi + 1, size=nu * per_user, dtype=np.int64)

    users = tuple(f"u{i:05d}" for i in range(nu))
    locations = tuple(f"l{j:04d}" for j in range(nl))
    user_idx = np.repeat(np.arange(nu, dtype=np.int32), per_user)
    return TraceWindow(
        0,
        nd * DAY_S,
        users,
        locations,
        user_idx,
        loc_idx.reshape(-1),
        start,
        duration,
        validate=False,
    )
