"""Co-location encounters: extraction from traces and pairwise history aggregates.

Two users encounter when their sessions overlap in time at the same
location. Overlapping or abutting co-location intervals of one pair at one
location merge into a single encounter, so splitting a session into
contiguous halves never changes the encounter set.
"""

from __future__ import annotations

import csv
import gzip
import heapq
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .trace import LocationId, TraceWindow, UserId

ENCOUNTER_HEADER = ("user_a", "user_b", "location", "start_epoch_s", "duration_s")

_CHUNK = 1 << 18


@dataclass(frozen=True)
class Encounter:
    """A maximal co-location interval of two users (a < b) at one location."""

    a: UserId
    b: UserId
    location: LocationId
    start: int
    duration: int

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError("encounter endpoints must differ")
        if self.a > self.b:
            raise ValueError("encounter endpoints must be ordered a < b")
        if self.duration < 0:
            raise ValueError("duration must be >= 0")

    @property
    def end(self) -> int:
        return self.start + self.duration


class EncounterSet:
    """Columnar encounter collection sorted by (start, a, b, location)."""

    __slots__ = ("users", "locations", "window", "a_idx", "b_idx", "loc_idx", "start", "duration")

    def __init__(self, users, locations, window, a_idx, b_idx, loc_idx, start, duration):
        self.users = tuple(users)
        self.locations = tuple(locations)
        self.window = (int(window[0]), int(window[1]))
        self.a_idx = np.ascontiguousarray(a_idx, dtype=np.int32)
        self.b_idx = np.ascontiguousarray(b_idx, dtype=np.int32)
        self.loc_idx = np.ascontiguousarray(loc_idx, dtype=np.int32)
        self.start = np.ascontiguousarray(start, dtype=np.int64)
        self.duration = np.ascontiguousarray(duration, dtype=np.int64)
        for arr in (self.a_idx, self.b_idx, self.loc_idx, self.start, self.duration):
            arr.setflags(write=False)

    @classmethod
    def from_encounters(cls, encounters: Iterable[Encounter], window=None) -> "EncounterSet":
        encounters = list(encounters)
        users = sorted({e.a for e in encounters} | {e.b for e in encounters})
        locations = sorted({e.location for e in encounters})
        umap = {u: i for i, u in enumerate(users)}
        lmap = {l: i for i, l in enumerate(locations)}
        n = len(encounters)
        a = np.fromiter((umap[e.a] for e in encounters), np.int32, n)
        b = np.fromiter((umap[e.b] for e in encounters), np.int32, n)
        l = np.fromiter((lmap[e.location] for e in encounters), np.int32, n)
        s = np.fromiter((e.start for e in encounters), np.int64, n)
        d = np.fromiter((e.duration for e in encounters), np.int64, n)
        if window is None:
            window = (int(s.min()), int((s + d).max())) if n else (0, 0)
        order = np.lexsort((l, b, a, s))
        return cls(users, locations, window, a[order], b[order], l[order], s[order], d[order])

    def __len__(self) -> int:
        return len(self.start)

    def __iter__(self) -> Iterator[Encounter]:
        for i in range(len(self.start)):
            yield Encounter(
                self.users[self.a_idx[i]],
                self.users[self.b_idx[i]],
                self.locations[self.loc_idx[i]],
                int(self.start[i]),
                int(self.duration[i]),
            )

    def clipped(self, t0: int, t1: int) -> "EncounterSet":
        """Encounters restricted to [t0, t1); straddlers are truncated.

        Equals extracting encounters from the trace sliced to [t0, t1).
        """
        if t0 > t1:
            raise ValueError(f"clip bounds reversed: {t0} > {t1}")
        end = self.start + self.duration
        s = np.clip(self.start, t0, t1)
        e = np.clip(end, t0, t1)
        keep = e > s
        return EncounterSet(
            self.users,
            self.locations,
            (t0, t1),
            self.a_idx[keep],
            self.b_idx[keep],
            self.loc_idx[keep],
            s[keep],
            (e - s)[keep],
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, EncounterSet):
            return NotImplemented
        return (
            self.users == other.users
            and self.locations == other.locations
            and self.window == other.window
            and np.array_equal(self.a_idx, other.a_idx)
            and np.array_equal(self.b_idx, other.b_idx)
            and np.array_equal(self.loc_idx, other.loc_idx)
            and np.array_equal(self.start, other.start)
            and np.array_equal(self.duration, other.duration)
        )

    def __repr__(self) -> str:
        return f"EncounterSet({len(self)} encounters, {len(self.users)} users, window {self.window})"


def extract_encounters(trace: TraceWindow) -> EncounterSet:
    """Sweep the trace into merged pairwise encounters.

    Per (user, location) the session intervals are first merged (abutting
    intervals join); encounters are then the pairwise intersections of the
    merged presence intervals at each location. Zero-length overlaps are
    dropped. Runs in O(n log n + encounters).
    """
    keep = trace.duration > 0
    if not keep.any():
        return EncounterSet(trace.users, trace.locations, (trace.begin, trace.end), [], [], [], [], [])
    u = trace.user_idx[keep].astype(np.int64)
    l = trace.loc_idx[keep].astype(np.int64)
    s = trace.start[keep]
    e = s + trace.duration[keep]

    # merge each user's intervals at each location (gap 0 joins)
    group = l * len(trace.users) + u
    order = np.lexsort((s, group))
    group, s, e, u, l = group[order], s[order], e[order], u[order], l[order]
    m = len(s)
    new_group = np.empty(m, dtype=bool)
    new_group[0] = True
    new_group[1:] = group[1:] != group[:-1]
    gid = np.cumsum(new_group) - 1
    big = int(e.max() - s.min()) + 1
    cummax_end = np.maximum.accumulate(e + gid * big) - gid * big
    new_seg = new_group.copy()
    new_seg[1:] |= s[1:] > cummax_end[:-1]
    seg_starts = np.flatnonzero(new_seg)
    p_user = u[new_seg]
    p_loc = l[new_seg]
    p_start = s[new_seg]
    p_end = np.maximum.reduceat(e, seg_starts)

    # pairwise intersections per location, sweeping by start
    order2 = np.lexsort((p_start, p_loc))
    pu = p_user[order2].tolist()
    pl = p_loc[order2].tolist()
    ps = p_start[order2].tolist()
    pe = p_end[order2].tolist()

    chunks_a, chunks_b, chunks_l, chunks_s, chunks_e = [], [], [], [], []
    ca = np.empty(_CHUNK, np.int64)
    cb = np.empty(_CHUNK, np.int64)
    cl = np.empty(_CHUNK, np.int64)
    cs = np.empty(_CHUNK, np.int64)
    ce = np.empty(_CHUNK, np.int64)
    fill = 0
    cur_loc = -1
    active: list[tuple[int, int]] = []  # (end, user) heap
    for i in range(len(ps)):
        loc = pl[i]
        s0 = ps[i]
        e0 = pe[i]
        u0 = pu[i]
        if loc != cur_loc:
            cur_loc = loc
            active.clear()
        else:
            while active and active[0][0] <= s0:
                heapq.heappop(active)
        for e1, u1 in active:
            if fill == _CHUNK:
                chunks_a.append(ca)
                chunks_b.append(cb)
                chunks_l.append(cl)
                chunks_s.append(cs)
                chunks_e.append(ce)
                ca, cb = np.empty(_CHUNK, np.int64), np.empty(_CHUNK, np.int64)
                cl, cs, ce = np.empty(_CHUNK, np.int64), np.empty(_CHUNK, np.int64), np.empty(_CHUNK, np.int64)
                fill = 0
            if u0 < u1:
                ca[fill] = u0
                cb[fill] = u1
            else:
                ca[fill] = u1
                cb[fill] = u0
            cl[fill] = loc
            cs[fill] = s0
            ce[fill] = e1 if e1 < e0 else e0
            fill += 1
        heapq.heappush(active, (e0, u0))

    chunks_a.append(ca[:fill])
    chunks_b.append(cb[:fill])
    chunks_l.append(cl[:fill])
    chunks_s.append(cs[:fill])
    chunks_e.append(ce[:fill])
    a = np.concatenate(chunks_a)
    b = np.concatenate(chunks_b)
    loc = np.concatenate(chunks_l)
    st = np.concatenate(chunks_s)
    en = np.concatenate(chunks_e)
    order3 = np.lexsort((loc, b, a, st))
    return EncounterSet(
        trace.users,
        trace.locations,
        (trace.begin, trace.end),
        a[order3],
        b[order3],
        loc[order3],
        st[order3],
        (en - st)[order3],
    )


# ---------------------------------------------------------------------------
# History aggregates


class EncounterHistory:
    """Per-pair encounter count and total duration over one window.

    Pairs are stored once under (a < b); per-user views see both directions.
    The full user table is retained so isolated users report zero stats.
    """

    __slots__ = ("users", "window", "pair_a", "pair_b", "count", "duration", "_dir")

    def __init__(self, users, window, pair_a, pair_b, count, duration):
        self.users = tuple(users)
        self.window = (int(window[0]), int(window[1]))
        self.pair_a = np.ascontiguousarray(pair_a, dtype=np.int32)
        self.pair_b = np.ascontiguousarray(pair_b, dtype=np.int32)
        self.count = np.ascontiguousarray(count, dtype=np.int64)
        self.duration = np.ascontiguousarray(duration, dtype=np.int64)
        self._dir = None

    @property
    def n_pairs(self) -> int:
        return len(self.pair_a)

    def pairs(self) -> Iterator[tuple[UserId, UserId, int, int]]:
        for i in range(self.n_pairs):
            yield (
                self.users[self.pair_a[i]],
                self.users[self.pair_b[i]],
                int(self.count[i]),
                int(self.duration[i]),
            )

    def pair_stats(self, a: UserId, b: UserId) -> tuple[int, int]:
        """(count, total duration) for an unordered pair; (0, 0) if never met."""
        if a == b:
            raise ValueError("pair endpoints must differ")
        try:
            ia, ib = self._uidx(a), self._uidx(b)
        except KeyError:
            return (0, 0)
        if ia > ib:
            ia, ib = ib, ia
        key = np.int64(ia) * len(self.users) + ib
        keys = self.pair_a.astype(np.int64) * len(self.users) + self.pair_b
        i = np.searchsorted(keys, key)
        if i < len(keys) and keys[i] == key:
            return int(self.count[i]), int(self.duration[i])
        return (0, 0)

    def _uidx(self, user: UserId) -> int:
        from bisect import bisect_left

        i = bisect_left(self.users, user)
        if i >= len(self.users) or self.users[i] != user:
            raise KeyError(user)
        return i

    def _directed(self):
        """(src, dst, count, duration, offsets) sorted by (src, dst)."""
        if self._dir is None:
            src = np.concatenate([self.pair_a, self.pair_b])
            dst = np.concatenate([self.pair_b, self.pair_a])
            cnt = np.concatenate([self.count, self.count])
            dur = np.concatenate([self.duration, self.duration])
            order = np.lexsort((dst, src))
            src, dst, cnt, dur = src[order], dst[order], cnt[order], dur[order]
            offsets = np.searchsorted(src, np.arange(len(self.users) + 1))
            self._dir = (src, dst, cnt, dur, offsets)
        return self._dir

    def peer_arrays(self, owner_idx: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(peer indices, counts, durations) for one user, sorted by peer index."""
        _, dst, cnt, dur, offsets = self._directed()
        lo, hi = offsets[owner_idx], offsets[owner_idx + 1]
        return dst[lo:hi], cnt[lo:hi], dur[lo:hi]

    def peers(self, owner: UserId) -> list[tuple[UserId, int, int]]:
        """[(peer, count, duration)] sorted by peer id; [] for unknown owner."""
        try:
            i = self._uidx(owner)
        except KeyError:
            return []
        dst, cnt, dur = self.peer_arrays(i)
        return [(self.users[d], int(c), int(t)) for d, c, t in zip(dst.tolist(), cnt.tolist(), dur.tolist())]

    def merged(self, other: "EncounterHistory") -> "EncounterHistory":
        """Combine two histories (counts and durations add); order independent."""
        users = sorted(set(self.users) | set(other.users))
        remap_self = np.array([users.index(u) for u in self.users], dtype=np.int64) if self.users else np.array([], dtype=np.int64)
        remap_other = np.array([users.index(u) for u in other.users], dtype=np.int64) if other.users else np.array([], dtype=np.int64)
        nu = len(users)
        keys = np.concatenate(
            [
                remap_self[self.pair_a] * nu + remap_self[self.pair_b],
                remap_other[other.pair_a] * nu + remap_other[other.pair_b],
            ]
        )
        cnt = np.concatenate([self.count, other.count])
        dur = np.concatenate([self.duration, other.duration])
        ukeys, inv = np.unique(keys, return_inverse=True)
        window = (min(self.window[0], other.window[0]), max(self.window[1], other.window[1]))
        return EncounterHistory(
            users,
            window,
            (ukeys // nu).astype(np.int32),
            (ukeys % nu).astype(np.int32),
            np.bincount(inv, weights=cnt).astype(np.int64),
            np.bincount(inv, weights=dur).astype(np.int64),
        )

    def __repr__(self) -> str:
        return f"EncounterHistory({self.n_pairs} pairs, {len(self.users)} users, window {self.window})"


def build_history(encounters) -> EncounterHistory:
    """Aggregate an encounter stream into per-pair (count, duration).

    Accepts an EncounterSet or any iterable of Encounter; the result does
    not depend on input order.
    """
    if not isinstance(encounters, EncounterSet):
        encounters = EncounterSet.from_encounters(encounters)
    nu = len(encounters.users)
    if len(encounters) == 0:
        return EncounterHistory(encounters.users, encounters.window, [], [], [], [])
    keys = encounters.a_idx.astype(np.int64) * nu + encounters.b_idx
    ukeys, inv = np.unique(keys, return_inverse=True)
    count = np.bincount(inv).astype(np.int64)
    duration = np.bincount(inv, weights=encounters.duration).astype(np.int64)
    return EncounterHistory(
        encounters.users,
        encounters.window,
        (ukeys // nu).astype(np.int32),
        (ukeys % nu).astype(np.int32),
        count,
        duration,
    )


@dataclass(frozen=True)
class UserEncounterStats:
    """Per-user aggregate over a history window."""

    user: UserId
    total_encounters: int
    mean_duration: float
    unique_peers: int


def encounter_stats(history: EncounterHistory) -> list[UserEncounterStats]:
    """Per-user totals for every user in the window (isolated users get zeros)."""
    nu = len(history.users)
    counts = np.zeros(nu, dtype=np.int64)
    durs = np.zeros(nu, dtype=np.int64)
    peers = np.zeros(nu, dtype=np.int64)
    for side in (history.pair_a, history.pair_b):
        np.add.at(counts, side, history.count)
        np.add.at(durs, side, history.duration)
        np.add.at(peers, side, 1)
    out = []
    for i, user in enumerate(history.users):
        total = int(counts[i])
        mean = float(durs[i] / total) if total else 0.0
        out.append(UserEncounterStats(user, total, mean, int(peers[i])))
    return out


# ---------------------------------------------------------------------------
# Serialization


def write_encounters(encounters: EncounterSet, dest) -> None:
    """CSV with header `user_a,user_b,location,start_epoch_s,duration_s`."""
    if isinstance(dest, (str, Path)):
        path = Path(dest)
        opener = gzip.open if path.suffix == ".gz" else open
        with opener(path, "wt", encoding="utf-8", newline="") as fh:
            _write_encounter_rows(encounters, fh)
    else:
        _write_encounter_rows(encounters, dest)


def _write_encounter_rows(encounters: EncounterSet, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(ENCOUNTER_HEADER)
    users, locations = encounters.users, encounters.locations
    a = encounters.a_idx.tolist()
    b = encounters.b_idx.tolist()
    l = encounters.loc_idx.tolist()
    s = encounters.start.tolist()
    d = encounters.duration.tolist()
    for i in range(len(s)):
        w.writerow((users[a[i]], users[b[i]], locations[l[i]], s[i], d[i]))


def read_encounters(source, window=None) -> EncounterSet:
    """Parse the encounter CSV written by write_encounters."""
    close_me = None
    if isinstance(source, (str, Path)):
        path = Path(source)
        opener = gzip.open if path.suffix == ".gz" else open
        source = close_me = opener(path, "rt", encoding="utf-8", newline="")
    try:
        reader = csv.reader(source)
        rows = [r for r in reader if r and any(f.strip() for f in r)]
    finally:
        if close_me is not None:
            close_me.close()
    if rows and rows[0] == list(ENCOUNTER_HEADER):
        rows = rows[1:]
    encs = [Encounter(r[0], r[1], r[2], int(r[3]), int(r[4])) for r in rows]
    return EncounterSet.from_encounters(encs, window=window)


def encounters_to_csv_text(encounters: EncounterSet) -> str:
    buf = io.StringIO()
    _write_encounter_rows(encounters, buf)
    return buf.getvalue()
