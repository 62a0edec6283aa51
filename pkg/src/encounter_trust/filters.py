"""Trust advisor filters: rank a user's encountered peers and cut trust lists.

Six filters are provided. FE and DE rank peers by encounter count and by
total shared time. BV-C and BV-D compare per-location session-count or
session-duration vectors by cosine. BM compares day-by-location time
matrices through their dominant behavior components (SVD based). RT picks
peers uniformly at random and exists as a control.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .encounters import EncounterHistory, build_history, extract_encounters
from .trace import DAY_S, LocationId, TraceWindow, UserId
from .util import derive_seed, share_size

FILTERS = ("FE", "DE", "BV-C", "BV-D", "BM", "RT")

#: similarity values below this are floating point dust and snap to zero
SIM_EPS = 1e-12


# ---------------------------------------------------------------------------
# FE / DE


def score_fe(history: EncounterHistory, owner: UserId) -> list[tuple[UserId, int]]:
    """Peers ranked by encounter count (descending, ties by id ascending)."""
    return _ranked(history, owner, key="count")


def score_de(history: EncounterHistory, owner: UserId) -> list[tuple[UserId, int]]:
    """Peers ranked by total encounter duration (descending, ties by id ascending)."""
    return _ranked(history, owner, key="duration")


def _ranked(history: EncounterHistory, owner: UserId, key: str) -> list[tuple[UserId, int]]:
    try:
        idx = history._uidx(owner)
    except KeyError:
        return []
    dst, cnt, dur = history.peer_arrays(idx)
    score = cnt if key == "count" else dur
    order = np.lexsort((dst, -score))
    return [(history.users[dst[i]], int(score[i])) for i in order.tolist()]


# ---------------------------------------------------------------------------
# Behavior vectors


@dataclass(frozen=True)
class BehaviorVector:
    """Per-location totals of one user's sessions (counts or seconds)."""

    owner: UserId
    kind: str  # "count" | "duration"
    entries: Mapping[LocationId, float]

    def __post_init__(self):
        if self.kind not in ("count", "duration"):
            raise ValueError(f"kind must be 'count' or 'duration', got {self.kind!r}")
        if any(v < 0 for v in self.entries.values()):
            raise ValueError("entries must be >= 0")

    def norm(self) -> float:
        return math.sqrt(sum(v * v for v in self.entries.values()))


def build_bv(trace: TraceWindow, owner: UserId, kind: str = "count") -> BehaviorVector:
    """Owner's location totals; no sessions yields the zero vector."""
    if kind not in ("count", "duration"):
        raise ValueError(f"kind must be 'count' or 'duration', got {kind!r}")
    try:
        uidx = trace.user_index(owner)
    except KeyError:
        return BehaviorVector(owner, kind, {})
    mask = trace.user_idx == uidx
    locs = trace.loc_idx[mask]
    if kind == "count":
        values = np.bincount(locs, minlength=len(trace.locations))
    else:
        values = np.bincount(locs, weights=trace.duration[mask], minlength=len(trace.locations))
    entries = {
        trace.locations[i]: float(values[i]) for i in np.flatnonzero(values > 0).tolist()
    }
    return BehaviorVector(owner, kind, entries)


def bv_similarity(x: BehaviorVector, y: BehaviorVector) -> float:
    """Cosine of the two vectors over the union of locations, in [0, 1].

    Zero when either vector is zero or the visited location sets are
    disjoint. Scale invariant.
    """
    if x.kind != y.kind:
        raise ValueError(f"kind mismatch: {x.kind} vs {y.kind}")
    nx, ny = x.norm(), y.norm()
    if nx == 0.0 or ny == 0.0:
        return 0.0
    small, large = (x.entries, y.entries) if len(x.entries) <= len(y.entries) else (y.entries, x.entries)
    dot = 0.0
    for loc, v in small.items():
        w = large.get(loc)
        if w is not None:
            dot += v * w
    sim = dot / (nx * ny)
    if sim < SIM_EPS:
        return 0.0
    return min(sim, 1.0)


# ---------------------------------------------------------------------------
# Behavior matrices and profiles


@dataclass(frozen=True)
class BehaviorMatrix:
    """Day-by-location fractions of one user's daily on-line time.

    Rows are days of the window; each row sums to 1, or to 0 on days the
    user was offline. Columns are the user's visited locations.
    """

    owner: UserId
    locations: tuple[LocationId, ...]
    cells: np.ndarray  # (days, len(locations)) float64

    def __post_init__(self):
        cells = np.ascontiguousarray(self.cells, dtype=np.float64)
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        if cells.ndim != 2 or cells.shape[1] != len(self.locations):
            raise ValueError("cells shape does not match locations")
        if cells.size:
            if cells.min() < 0:
                raise ValueError("cells must be >= 0")
            sums = cells.sum(axis=1)
            ok = (np.abs(sums - 1.0) <= 1e-9) | (sums == 0.0)
            if not ok.all():
                raise ValueError("each row must sum to 1 (on-line day) or 0 (offline day)")


def build_bm(trace: TraceWindow, owner: UserId, day_seconds: int = DAY_S, day_offset: int = 0) -> BehaviorMatrix:
    """Owner's daily time-fraction matrix over the trace window.

    Days are cut at trace.begin + day_offset + k * day_seconds; session
    time outside the window is ignored.
    """
    span = trace.end - trace.begin - day_offset
    n_days = max(0, math.ceil(span / day_seconds)) if span > 0 else 0
    try:
        uidx = trace.user_index(owner)
        mask = trace.user_idx == uidx
    except KeyError:
        mask = np.zeros(len(trace), dtype=bool)
    loc_ids = sorted({trace.locations[i] for i in np.unique(trace.loc_idx[mask]).tolist()})
    lmap = {l: i for i, l in enumerate(loc_ids)}
    cells = np.zeros((n_days, len(loc_ids)), dtype=np.float64)
    base = trace.begin + day_offset
    starts = trace.start[mask].tolist()
    durs = trace.duration[mask].tolist()
    locs = [trace.locations[i] for i in trace.loc_idx[mask].tolist()]
    for s, d, loc in zip(starts, durs, locs):
        lo = max(s, trace.begin)
        hi = min(s + d, trace.end)
        if hi <= lo:
            continue
        j = lmap[loc]
        d0 = max(0, (lo - base) // day_seconds)
        d1 = min(n_days - 1, (hi - 1 - base) // day_seconds)
        for day in range(int(d0), int(d1) + 1):
            a = max(lo, base + day * day_seconds)
            b = min(hi, base + (day + 1) * day_seconds)
            if b > a:
                cells[day, j] += b - a
    totals = cells.sum(axis=1, keepdims=True)
    np.divide(cells, totals, out=cells, where=totals > 0)
    return BehaviorMatrix(owner, tuple(loc_ids), cells)


@dataclass(frozen=True)
class BehavioralProfile:
    """Dominant behavior components of a BehaviorMatrix.

    vectors holds up to k orthonormal right-singular vectors (rows);
    weights are the matching singular values rescaled to unit Euclidean
    norm, sorted descending. captured_energy is the fraction of total
    squared singular value mass the retained components explain.
    """

    owner: UserId
    locations: tuple[LocationId, ...]
    vectors: np.ndarray  # (r, len(locations)) float64
    weights: np.ndarray  # (r,) float64
    captured_energy: float

    def __post_init__(self):
        vectors = np.ascontiguousarray(self.vectors, dtype=np.float64)
        weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        vectors.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "weights", weights)
        if vectors.ndim != 2 or vectors.shape[1] != len(self.locations):
            raise ValueError("vectors shape does not match locations")
        if len(weights) != vectors.shape[0]:
            raise ValueError("one weight per vector required")
        if len(weights):
            if weights.min() < 0:
                raise ValueError("weights must be >= 0")
            if np.any(np.diff(weights) > 0):
                raise ValueError("weights must be sorted descending")

    @property
    def is_empty(self) -> bool:
        return len(self.weights) == 0


def build_profile(m: BehaviorMatrix, k: int = 10) -> BehavioralProfile:
    """Top-min(k, rank) behavior components of m via SVD.

    An all-zero matrix yields an empty profile (similarity 0 against
    everything).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    cells = m.cells
    if cells.size == 0 or not np.any(cells):
        return BehavioralProfile(m.owner, m.locations, np.zeros((0, len(m.locations))), np.zeros(0), 0.0)
    _, svals, vt = np.linalg.svd(cells, full_matrices=False)
    tol = max(cells.shape) * np.finfo(np.float64).eps * svals[0]
    rank = int((svals > tol).sum())
    r = min(k, rank)
    kept = svals[:r]
    weights = kept / np.linalg.norm(kept)
    energy = float((kept**2).sum() / (svals**2).sum())
    return BehavioralProfile(m.owner, m.locations, vt[:r].copy(), weights, energy)


def bm_similarity(p: BehavioralProfile, q: BehavioralProfile) -> float:
    """Weighted absolute-cosine similarity of two profiles.

    Vectors are aligned by location id (missing columns read as zero), so
    profiles built over different trace slices compare directly. The score
    is symmetric, >= 0, and 1 for a profile against itself; cross terms can
    push it above 1 and values are reported unclipped.
    """
    if p.is_empty or q.is_empty:
        return 0.0
    common = sorted(set(p.locations) & set(q.locations))
    if not common:
        return 0.0
    pmap = {l: i for i, l in enumerate(p.locations)}
    qmap = {l: i for i, l in enumerate(q.locations)}
    pi = [pmap[l] for l in common]
    qi = [qmap[l] for l in common]
    dots = np.abs(p.vectors[:, pi] @ q.vectors[:, qi].T)
    sim = float(p.weights @ dots @ q.weights)
    return 0.0 if sim < SIM_EPS else sim


# ---------------------------------------------------------------------------
# Profile / vector serialization


def bv_to_json(v: BehaviorVector) -> str:
    return json.dumps(
        {"owner": v.owner, "kind": v.kind, "entries": {l: v.entries[l] for l in sorted(v.entries)}},
        sort_keys=True,
    )


def bv_from_json(text: str) -> BehaviorVector:
    d = json.loads(text)
    return BehaviorVector(d["owner"], d["kind"], d["entries"])


def profile_to_json(p: BehavioralProfile) -> str:
    return json.dumps(
        {
            "owner": p.owner,
            "k": len(p.weights),
            "locations": list(p.locations),
            "vectors": [[float(x) for x in row] for row in p.vectors],
            "weights": [float(w) for w in p.weights],
            "captured_energy": p.captured_energy,
        },
        sort_keys=True,
    )


def profile_from_json(text: str) -> BehavioralProfile:
    d = json.loads(text)
    n = len(d["locations"])
    return BehavioralProfile(
        d["owner"],
        tuple(d["locations"]),
        np.array(d["vectors"], dtype=np.float64).reshape(d["k"], n),
        np.array(d["weights"], dtype=np.float64),
        float(d["captured_energy"]),
    )


# ---------------------------------------------------------------------------
# Trust lists


@dataclass(frozen=True)
class TrustList:
    """Top share of one user's ranked encountered peers."""

    owner: UserId
    filter: str
    t_percent: float
    members: tuple[UserId, ...]
    scores: tuple[float, ...]

    def __post_init__(self):
        if self.filter not in FILTERS:
            raise ValueError(f"unknown filter {self.filter!r}")
        if not 0 <= self.t_percent <= 100:
            raise ValueError(f"t_percent must be in [0, 100], got {self.t_percent}")
        if len(self.members) != len(self.scores):
            raise ValueError("one score per member required")
        if any(self.scores[i] < self.scores[i + 1] for i in range(len(self.scores) - 1)):
            raise ValueError("scores must be non-increasing")

    def member_set(self) -> frozenset:
        return frozenset(self.members)


def trust_list(owner: UserId, ranked: Sequence[tuple[UserId, float]], t_percent: float, filter_tag: str) -> TrustList:
    """Cut the top ceil(t_percent% of peers) of a ranked (peer, score) list."""
    n = share_size(len(ranked), t_percent)
    top = list(ranked)[:n]
    return TrustList(
        owner,
        filter_tag,
        float(t_percent),
        tuple(p for p, _ in top),
        tuple(float(s) for _, s in top),
    )


def random_trust(owner: UserId, peers: Iterable[UserId], t_percent: float, seed: int) -> TrustList:
    """Uniform random trust list over the peer set, deterministic per seed.

    Internally the sorted peers get a seeded random permutation with
    descending positional scores, so lists at growing t_percent nest.
    """
    peers = sorted(set(peers))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(peers))
    n = len(peers)
    ranked = [(peers[j], (n - i) / n) for i, j in enumerate(order.tolist())]
    return trust_list(owner, ranked, t_percent, "RT")


def trust_lists(
    trace: TraceWindow,
    filter_name: str,
    t_percent: float,
    history: EncounterHistory | None = None,
    k: int = 10,
    seed: int = 0,
    owners: Iterable[UserId] | None = None,
    day_seconds: int = DAY_S,
) -> dict[UserId, TrustList]:
    """Trust lists for every owner under one filter at one trust percentage.

    history defaults to the trace's own encounter history. Candidate peers
    are always the owner's encountered peers. For RT, per-owner seeds are
    derived from seed so lists are reproducible user by user.
    """
    if filter_name not in FILTERS:
        raise ValueError(f"unknown filter {filter_name!r}")
    if history is None:
        history = build_history(extract_encounters(trace))
    owners = list(owners) if owners is not None else list(history.users)

    out: dict[UserId, TrustList] = {}
    if filter_name in ("FE", "DE"):
        scorer = score_fe if filter_name == "FE" else score_de
        for owner in owners:
            out[owner] = trust_list(owner, scorer(history, owner), t_percent, filter_name)
        return out
    if filter_name == "RT":
        for owner in owners:
            peers = [p for p, _, _ in history.peers(owner)]
            out[owner] = random_trust(owner, peers, t_percent, derive_seed(seed, owner))
        return out

    if filter_name in ("BV-C", "BV-D"):
        kind = "count" if filter_name == "BV-C" else "duration"
        cache: dict[UserId, BehaviorVector] = {}

        def sim(a: UserId, b: UserId) -> float:
            for u in (a, b):
                if u not in cache:
                    cache[u] = build_bv(trace, u, kind)
            return bv_similarity(cache[a], cache[b])

    else:  # BM
        pcache: dict[UserId, BehavioralProfile] = {}

        def sim(a: UserId, b: UserId) -> float:
            for u in (a, b):
                if u not in pcache:
                    pcache[u] = build_profile(build_bm(trace, u, day_seconds=day_seconds), k=k)
            return bm_similarity(pcache[a], pcache[b])

    for owner in owners:
        scored = [(p, sim(owner, p)) for p, _, _ in history.peers(owner)]
        scored.sort(key=lambda ps: (-ps[1], ps[0]))
        out[owner] = trust_list(owner, scored, t_percent, filter_name)
    return out


def ranked_member_indices(history: EncounterHistory, t_percent: float, key: str) -> dict[int, np.ndarray]:
    """Vectorized FE/DE trust membership in user-index space.

    Returns owner index -> sorted array of member indices; equals the
    members of trust_lists for the same filter. Used by the simulator on
    large histories.
    """
    if key not in ("count", "duration"):
        raise ValueError("key must be 'count' or 'duration'")
    src, dst, cnt, dur, _ = history._directed()
    score = cnt if key == "count" else dur
    order = np.lexsort((dst, -score, src))
    src_o, dst_o = src[order], dst[order]
    degrees = np.bincount(src_o, minlength=len(history.users))
    offsets = np.concatenate([[0], np.cumsum(degrees)])
    sizes = np.array([share_size(int(d), t_percent) for d in degrees.tolist()], dtype=np.int64)
    pos = np.arange(len(src_o)) - offsets[src_o]
    mask = pos < sizes[src_o]
    sel_src = src_o[mask]
    sel_dst = dst_o[mask]
    out: dict[int, np.ndarray] = {}
    bounds = np.searchsorted(sel_src, np.arange(len(history.users) + 1))
    for uidx in np.unique(sel_src).tolist():
        members = np.sort(sel_dst[bounds[uidx] : bounds[uidx + 1]]).astype(np.int32)
        out[uidx] = members
    return out
