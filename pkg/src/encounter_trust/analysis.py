"""Statistical studies over trust lists: stability, cross-filter correlation,
and score distributions.

Histories grow forward from an anchor: horizon w covers [anchor,
anchor + w weeks). Overlap between two lists is the intersection size over
the smaller list size, so comparisons across growing populations stay in
[0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .encounters import EncounterHistory, build_history, extract_encounters
from .filters import FILTERS, TrustList, trust_lists
from .trace import WEEK_S, TraceWindow, UserId, slice_trace
from .util import derive_seed


def list_overlap(l1: TrustList, l2: TrustList) -> float:
    """|members1 ∩ members2| / min(|members1|, |members2|).

    Both lists empty reads as full agreement (1.0); exactly one empty as
    none (0.0). The two lists must belong to the same owner.
    """
    if l1.owner != l2.owner:
        raise ValueError(f"owner mismatch: {l1.owner!r} vs {l2.owner!r}")
    n1, n2 = len(l1.members), len(l2.members)
    if n1 == 0 and n2 == 0:
        return 1.0
    if n1 == 0 or n2 == 0:
        return 0.0
    inter = len(l1.member_set() & l2.member_set())
    return inter / min(n1, n2)


@dataclass(frozen=True)
class HistorySchedule:
    """Growing history windows: [anchor, anchor + w weeks) per horizon w."""

    anchor: int
    horizons_weeks: tuple[float, ...]

    def __post_init__(self):
        hs = self.horizons_weeks
        if not hs:
            raise ValueError("at least one horizon required")
        if any(h <= 0 for h in hs):
            raise ValueError("horizons must be positive")
        if any(hs[i] >= hs[i + 1] for i in range(len(hs) - 1)):
            raise ValueError("horizons must be strictly increasing")

    def windows(self) -> list[tuple[int, int]]:
        return [(self.anchor, self.anchor + int(round(w * WEEK_S))) for w in self.horizons_weeks]

    def labels(self) -> tuple[str, ...]:
        return tuple(f"{w:g}w" for w in self.horizons_weeks)


@dataclass(frozen=True)
class OverlapMatrix:
    """Labelled square matrix of population-averaged list overlaps."""

    labels: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if values.shape != (len(self.labels), len(self.labels)):
            raise ValueError("matrix shape does not match labels")

    def rows(self) -> list[tuple[str, str, float]]:
        """(row_label, col_label, value) triples in row-major order."""
        out = []
        for i, ri in enumerate(self.labels):
            for j, cj in enumerate(self.labels):
                out.append((ri, cj, float(self.values[i, j])))
        return out


def _check_schedule(trace: TraceWindow, schedule: HistorySchedule) -> list[tuple[int, int]]:
    windows = schedule.windows()
    if schedule.anchor < trace.begin:
        raise ValueError(f"anchor {schedule.anchor} precedes trace begin {trace.begin}")
    last_end = windows[-1][1]
    if last_end > trace.end:
        raise ValueError(f"horizon end {last_end} exceeds trace end {trace.end}")
    return windows


def _horizon_contexts(trace: TraceWindow, windows: Sequence[tuple[int, int]]):
    """Per horizon: (sliced trace, its history, users with >= 1 peer)."""
    out = []
    for b, e in windows:
        sliced = slice_trace(trace, b, e)
        history = build_history(extract_encounters(sliced))
        counts = np.zeros(len(history.users), dtype=np.int64)
        for side in (history.pair_a, history.pair_b):
            np.add.at(counts, side, 1)
        peers = {u for u, c in zip(history.users, counts.tolist()) if c}
        out.append((sliced, history, peers))
    return out


def _lists_per_horizon(
    contexts,
    filter_name: str,
    t_percent: float,
    k: int,
    rt_seed: int,
) -> list[dict[UserId, TrustList]]:
    """Per-horizon trust lists; RT draws an independent derived seed per horizon."""
    lists = []
    for i, (sliced, history, _) in enumerate(contexts):
        seed = derive_seed(rt_seed, "horizon", i)
        lists.append(trust_lists(sliced, filter_name, t_percent, history=history, k=k, seed=seed))
    return lists


def stability_study(
    trace: TraceWindow,
    filter_name: str,
    t_percent: float,
    schedule: HistorySchedule,
    k: int = 10,
    rt_seed: int = 0,
) -> OverlapMatrix:
    """Average trust-list overlap between every pair of history horizons.

    For a horizon pair only users with at least one encounter in both
    windows contribute; each qualifying user weighs equally.
    """
    windows = _check_schedule(trace, schedule)
    contexts = _horizon_contexts(trace, windows)
    lists = _lists_per_horizon(contexts, filter_name, t_percent, k, rt_seed)
    peers = [ctx[2] for ctx in contexts]
    n = len(windows)
    values = np.ones((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i, n):
            qualifying = sorted(peers[i] & peers[j])
            if qualifying:
                mean = float(np.mean([list_overlap(lists[i][u], lists[j][u]) for u in qualifying]))
            else:
                mean = 1.0 if i == j else 0.0
            values[i, j] = values[j, i] = mean
    return OverlapMatrix(schedule.labels(), values)


def filter_correlation(
    trace: TraceWindow,
    filters: Sequence[str],
    t_percent: float,
    schedule: HistorySchedule,
    k: int = 10,
    rt_seed: int = 0,
) -> dict[tuple[str, str], np.ndarray]:
    """Per ordered filter pair, mean overlap of their lists at each horizon."""
    for f in filters:
        if f not in FILTERS:
            raise ValueError(f"unknown filter {f!r}")
    windows = _check_schedule(trace, schedule)
    contexts = _horizon_contexts(trace, windows)
    per_filter = {f: _lists_per_horizon(contexts, f, t_percent, k, rt_seed) for f in filters}
    out: dict[tuple[str, str], np.ndarray] = {}
    for f1 in filters:
        for f2 in filters:
            curve = np.empty(len(windows), dtype=np.float64)
            for h, (_, _, peers) in enumerate(contexts):
                qualifying = sorted(peers)
                if qualifying:
                    curve[h] = float(
                        np.mean([list_overlap(per_filter[f1][h][u], per_filter[f2][h][u]) for u in qualifying])
                    )
                else:
                    curve[h] = 1.0 if f1 == f2 else 0.0
            out[(f1, f2)] = curve
    return out


def score_distribution(
    trace: TraceWindow,
    filter_name: str,
    history: EncounterHistory | None = None,
    k: int = 10,
) -> np.ndarray:
    """Score series behind the per-filter distribution studies.

    FE and DE give per-user totals (encounter count, total encounter
    seconds) sorted descending. BV and BM give the similarity score of
    every encountered pair, one value per unordered pair.
    """
    if filter_name == "RT":
        raise ValueError("RT has no score distribution")
    if filter_name not in FILTERS:
        raise ValueError(f"unknown filter {filter_name!r}")
    if history is None:
        history = build_history(extract_encounters(trace))
    if filter_name in ("FE", "DE"):
        nu = len(history.users)
        totals = np.zeros(nu, dtype=np.int64)
        values = history.count if filter_name == "FE" else history.duration
        for side in (history.pair_a, history.pair_b):
            np.add.at(totals, side, values)
        return np.sort(totals)[::-1].astype(np.float64)

    if filter_name in ("BV-C", "BV-D"):
        from .filters import build_bv, bv_similarity

        kind = "count" if filter_name == "BV-C" else "duration"
        cache = {}

        def sim(a, b):
            for u in (a, b):
                if u not in cache:
                    cache[u] = build_bv(trace, u, kind)
            return bv_similarity(cache[a], cache[b])

    else:  # BM
        from .filters import build_bm, build_profile, bm_similarity

        cache = {}

        def sim(a, b):
            for u in (a, b):
                if u not in cache:
                    cache[u] = build_profile(build_bm(trace, u), k=k)
            return bm_similarity(cache[a], cache[b])

    scores = np.empty(history.n_pairs, dtype=np.float64)
    for i, (a, b, _, _) in enumerate(history.pairs()):
        scores[i] = sim(a, b)
    return scores


def histogram(values: Iterable[float], bin_width: float, lo: float = 0.0, hi: float | None = None):
    """(edges, counts) with fixed-width bins; hi defaults to cover the data."""
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    values = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=np.float64)
    if hi is None:
        top = float(values.max()) if values.size else lo + bin_width
        hi = lo + bin_width * max(1, int(np.ceil((top - lo) / bin_width + 1e-12)))
    edges = np.arange(lo, hi + bin_width / 2, bin_width)
    counts, _ = np.histogram(values, bins=edges)
    return edges, counts
