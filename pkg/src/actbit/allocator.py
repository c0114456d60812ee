"""Per-channel bit allocation under an average-bit budget.

The production path is a greedy demotion: every channel starts at 16 bits
and a min-heap keyed by the error increase per bit saved picks the next
adjacent demotion (16->8->4->2->0) until the mean bit-width over the
designated channels meets the budget. ``brute_force_allocate`` solves tiny
instances exactly and serves as the reference.
"""

from __future__ import annotations

import heapq
import itertools
import math
import time
from dataclasses import dataclass
from typing import TYPE_CHECKING, Collection, Iterable, Mapping

import numpy as np

from .model import ChannelId

if TYPE_CHECKING:
    from .sensitivity import SensitivityTable

LADDER = (16, 8, 4, 2, 0)
NEXT_BIT = {16: 8, 8: 4, 4: 2, 2: 0}
# Column of each bit-width in a score matrix built by _score_matrix.
COLUMN = {0: 0, 2: 1, 4: 2, 8: 3, 16: 4}
COLUMN_BITS = np.array([0, 2, 4, 8, 16])
BRUTE_FORCE_LIMIT = 8


class InfeasibleBudget(ValueError):
    """The budget cannot be met under the pruning constraints."""


@dataclass(frozen=True)
class DemotionCandidate:
    channel: ChannelId
    from_bit: int
    to_bit: int
    rho: float

    def __post_init__(self):
        if NEXT_BIT.get(self.from_bit) != self.to_bit:
            raise ValueError(f"{self.from_bit}->{self.to_bit} is not an adjacent demotion")


@dataclass(frozen=True)
class BitAllocation:
    assignment: Mapping[ChannelId, int]
    designated: frozenset[ChannelId]
    budget: float | None = None
    demotions: tuple[DemotionCandidate, ...] = ()

    def __post_init__(self):
        designated = frozenset(ChannelId(*ch) for ch in self.designated)
        assignment = {ChannelId(*ch): int(b) for ch, b in self.assignment.items()}
        if set(assignment) != designated:
            missing = designated - set(assignment)
            extra = set(assignment) - designated
            raise ValueError(f"assignment mismatch: {len(missing)} unassigned, {len(extra)} not designated")
        bad = {b for b in assignment.values() if b not in COLUMN}
        if bad:
            raise ValueError(f"invalid bit-widths {sorted(bad)}")
        object.__setattr__(self, "designated", designated)
        object.__setattr__(self, "assignment", assignment)

    def histogram(self) -> dict[int, int]:
        counts = {b: 0 for b in sorted(COLUMN)}
        for b in self.assignment.values():
            counts[b] += 1
        return counts

    def pruned_fraction(self) -> float:
        return self.histogram()[0] / len(self.designated)


def rho(s_lo: float, s_hi: float, b_hi: int, b_lo: int) -> float:
    """Error increase per bit saved when demoting from ``b_hi`` to ``b_lo``."""
    if b_hi <= b_lo:
        raise ValueError(f"demotion must lower the bit-width ({b_hi} -> {b_lo})")
    return (s_lo - s_hi) / (b_hi - b_lo)


def average_bits(alloc: BitAllocation) -> float:
    if not alloc.designated:
        raise ValueError("no designated channels")
    return math.fsum(alloc.assignment.values()) / len(alloc.designated)


def _within(total_bits: float, n: int, budget: float) -> bool:
    return total_bits <= budget * n


def _resolve(table: SensitivityTable, designated: Iterable[ChannelId] | None) -> list[ChannelId]:
    chans = sorted(ChannelId(*c) for c in (table.channels if designated is None else designated))
    if not chans:
        raise ValueError("no designated channels")
    return chans


def _score_matrix(table: SensitivityTable, chans: list[ChannelId]) -> np.ndarray:
    """(n, 5) scores for bits 0, 2, 4, 8, 16 (the last column is zero)."""
    s = np.zeros((len(chans), 5))
    s[:, :4] = table.score_matrix(chans)
    return s


def objective(table: SensitivityTable, alloc: BitAllocation) -> float:
    return math.fsum(table.score(ch, b) for ch, b in alloc.assignment.items())


@dataclass(frozen=True)
class PruneGuard:
    """Gate on 2->0 demotions.

    A channel may be pruned only if its pruning error ``s0`` is at most
    ``tau_abs`` and its extra error over 2 bits ``s0 - s2`` is at most
    ``tau_rel`` times the median of that gap over the designated channels.
    At most ``cap`` of the designated channels may be pruned in total.
    """

    tau_abs: float = math.inf
    tau_rel: float | None = None
    cap: float = 1.0
    median_gap: float = 0.0

    def allowed(self, s0: np.ndarray, s2: np.ndarray) -> np.ndarray:
        ok = np.asarray(s0) <= self.tau_abs
        if self.tau_rel is not None:
            ok &= (np.asarray(s0) - np.asarray(s2)) <= self.tau_rel * self.median_gap
        return ok

    def max_pruned(self, n: int) -> int:
        return int(math.floor(self.cap * n + 1e-9))

    @classmethod
    def permissive(cls) -> PruneGuard:
        return cls()

    @classmethod
    def defaults(
        cls,
        table: SensitivityTable,
        designated: Iterable[ChannelId] | None = None,
        tau_abs: float | None = None,
        tau_rel: float | None = 1.0,
        cap: float = 0.10,
    ) -> PruneGuard:
        """Thresholds derived from the table; ``tau_abs`` defaults to 1e-4 x mean 2-bit score."""
        if not 0 <= cap <= 1:
            raise ValueError(f"prune cap must lie in [0, 1], got {cap}")
        s = _score_matrix(table, _resolve(table, designated))
        if tau_abs is None:
            tau_abs = 1e-4 * float(np.mean(s[:, COLUMN[2]]))
        median_gap = float(np.median(s[:, COLUMN[0]] - s[:, COLUMN[2]]))
        return cls(tau_abs, tau_rel, cap, median_gap)


def prune_guard(
    channel: ChannelId,
    table: SensitivityTable,
    thresholds: tuple[float, float | None],
    designated: Iterable[ChannelId] | None = None,
) -> bool:
    """Whether the dual-threshold rule lets ``channel`` be pruned (cap not considered)."""
    tau_abs, tau_rel = thresholds
    guard = PruneGuard.defaults(table, designated, tau_abs=tau_abs, tau_rel=tau_rel, cap=1.0)
    return bool(guard.allowed(table.score(channel, 0), table.score(channel, 2)))


def greedy_allocate(
    table: SensitivityTable,
    designated: Collection[ChannelId] | None = None,
    budget: float = 8.0,
    guard: PruneGuard | None = None,
) -> BitAllocation:
    """Greedy demotion from all-16 until the average bit-width is within ``budget``.

    Candidates are popped by smallest ``rho``; ties go to the lower
    (layer, channel). Stale heap entries (channel already moved on) are
    dropped. A 2->0 demotion refused by ``guard`` leaves the channel at 2 bits
    for good. Raises InfeasibleBudget if the heap runs dry first.
    """
    if not 0 < budget <= 16:
        raise ValueError(f"budget must lie in (0, 16], got {budget}")
    guard = guard or PruneGuard.permissive()
    chans = _resolve(table, designated)
    n = len(chans)
    s = _score_matrix(table, chans)
    prunable = guard.allowed(s[:, COLUMN[0]], s[:, COLUMN[2]])
    max_pruned = guard.max_pruned(n)

    bits = [16] * n
    total = 16 * n
    pruned = 0
    history: list[DemotionCandidate] = []

    def key(i: int, hi: int) -> float:
        lo = NEXT_BIT[hi]
        return rho(s[i, COLUMN[lo]], s[i, COLUMN[hi]], hi, lo)

    heap = [(key(i, 16), i, 16) for i in range(n)]
    heapq.heapify(heap)
    while not _within(total, n, budget) and heap:
        r, i, hi = heapq.heappop(heap)
        if bits[i] != hi:
            continue
        lo = NEXT_BIT[hi]
        if lo == 0:
            if not prunable[i] or pruned >= max_pruned:
                continue
            pruned += 1
        bits[i] = lo
        total -= hi - lo
        history.append(DemotionCandidate(chans[i], hi, lo, r))
        if lo in NEXT_BIT:
            heapq.heappush(heap, (key(i, lo), i, lo))
    if not _within(total, n, budget):
        raise InfeasibleBudget(
            f"budget {budget} unreachable: average stalls at {total / n:.4f} bits "
            f"({pruned} pruned, cap {max_pruned})"
        )
    return BitAllocation(dict(zip(chans, bits)), frozenset(chans), budget, tuple(history))


def brute_force_allocate(
    table: SensitivityTable, designated: Collection[ChannelId] | None = None, budget: float = 8.0
) -> BitAllocation:
    """Exact minimum of the summed score over all 5^n assignments meeting the budget.

    Ties prefer the larger total bit count, then the lexicographically
    smallest bit tuple in (layer, channel) order.
    """
    chans = _resolve(table, designated)
    n = len(chans)
    if n > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force is limited to {BRUTE_FORCE_LIMIT} channels, got {n}")
    s = _score_matrix(table, chans)
    combos = np.array(list(itertools.product(range(5), repeat=n)), dtype=np.int64)
    bits = COLUMN_BITS[combos]
    totals = bits.sum(axis=1)
    feasible = totals <= budget * n
    cost = s[np.arange(n), combos].sum(axis=1)
    idx = np.flatnonzero(feasible)
    # lexsort: last key is primary.
    keys = [bits[idx, j] for j in range(n - 1, -1, -1)] + [-totals[idx], cost[idx]]
    best = idx[np.lexsort(keys)[0]]
    assignment = {ch: int(b) for ch, b in zip(chans, bits[best])}
    return BitAllocation(assignment, frozenset(chans), budget)


def synthetic_table(n_channels: int, seed: int = 0) -> SensitivityTable:
    """Random table with scores non-increasing in bit-width."""
    from .sensitivity import SensitivityTable

    rng = np.random.default_rng(seed)
    scores = -np.sort(-rng.exponential(size=(n_channels, 4)), axis=1)
    chans = [ChannelId(0, c) for c in range(n_channels)]
    return SensitivityTable(chans, scores)


def allocation_complexity_probe(n_channels: int, budget: float = 8.0, seed: int = 0) -> float:
    """Wall time (s) of one greedy allocation over a synthetic table."""
    table = synthetic_table(n_channels, seed)
    start = time.perf_counter()
    greedy_allocate(table, budget=budget)
    return time.perf_counter() - start
