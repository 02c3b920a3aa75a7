"""Annealing-style samplers standing in for quantum hardware.

`sa_sample` is a Metropolis single-bit-flip annealer with a geometric
cooling schedule and fully deterministic per-read seeding; it plays the
role the physical annealer would. `exhaustive_ground_states` enumerates
every assignment and is the exactness oracle for small problems.

Timing can be taken from the wall clock (default) or from a deterministic
cost model (`SamplerParams.modeled_timing`), which orchestrated runs use
so that repeated solves produce byte-identical telemetry.
"""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np
from numba import njit

from .errors import SamplerError
from .qubo import Assignment, Qubo, energy, to_dense

__all__ = [
    "SamplerTiming",
    "SamplerParams",
    "SampleRow",
    "SampleSet",
    "sa_sample",
    "exhaustive_ground_states",
    "empirical_distribution",
]

EXHAUSTIVE_LIMIT = 20

# Deterministic timing model: fixed programming overhead plus one
# microsecond-equivalent per sweep per read.
MODELED_PROGRAMMING_MS = 0.5
MODELED_MS_PER_READ_SWEEP = 1e-3


@dataclass(frozen=True)
class SamplerTiming:
    """Lifecycle breakdown of one sampling call, in milliseconds."""

    ingress_ms: float
    solve_ms: float
    egress_ms: float
    end_to_end_ms: float
    qpu_programming_ms: float
    qpu_sampling_ms: float
    qpu_access_ms: float

    def __post_init__(self):
        fields = (
            self.ingress_ms,
            self.solve_ms,
            self.egress_ms,
            self.end_to_end_ms,
            self.qpu_programming_ms,
            self.qpu_sampling_ms,
            self.qpu_access_ms,
        )
        if any(v < 0 for v in fields):
            raise ValueError("timing components must be non-negative")
        expected = self.ingress_ms + self.solve_ms + self.egress_ms
        if abs(self.end_to_end_ms - expected) > 1e-6:
            raise ValueError(
                f"end-to-end {self.end_to_end_ms} != ingress+solve+egress {expected}"
            )

    @staticmethod
    def local(solve_ms: float, programming_ms: float = 0.0, sampling_ms: float | None = None) -> "SamplerTiming":
        """Timing for an in-process solve: no transport legs."""
        sampling = solve_ms if sampling_ms is None else sampling_ms
        return SamplerTiming(
            ingress_ms=0.0,
            solve_ms=solve_ms,
            egress_ms=0.0,
            end_to_end_ms=solve_ms,
            qpu_programming_ms=programming_ms,
            qpu_sampling_ms=sampling,
            qpu_access_ms=programming_ms + sampling,
        )


@dataclass(frozen=True)
class SamplerParams:
    """Annealing knobs. `t_start=None` resolves to the largest coefficient."""

    num_reads: int = 16
    sweeps: int = 300
    t_start: float | None = None
    t_end: float = 1e-2
    seed: int = 0
    modeled_timing: bool = False

    def __post_init__(self):
        if self.num_reads < 1:
            raise ValueError("num_reads must be >= 1")
        if self.sweeps < 1:
            raise ValueError("sweeps must be >= 1")
        if self.t_end <= 0:
            raise ValueError("t_end must be positive")
        if self.t_start is not None and self.t_start < self.t_end:
            raise ValueError("t_start must be >= t_end")

    def with_seed(self, seed: int) -> "SamplerParams":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class SampleRow:
    assignment: Assignment
    energy: float
    occurrences: int


@dataclass(frozen=True)
class SampleSet:
    """Sampler output: distinct assignments with exact energies, best first."""

    rows: tuple[SampleRow, ...]
    timing: SamplerTiming

    @staticmethod
    def from_assignments(qubo: Qubo, assignments: Iterable[Assignment], timing: SamplerTiming) -> "SampleSet":
        counts = Counter(tuple(int(b) for b in a) for a in assignments)
        rows = [SampleRow(assignment=a, energy=energy(qubo, a), occurrences=c) for a, c in counts.items()]
        rows.sort(key=lambda r: (r.energy, r.assignment))
        return SampleSet(rows=tuple(rows), timing=timing)

    def best(self) -> SampleRow:
        if not self.rows:
            raise SamplerError("sample set is empty")
        return self.rows[0]

    def total_occurrences(self) -> int:
        return sum(r.occurrences for r in self.rows)

    def canonical(self) -> str:
        """Deterministic serialization of the rows; timing is excluded."""
        lines = [
            f"{''.join(str(b) for b in r.assignment)} {r.energy!r} {r.occurrences}" for r in self.rows
        ]
        return "\n".join(lines)


@njit(cache=True)
def _sa_read(h, mat, temps, seed):  # pragma: no cover - exercised via sa_sample
    np.random.seed(seed)
    n = h.shape[0]
    state = np.empty(n, dtype=np.int8)
    for i in range(n):
        state[i] = np.random.randint(0, 2)
    # local field f[i] = h[i] + sum_j mat[i, j] * state[j]
    f = h.copy()
    for j in range(n):
        if state[j] == 1:
            for i in range(n):
                f[i] += mat[i, j]
    e = 0.0
    for i in range(n):
        if state[i] == 1:
            e += h[i]
            for j in range(i + 1, n):
                if state[j] == 1:
                    e += mat[i, j]
    best_state = state.copy()
    best_e = e
    for k in range(temps.shape[0]):
        t = temps[k]
        for i in range(n):
            delta = (1.0 - 2.0 * state[i]) * f[i]
            accept = delta <= 0.0
            if not accept:
                accept = np.random.random() < np.exp(-delta / t)
            if accept:
                sign = 1.0 - 2.0 * state[i]
                state[i] = 1 - state[i]
                e += delta
                for j in range(n):
                    f[j] += sign * mat[j, i]
                if e < best_e:
                    best_e = e
                    for j in range(n):
                        best_state[j] = state[j]
    return best_state


def _schedule(qubo: Qubo, params: SamplerParams) -> np.ndarray:
    t_end = params.t_end
    t_start = params.t_start
    if t_start is None:
        t_start = max(qubo.max_abs_coefficient(), 1.0, t_end)
    ratio = t_end / t_start
    k = np.arange(params.sweeps, dtype=np.float64)
    return t_start * ratio ** (k / params.sweeps)


def sa_sample(qubo: Qubo, params: SamplerParams) -> SampleSet:
    """Simulated annealing: `num_reads` independent restarts of `sweeps` passes.

    Read r is seeded with `seed + r`, so results are identical no matter
    how reads are scheduled. Each read contributes the best state it saw;
    identical assignments are merged with their occurrence counts.
    """
    started = time.perf_counter()
    h, mat, _ = to_dense(qubo)
    temps = _schedule(qubo, params)
    assignments = []
    for r in range(params.num_reads):
        state = _sa_read(h, mat, temps, (params.seed + r) % 2**32)
        assignments.append(tuple(int(b) for b in state))
    if params.modeled_timing:
        sampling = params.num_reads * params.sweeps * MODELED_MS_PER_READ_SWEEP
        timing = SamplerTiming.local(
            solve_ms=MODELED_PROGRAMMING_MS + sampling,
            programming_ms=MODELED_PROGRAMMING_MS,
            sampling_ms=sampling,
        )
    else:
        timing = SamplerTiming.local(solve_ms=(time.perf_counter() - started) * 1000.0)
    return SampleSet.from_assignments(qubo, assignments, timing)


def exhaustive_ground_states(qubo: Qubo, limit: int = EXHAUSTIVE_LIMIT) -> SampleSet:
    """Every minimum-energy assignment, by full enumeration."""
    if qubo.n > limit:
        raise SamplerError(f"exhaustive enumeration refused for n={qubo.n} > {limit}")
    started = time.perf_counter()
    n = qubo.n
    codes = np.arange(1 << n, dtype=np.uint32)
    bits = ((codes[:, None] >> np.arange(n, dtype=np.uint32)) & 1).astype(np.float64)
    h, _, offset = to_dense(qubo)
    energies = bits @ h + offset
    for (i, j), w in qubo.quadratic.items():
        energies += w * bits[:, i] * bits[:, j]
    floor = float(energies.min())
    tol = 1e-9 * (1.0 + abs(floor))
    candidates = np.flatnonzero(energies <= floor + tol)
    exact = [(energy(qubo, tuple(int(b) for b in bits[c])), tuple(int(b) for b in bits[c])) for c in candidates]
    true_floor = min(e for e, _ in exact)
    winners = sorted(a for e, a in exact if e == true_floor)
    rows = tuple(SampleRow(assignment=a, energy=true_floor, occurrences=1) for a in winners)
    timing = SamplerTiming.local(solve_ms=(time.perf_counter() - started) * 1000.0)
    return SampleSet(rows=rows, timing=timing)


def empirical_distribution(sample_set: SampleSet) -> dict[Assignment, float]:
    """Occurrence-weighted probabilities over the sampled assignments."""
    if not sample_set.rows:
        raise SamplerError("cannot build a distribution from an empty sample set")
    total = sample_set.total_occurrences()
    return {r.assignment: r.occurrences / total for r in sample_set.rows}
