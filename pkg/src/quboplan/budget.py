"""Lifecycle accounting against a solve-time budget.

Each iteration that touches the solver is recorded as three components:
solver compute (T_Q), transport (T_C), and client-side refinement (T_R).
The budget constrains their running sum, not wall time of the host
process: a new iteration is admitted only while the recorded total plus
an exponential moving average of past iteration durations stays within
the budget.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

__all__ = ["LifecycleRecord", "BudgetClock"]

#: Assumed duration of the first iteration before any history exists (ms).
FIRST_ITERATION_ESTIMATE_MS = 5.0

# Deterministic stand-ins for client-side work when modeled timing is on.
MODELED_PREP_MS = 0.5
MODELED_REFINE_MS = 0.5


@dataclass(frozen=True)
class LifecycleRecord:
    label: str
    solver_ms: float
    transport_ms: float
    refine_ms: float

    @property
    def total_ms(self) -> float:
        return self.solver_ms + self.transport_ms + self.refine_ms


class BudgetClock:
    """Append-only record of lifecycle components under a budget tau."""

    def __init__(self, tau_ms: float, ema_alpha: float = 0.5,
                 first_estimate_ms: float = FIRST_ITERATION_ESTIMATE_MS):
        if tau_ms <= 0:
            raise ValueError("budget must be positive")
        if not (0.0 < ema_alpha <= 1.0):
            raise ValueError("ema_alpha must be in (0, 1]")
        self.tau_ms = float(tau_ms)
        self.started_at = time.time()
        self.records: list[LifecycleRecord] = []
        self._ema_alpha = ema_alpha
        self._first_estimate = first_estimate_ms
        self._ema: float | None = None

    def elapsed_ms(self) -> float:
        return sum(r.total_ms for r in self.records)

    def time_quantum_ms(self) -> float:
        """Total lifecycle time: the sum of every recorded component."""
        return self.elapsed_ms()

    def record(self, label: str, solver_ms: float, transport_ms: float, refine_ms: float,
               is_iteration: bool = True) -> LifecycleRecord:
        rec = LifecycleRecord(label=label, solver_ms=float(solver_ms),
                              transport_ms=float(transport_ms), refine_ms=float(refine_ms))
        self.records.append(rec)
        if is_iteration:
            if self._ema is None:
                self._ema = rec.total_ms
            else:
                self._ema = self._ema_alpha * rec.total_ms + (1 - self._ema_alpha) * self._ema
        return rec

    def estimate_next_ms(self) -> float:
        return self._first_estimate if self._ema is None else self._ema

    def admits(self) -> bool:
        """May another iteration start without overrunning the budget?"""
        return self.elapsed_ms() + self.estimate_next_ms() <= self.tau_ms

    def snapshot(self) -> tuple[LifecycleRecord, ...]:
        return tuple(self.records)
