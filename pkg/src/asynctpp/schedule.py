"""Matrix-valued noise schedules for asynchronous flow matching.

A schedule assigns every sequence position i a data-retention coefficient
a_i(s) over flow time s in [0, 1], forming the diagonal of a matrix A(s)
(off-diagonal entries are zero, so the Moore-Penrose pseudo-inverse is the
entrywise reciprocal on nonzero entries). Three families are provided:

* ``async``    - position i transitions from data to noise over the window
                 ((N-i)/(2N-1), (2N-i)/(2N-1)); windows overlap so that
                 later events are always at least as noisy as earlier ones.
* ``disjoint`` - one position transitions at a time, window ((N-i)/N, (N-i+1)/N).
* ``sync``     - every position follows 1-s (the straight-line special case).

Window endpoints and breakpoints are kept as exact rationals so that ODE
grids can be aligned with the kinks of a(s), where the (weak) derivative
follows the left-hand-limit convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

import numpy as np

__all__ = [
    "EventWindow",
    "NoiseSchedule",
    "make_schedule",
    "SCHEDULE_KINDS",
    "interpolate",
    "inverse_flow",
    "ScheduleReport",
    "validate_schedule",
    "field_equivalence_check",
    "invertible_limit_check",
]

SCHEDULE_KINDS = ("async", "disjoint", "sync")


@dataclass(frozen=True)
class EventWindow:
    """Flow-time interval over which one position transitions data -> noise."""

    s_start: Fraction
    s_end: Fraction

    @property
    def width(self) -> Fraction:
        return self.s_end - self.s_start


class NoiseSchedule:
    """Diagonal noise schedule of a given kind for sequences of length N."""

    def __init__(self, kind: str, n: int):
        if kind not in SCHEDULE_KINDS + ("broken",):
            raise ValueError(f"unknown schedule kind {kind!r}")
        if n < 1:
            raise ValueError("N must be positive")
        self.kind = kind
        self.n = n
        self._windows = [self._window(i) for i in range(1, n + 1)]
        bps: set[Fraction] = {Fraction(0), Fraction(1)}
        for w in self._windows:
            bps.add(w.s_start)
            bps.add(w.s_end)
        self.breakpoints: list[Fraction] = sorted(b for b in bps if 0 <= b <= 1)
        # cache float window bounds for the hot evaluation paths
        self._starts = np.array([float(w.s_start) for w in self._windows])
        self._ends = np.array([float(w.s_end) for w in self._windows])
        self._widths = np.array([float(w.s_end - w.s_start) for w in self._windows])
        self._slopes = -1.0 / self._widths

    def _window(self, i: int) -> EventWindow:
        n = self.n
        if self.kind == "async":
            return EventWindow(Fraction(n - i, 2 * n - 1), Fraction(2 * n - i, 2 * n - 1))
        if self.kind == "disjoint":
            return EventWindow(Fraction(n - i, n), Fraction(n - i + 1, n))
        # sync and the deliberately-invalid "broken" test schedule span everything
        return EventWindow(Fraction(0), Fraction(1))

    def window(self, i: int) -> EventWindow:
        """Transition window of position i (1-based)."""
        if not 1 <= i <= self.n:
            raise ValueError(f"position {i} out of range [1, {self.n}]")
        return self._windows[i - 1]

    # -- evaluation -----------------------------------------------------

    def a_diag(self, s: float) -> np.ndarray:
        """Diagonal of A(s) as float64, length N."""
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"flow time {s} outside [0, 1]")
        if self.kind == "broken":
            return np.full(self.n, float(s))
        return np.clip((self._ends - s) / self._widths, 0.0, 1.0)

    def a_diag_exact(self, s: Fraction) -> list[Fraction]:
        """Diagonal of A(s) in exact rational arithmetic."""
        s = Fraction(s)
        if not 0 <= s <= 1:
            raise ValueError(f"flow time {s} outside [0, 1]")
        if self.kind == "broken":
            return [s for _ in range(self.n)]
        out = []
        for w in self._windows:
            v = (w.s_end - s) / w.width
            out.append(min(max(v, Fraction(0)), Fraction(1)))
        return out

    def a_prime_diag(self, s: float) -> np.ndarray:
        """Weak derivative of the diagonal, left-hand convention at kinks.

        At s = 0 the left limit does not exist, so the right-hand value is
        returned there.
        """
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"flow time {s} outside [0, 1]")
        if self.kind == "broken":
            return np.ones(self.n)
        if s == 0.0:
            active = self._starts == 0.0
        else:
            active = (self._starts < s) & (s <= self._ends)
        return np.where(active, self._slopes, 0.0)

    def slope_bound(self) -> float:
        """Lipschitz constant of the diagonal entries."""
        return float(np.max(np.abs(self._slopes))) if self.kind != "broken" else 1.0

    def __repr__(self) -> str:
        return f"NoiseSchedule(kind={self.kind!r}, n={self.n})"


def make_schedule(kind: str, n: int) -> NoiseSchedule:
    return NoiseSchedule(kind, n)


# ---------------------------------------------------------------------------
# Interpolation and its (pseudo-)inverse
# ---------------------------------------------------------------------------

def interpolate(x0: np.ndarray, eps: np.ndarray, schedule: NoiseSchedule,
                s: float) -> np.ndarray:
    """Row-wise convex combination a_i * x0_i + (1 - a_i) * eps_i."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape or x0.shape[-2] != schedule.n:
        raise ValueError(
            f"shapes {x0.shape} / {eps.shape} incompatible with N={schedule.n}")
    a = schedule.a_diag(s).astype(x0.dtype)[:, None]
    return a * x0 + (1.0 - a) * eps


def inverse_flow(x_s: np.ndarray, eps: np.ndarray, schedule: NoiseSchedule,
                 s: float) -> np.ndarray:
    """Pseudo-inverse of the interpolation at flow time s.

    Rows with a_i > 0 are recovered as (x_s - (1 - a_i) eps) / a_i; rows in
    the null space (a_i = 0) are replaced by the noise, matching the
    Moore-Penrose pseudo-inverse of a diagonal matrix.
    """
    x_s = np.asarray(x_s)
    eps = np.asarray(eps)
    if x_s.shape != eps.shape or x_s.shape[-2] != schedule.n:
        raise ValueError(
            f"shapes {x_s.shape} / {eps.shape} incompatible with N={schedule.n}")
    a = schedule.a_diag(s).astype(x_s.dtype)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        rec = (x_s - (1.0 - a) * eps) / a
    return np.where(a > 0, rec, eps)


# ---------------------------------------------------------------------------
# Executable checks
# ---------------------------------------------------------------------------

@dataclass
class Violation:
    check: str
    position: int | None
    s: float

    def __str__(self) -> str:
        where = f"i={self.position}, " if self.position is not None else ""
        return f"{self.check} ({where}s={self.s:.6g})"


@dataclass
class ScheduleReport:
    violations: list[Violation]

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_schedule(schedule: NoiseSchedule, grid_size: int = 1001) -> ScheduleReport:
    """Check boundary values, range, monotonicity and continuity on a grid."""
    if grid_size < 2:
        raise ValueError("grid_size must be at least 2")
    violations: list[Violation] = []

    for i, v in enumerate(schedule.a_diag_exact(Fraction(0)), start=1):
        if v != 1:
            violations.append(Violation("boundary A(0)=I", i, 0.0))
    for i, v in enumerate(schedule.a_diag_exact(Fraction(1)), start=1):
        if v != 0:
            violations.append(Violation("boundary A(1)=0", i, 1.0))

    grid = np.linspace(0.0, 1.0, grid_size)
    values = np.stack([schedule.a_diag(float(s)) for s in grid])  # (grid, N)
    lip = schedule.slope_bound() * (grid[1] - grid[0]) + 1e-9

    bad = (values < 0.0) | (values > 1.0)
    for gi, i in zip(*np.nonzero(bad)):
        violations.append(Violation("range [0,1]", int(i) + 1, float(grid[gi])))

    diffs = values[1:] - values[:-1]
    for gi, i in zip(*np.nonzero(diffs > 1e-12)):
        violations.append(Violation("monotone non-increasing", int(i) + 1,
                                    float(grid[gi + 1])))
    for gi, i in zip(*np.nonzero(np.abs(diffs) > lip)):
        violations.append(Violation("continuity (Lipschitz)", int(i) + 1,
                                    float(grid[gi + 1])))
    return ScheduleReport(violations)


def _nudge_off_breakpoints(s: float, schedule: NoiseSchedule, delta: float = 1e-6) -> float:
    """Shift s away from schedule breakpoints (and the interval ends).

    Breakpoint spacing is at least 1/(2N-1), far wider than the nudge, so a
    single shift suffices.
    """
    bps = np.array([float(b) for b in schedule.breakpoints])
    s = min(max(s, delta), 1.0 - delta)
    if np.any(np.abs(bps - s) < delta):
        s = s + 2 * delta if s < 0.5 else s - 2 * delta
    return s


def field_equivalence_check(x0: np.ndarray, eps: np.ndarray, schedule: NoiseSchedule,
                            sample_count: int, rng: np.random.Generator,
                            mode: str = "f32") -> float:
    """Max deviation between the two conditional vector-field forms.

    Compares A'(s) A(s)^+ (x_s - eps) against A'(s) (x0 - eps) at sampled
    flow times (nudged off breakpoints), over rows where a_i > 0 or
    a'_i = 0. Modes: ``"f32"``/``"f64"`` evaluate in floats; ``"exact"``
    lifts the same samples to rational arithmetic, where the equivalence
    is an identity, so any nonzero deviation is an implementation error.
    """
    if mode not in ("f32", "f64", "exact"):
        raise ValueError(f"unknown mode {mode!r}")
    dtype = np.float32 if mode == "f32" else np.float64
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    worst = 0.0
    for _ in range(sample_count):
        s = _nudge_off_breakpoints(float(rng.uniform(0.0, 1.0)), schedule)
        if mode == "exact":
            dev = _field_deviation_exact(x0, eps, schedule, s)
        else:
            dev = _field_deviation_float(x0.astype(dtype), eps.astype(dtype), schedule, s)
        worst = max(worst, dev)
    return worst


def _field_deviation_float(x0, eps, schedule, s) -> float:
    # the displacement x_s - eps is formed in factored form a * (x0 - eps)
    # so the comparison is not dominated by add-then-subtract cancellation,
    # which the pseudo-inverse would amplify by 1/a near window ends
    a = schedule.a_diag(s).astype(x0.dtype)
    ap = schedule.a_prime_diag(s).astype(x0.dtype)
    d = x0 - eps
    disp = a[:, None] * d
    with np.errstate(divide="ignore", invalid="ignore"):
        rec = disp / a[:, None]
    field_inv = ap[:, None] * np.where(a[:, None] > 0, rec, 0.0)
    field_direct = ap[:, None] * d
    rows = (a > 0) | (ap == 0)
    if not np.any(rows):
        return 0.0
    return float(np.max(np.abs(field_inv[rows] - field_direct[rows])))


def _field_deviation_exact(x0, eps, schedule, s) -> float:
    sf = Fraction(s)
    a = schedule.a_diag_exact(sf)
    apf = schedule.a_prime_diag(s)
    worst = Fraction(0)
    for i in range(schedule.n):
        ai = a[i]
        api = Fraction(float(apf[i]))
        if not (ai > 0 or api == 0):
            continue
        for j in range(x0.shape[1]):
            x0f = Fraction(float(x0[i, j]))
            ef = Fraction(float(eps[i, j]))
            x_s = ai * x0f + (1 - ai) * ef
            pinv = 1 / ai if ai > 0 else Fraction(0)
            dev = abs(api * pinv * (x_s - ef) - api * (x0f - ef))
            worst = max(worst, dev)
    return float(worst)


def invertible_limit_check(x0: np.ndarray, eps: np.ndarray, base_schedule: NoiseSchedule,
                           sigma_list: Iterable[float], num_s: int = 64
                           ) -> list[tuple[float, float]]:
    """Deviation of the invertible-family field (1-sigma) A'(s) (x0-eps)
    from the sigma=0 field, per sigma, maximized over an off-breakpoint grid.

    The family A_sigma(s) = (1-sigma) A(s) + sigma I is invertible for
    sigma in (0, 1); its conditional field differs from the base field by
    exactly the factor (1-sigma), so deviations must shrink linearly.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    diff = x0 - eps
    s_grid = [_nudge_off_breakpoints((j + 0.5) / num_s, base_schedule)
              for j in range(num_s)]
    fields = [base_schedule.a_prime_diag(s)[:, None] * diff for s in s_grid]
    out = []
    for sigma in sigma_list:
        if not 0.0 < sigma < 1.0:
            raise ValueError("each sigma must lie in (0, 1)")
        dev = max(float(np.max(np.abs((1.0 - sigma) * f - f))) for f in fields)
        out.append((float(sigma), dev))
    return out
