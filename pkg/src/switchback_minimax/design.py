"""Designs and the decision-point combinatorics every other module builds on.

Time is 1-based throughout. A design is a horizon ``T`` plus the ordered
decision points at which the treated probability and every unit's
assignment are re-drawn. The sentinel ``T + 1`` that closes the last
interval is never stored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import InfeasibleError, ValidationError

STANDARD_KINDS = ("independent", "blocked", "star1", "star2")


@dataclass(frozen=True)
class Design:
    """Horizon plus strictly increasing decision points starting at 1."""

    horizon: int
    decision_points: tuple[int, ...]

    def __post_init__(self):
        T = self.horizon
        if isinstance(T, bool) or not isinstance(T, (int, np.integer)) or T < 1:
            raise ValidationError(f"horizon must be a positive integer, got {T!r}")
        pts = tuple(int(x) for x in self.decision_points)
        object.__setattr__(self, "horizon", int(T))
        object.__setattr__(self, "decision_points", pts)
        if not pts:
            raise ValidationError("decision_points must be non-empty")
        if pts[0] != 1:
            raise ValidationError(
                f"decision_points must start at 1, got first point {pts[0]}"
            )
        if any(b <= a for a, b in zip(pts, pts[1:])):
            raise ValidationError("decision_points must be strictly increasing")
        if pts[-1] > T:
            raise ValidationError(
                f"decision_points must lie in [1, T={T}], got {pts[-1]}"
            )

    @property
    def T(self) -> int:
        return self.horizon

    @property
    def L(self) -> int:
        """Index of the last decision point (there are L + 1 of them)."""
        return len(self.decision_points) - 1

    def gaps(self) -> np.ndarray:
        """Interval lengths t_{l+1} - t_l for l = 0..L, sentinel included."""
        pts = np.array(self.decision_points + (self.horizon + 1,))
        return np.diff(pts)

    def to_dict(self) -> dict:
        return {"T": self.horizon, "decision_points": list(self.decision_points)}

    @classmethod
    def from_dict(cls, data: dict) -> "Design":
        if not isinstance(data, dict):
            raise ValidationError("design JSON must be an object")
        for key in ("T", "decision_points"):
            if key not in data:
                raise ValidationError(f"design JSON is missing field '{key}'")
        pts = data["decision_points"]
        if not isinstance(pts, list) or not all(
            isinstance(x, int) and not isinstance(x, bool) for x in pts
        ):
            raise ValidationError("field 'decision_points' must be a list of integers")
        T = data["T"]
        if not isinstance(T, int) or isinstance(T, bool):
            raise ValidationError("field 'T' must be an integer")
        try:
            return cls(T, tuple(pts))
        except ValidationError as exc:
            field = "T" if "horizon" in str(exc) else "decision_points"
            raise ValidationError(f"field '{field}': {exc}") from None

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict())
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, path: str | Path) -> "Design":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"design file is not valid JSON: {exc}") from None
        return cls.from_dict(data)


def make_standard_design(kind: str, T: int, p: int) -> Design:
    """Build one of the four reference designs.

    ``star1``/``star2`` require the divisibility conditions that make their
    end intervals exactly ``2p`` (resp. ``2p + 1``) long. With ``p = 0`` both
    star kinds collapse to the independent design.
    """
    if T < 1:
        raise ValidationError(f"T must be >= 1, got {T}")
    if p < 0:
        raise ValidationError(f"p must be >= 0, got {p}")
    if kind == "independent" or (kind in ("star1", "star2") and p == 0):
        return Design(T, tuple(range(1, T + 1)))
    if kind == "blocked":
        # a trailing period shorter than p + 1 joins the previous block
        return Design(T, tuple(range(1, max(T - p, 1) + 1, p + 1)))
    if kind == "star1":
        rest = T - 4 * p
        if rest < 0 or rest % p:
            raise InfeasibleError(
                f"star1 needs T - 4p to be a non-negative multiple of p (T={T}, p={p})"
            )
        K = rest // p + 4
        return Design(T, (1,) + tuple(j * p + 1 for j in range(2, K - 1)))
    if kind == "star2":
        rest = T - 4 * p - 2
        if rest < 0 or rest % (p + 1):
            raise InfeasibleError(
                f"star2 needs T - 4p - 2 to be a non-negative multiple of p + 1 "
                f"(T={T}, p={p})"
            )
        K = rest // (p + 1) + 4
        return Design(T, (1,) + tuple(j * (p + 1) for j in range(2, K - 1)))
    raise ValidationError(f"unknown design kind {kind!r}; expected one of {STANDARD_KINDS}")


def design_from_ab(T: int, a: int, b: int, M: int, unequal_ends: bool = False) -> Design:
    """Design with end gaps ``a`` (and ``a`` or ``a+1``) and M middle gaps of b or b+1.

    Longer middle intervals come first, right after the first interior
    decision point.
    """
    R = T - 2 * a - int(unequal_ends)
    n_long = R - M * b
    n_short = M * (b + 1) - R
    if M < 0 or n_long < 0 or n_short < 0:
        raise InfeasibleError(f"no arrangement of {M} gaps of {b}/{b + 1} sums to {R}")
    pts = [1, 1 + a]
    for length in [b + 1] * n_long + [b] * n_short:
        pts.append(pts[-1] + length)
    return Design(T, tuple(pts))


class DecisionContext:
    """A design paired with a carryover order ``p``.

    Governing sets are contiguous runs of decision points, so each time
    ``t >= p + 1`` is summarised by the index range ``[lo(t), hi(t)]`` of the
    points in ``{F(i) : t - p <= i <= t}``.
    """

    def __init__(self, design: Design, p: int):
        if isinstance(p, bool) or not isinstance(p, (int, np.integer)) or p < 0:
            raise ValidationError(f"order p must be a non-negative integer, got {p!r}")
        if p >= design.horizon:
            raise ValidationError(
                f"order p={p} leaves no estimable periods for T={design.horizon}"
            )
        self.design = design
        self.p = int(p)
        pts = np.asarray(design.decision_points)
        times = np.arange(1, design.horizon + 1)
        # index (into decision_points) of the governing point F(t), t = 1..T
        self._gidx = np.searchsorted(pts, times, side="right") - 1
        self._gidx.setflags(write=False)

    @property
    def T(self) -> int:
        return self.design.horizon

    @property
    def times(self) -> np.ndarray:
        """Estimable periods p+1..T."""
        return np.arange(self.p + 1, self.T + 1)

    def governing(self, t: int) -> int:
        """F(t): the latest decision point not after t."""
        self._check_time(t, lower=1)
        return self.design.decision_points[self._gidx[t - 1]]

    @property
    def governing_array(self) -> np.ndarray:
        """F(t) for t = 1..T (index 0 holds t = 1)."""
        return np.asarray(self.design.decision_points)[self._gidx]

    def governing_set(self, t: int) -> tuple[int, ...]:
        self._check_time(t)
        lo, hi = self._range(t)
        return self.design.decision_points[lo : hi + 1]

    @cached_property
    def _lo_hi(self) -> tuple[np.ndarray, np.ndarray]:
        t = self.times
        lo = self._gidx[t - self.p - 1]
        hi = self._gidx[t - 1]
        return lo, hi

    def _range(self, t: int) -> tuple[int, int]:
        return int(self._gidx[t - self.p - 1]), int(self._gidx[t - 1])

    def _check_time(self, t: int, lower: int | None = None):
        lower = self.p + 1 if lower is None else lower
        if not lower <= t <= self.T:
            raise ValidationError(f"time {t} outside [{lower}, {self.T}]")

    def exposure_count(self, t: int) -> int:
        """J_t, the number of decision points governing the window [t-p, t]."""
        self._check_time(t)
        lo, hi = self._range(t)
        return hi - lo + 1

    @cached_property
    def exposure_counts(self) -> np.ndarray:
        """J_t for t = p+1..T."""
        lo, hi = self._lo_hi
        out = hi - lo + 1
        out.setflags(write=False)
        return out

    def overlap_count(self, t: int, t2: int) -> int:
        """J°_{t,t'}: size of the intersection of the two governing sets."""
        self._check_time(t)
        self._check_time(t2)
        lo1, hi1 = self._range(t)
        lo2, hi2 = self._range(t2)
        return max(0, min(hi1, hi2) - max(lo1, lo2) + 1)

    def overlap_matrix(self) -> np.ndarray:
        """Full (T-p) x (T-p) matrix of J° values, diagonal equal to J_t."""
        lo, hi = self._lo_hi
        m = np.minimum.outer(hi, hi) - np.maximum.outer(lo, lo) + 1
        return np.maximum(m, 0)

    def j_histogram(self) -> "JHistogram":
        """Counts of singles by J_t plus ordered pairs t != t' by J° >= 1."""
        J = self.exposure_counts
        ov = self.overlap_matrix()
        np.fill_diagonal(ov, 0)
        size = self.p + 2
        counts = np.bincount(J, minlength=size)[:size]
        counts = counts + np.bincount(ov.ravel(), minlength=size)[:size]
        return JHistogram({j: int(counts[j]) for j in range(1, size)})


@dataclass(frozen=True)
class JHistogram:
    """Map j -> number of singles with J_t = j plus ordered pairs with J° = j."""

    counts: dict[int, int]

    def __getitem__(self, j: int) -> int:
        return self.counts.get(j, 0)

    def as_array(self, size: int | None = None) -> np.ndarray:
        """Array indexed by j (index 0 unused and zero)."""
        top = max(self.counts, default=0)
        size = top + 1 if size is None else size
        out = np.zeros(size, dtype=float)
        for j, c in self.counts.items():
            if j < size:
                out[j] = c
        return out


def validate_candidate(design: Design, p: int) -> bool:
    """Feasibility screen: t_1 >= p+2, t_L <= T-p and t_{l+1} - t_{l-1} >= p.

    A design with a single decision point has no t_1 and is reported as
    infeasible.
    """
    pts = design.decision_points
    T = design.horizon
    if len(pts) < 2:
        return False
    if pts[1] < p + 2 or pts[-1] > T - p:
        return False
    ext = pts + (T + 1,)
    return all(ext[l + 1] - ext[l - 1] >= p for l in range(1, len(pts)))


def iter_feasible_designs(T: int, p: int) -> Iterable[Design]:
    """All designs passing :func:`validate_candidate`, in lexicographic order.

    Depth-first generation prunes on the spacing constraint as points are
    appended, so the search never materialises the full power set.
    """
    first, last = p + 2, T - p

    def extend(prefix: list[int]):
        if len(prefix) >= 2:
            # closing check: l = L uses the sentinel T + 1
            if T + 1 - prefix[-2] >= p:
                yield tuple(prefix)
        start = prefix[-1] + 1
        if len(prefix) >= 2:
            start = max(start, prefix[-2] + p)
        for nxt in range(start, last + 1):
            prefix.append(nxt)
            yield from extend(prefix)
            prefix.pop()

    for t1 in range(first, last + 1):
        for pts in extend([1, t1]):
            yield Design(T, pts)


def as_design(obj: Design | Sequence[int], T: int | None = None) -> Design:
    if isinstance(obj, Design):
        return obj
    if T is None:
        raise ValidationError("a horizon is needed to build a design from a point list")
    return Design(T, tuple(obj))
