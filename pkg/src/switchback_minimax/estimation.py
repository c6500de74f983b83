"""Horvitz-Thompson estimators of direct and spillover effects.

For estimation order p, period t contributes to cell (q, z) when unit i
has held treatment z under probability q throughout [t - p, t]. The
probability of that event is known from the design:
r_q^{J_t} q_z^{J_t}, with J_t the number of decision points governing
the window.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .design import DecisionContext
from .engine import AssignmentPolicy, OutcomeModel, Trajectory
from .exceptions import ValidationError

ESTIMANDS = ("direct_q1", "direct_q2", "spillover_1", "spillover_0")


@dataclass(frozen=True)
class EstimandId:
    kind: str
    level: float
    p: int
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("direct", "spillover"):
            raise ValidationError(f"kind must be 'direct' or 'spillover', got {self.kind!r}")
        if self.kind == "spillover" and self.level not in (0, 1):
            raise ValidationError("spillover level must be z in {0, 1}")
        if self.kind == "direct" and not 0 < self.level < 1:
            raise ValidationError("direct level must be a probability q")


def estimand_ids(q1: float, q2: float, p: int) -> dict[str, EstimandId]:
    return {
        "direct_q1": EstimandId("direct", q1, p, "direct_q1"),
        "direct_q2": EstimandId("direct", q2, p, "direct_q2"),
        "spillover_1": EstimandId("spillover", 1, p, "spillover_1"),
        "spillover_0": EstimandId("spillover", 0, p, "spillover_0"),
    }


def cells_of(name: str, q1: float, q2: float) -> tuple[tuple[float, int], tuple[float, int]]:
    """The (positive, negative) constant-path cells contrasted by an estimand."""
    return {
        "direct_q1": ((q1, 1), (q1, 0)),
        "direct_q2": ((q2, 1), (q2, 0)),
        "spillover_1": ((q1, 1), (q2, 1)),
        "spillover_0": ((q1, 0), (q2, 0)),
    }[name]


@dataclass
class EffectEstimate:
    id: EstimandId
    point: float
    per_unit: np.ndarray
    variance_estimate: float | None = None
    ci: tuple[float, float] | None = None

    def to_dict(self) -> dict:
        return {
            "estimand": self.id.name,
            "kind": self.id.kind,
            "level": self.id.level,
            "p": self.id.p,
            "point": float(self.point),
            "variance_estimate": None if self.variance_estimate is None else float(self.variance_estimate),
            "ci": None if self.ci is None else [float(self.ci[0]), float(self.ci[1])],
        }


def exposure_probability(ctx: DecisionContext, policy: AssignmentPolicy, t: int, q: float, z: int) -> float:
    J = ctx.exposure_count(t)
    qz = q if z == 1 else 1.0 - q
    return policy.r_of(q) ** J * qz**J


def exposure_probabilities(ctx: DecisionContext, policy: AssignmentPolicy, q: float, z: int) -> np.ndarray:
    """r_q^{J_t} q_z^{J_t} for t = p+1..T."""
    J = ctx.exposure_counts.astype(float)
    qz = q if z == 1 else 1.0 - q
    return (policy.r_of(q) * qz) ** J


def constant_path_indicator(trajectory: Trajectory, i: int, t: int, p: int, q: float, z: int) -> int:
    if not p + 1 <= t <= trajectory.T:
        raise ValidationError(f"time {t} outside [{p + 1}, {trajectory.T}]")
    win = slice(t - p - 1, t)
    return int(np.all(trajectory.Q[win] == q) and np.all(trajectory.Z[i, win] == z))


def _window_all(x: np.ndarray, p: int) -> np.ndarray:
    """For boolean x (..., T): all of x[t-p..t] for t = p+1..T (1-based)."""
    c = np.cumsum(x, axis=-1, dtype=np.int64)
    c = np.concatenate([np.zeros(c.shape[:-1] + (1,), dtype=np.int64), c], axis=-1)
    return (c[..., p + 1 :] - c[..., : -p - 1]) == p + 1


def cell_indicators(Q: np.ndarray, Z: np.ndarray, p: int, q: float, z: int) -> np.ndarray:
    """Constant-path indicators, shape (..., N, T - p); Q (..., T), Z (..., N, T)."""
    wq = _window_all(np.asarray(Q) == q, p)[..., None, :]
    wz = _window_all(np.asarray(Z) == z, p)
    return wq & wz


def ht_unit_contrasts(Q, Z, Y, ctx: DecisionContext, policy: AssignmentPolicy,
                      names: Sequence[str] = ESTIMANDS) -> np.ndarray:
    """Unit-level HT contrasts for a batch of trajectories.

    Q is (..., T) and Z, Y are (..., N, T). Returns (..., N, len(names)).
    A cell never attained contributes 0.
    """
    p = ctx.p
    Yw = np.asarray(Y, dtype=float)[..., p:]
    cache = {}

    def weighted(q, z):
        if (q, z) not in cache:
            ind = cell_indicators(Q, Z, p, q, z)
            w = 1.0 / exposure_probabilities(ctx, policy, q, z)
            cache[(q, z)] = np.sum(Yw * ind * w, axis=-1)
        return cache[(q, z)]

    out = []
    for name in names:
        pos, neg = cells_of(name, policy.q1, policy.q2)
        out.append((weighted(*pos) - weighted(*neg)) / (ctx.T - p))
    return np.stack(out, axis=-1)


def _check(trajectory: Trajectory, ctx: DecisionContext, policy: AssignmentPolicy):
    if ctx.design != policy.design:
        raise ValidationError("context and policy use different designs")
    trajectory.check_design(ctx.design)
    trajectory.check_levels(policy.q1, policy.q2)


def _estimate(trajectory, ctx, policy, name, eid) -> EffectEstimate:
    _check(trajectory, ctx, policy)
    per_unit = ht_unit_contrasts(trajectory.Q, trajectory.Z, trajectory.Y, ctx, policy, [name])[:, 0]
    return EffectEstimate(eid, float(per_unit.mean()), per_unit)


def ht_direct(trajectory: Trajectory, ctx: DecisionContext, policy: AssignmentPolicy, q: float) -> EffectEstimate:
    name = "direct_q1" if q == policy.q1 else "direct_q2" if q == policy.q2 else None
    if name is None:
        raise ValidationError(f"q={q} is neither q1 nor q2")
    return _estimate(trajectory, ctx, policy, name, EstimandId("direct", q, ctx.p, name))


def ht_spillover(trajectory: Trajectory, ctx: DecisionContext, policy: AssignmentPolicy, z: int) -> EffectEstimate:
    if z not in (0, 1):
        raise ValidationError(f"z must be 0 or 1, got {z}")
    name = f"spillover_{z}"
    return _estimate(trajectory, ctx, policy, name, EstimandId("spillover", z, ctx.p, name))


def estimate_all(trajectory: Trajectory, ctx: DecisionContext, policy: AssignmentPolicy) -> dict[str, EffectEstimate]:
    _check(trajectory, ctx, policy)
    ids = estimand_ids(policy.q1, policy.q2, ctx.p)
    per = ht_unit_contrasts(trajectory.Q, trajectory.Z, trajectory.Y, ctx, policy)
    return {n: EffectEstimate(ids[n], float(per[:, k].mean()), per[:, k]) for k, n in enumerate(ESTIMANDS)}


def constant_path_tables(model: OutcomeModel, N: int, T: int, q1: float, q2: float) -> dict:
    """Y(q 1, z 1) tables (N x T) keyed by (q, z)."""
    return {(q, z): model.constant_path_table(q, z, N, T) for q in (q1, q2) for z in (1, 0)}


def true_effects(model: OutcomeModel, N: int, T: int, p: int, q1: float, q2: float) -> dict[str, float]:
    """Finite-population estimands averaged over units and t = p+1..T."""
    tabs = constant_path_tables(model, N, T, q1, q2)
    out = {}
    for name in ESTIMANDS:
        pos, neg = cells_of(name, q1, q2)
        out[name] = float(np.mean(tabs[pos][:, p:] - tabs[neg][:, p:]))
    return out


def pooled_estimate(center_estimates: Sequence[EffectEstimate], weights: Sequence[float]) -> EffectEstimate:
    """Weighted combination of per-center estimates (weights N_g / N)."""
    w = np.asarray(weights, dtype=float)
    if len(center_estimates) == 0 or len(w) != len(center_estimates):
        raise ValidationError("need one weight per center estimate")
    if abs(w.sum() - 1.0) > 1e-9 or (w < 0).any():
        raise ValidationError(f"weights must be non-negative and sum to 1, got sum {w.sum()}")
    ids = {(e.id.kind, e.id.level, e.id.p) for e in center_estimates}
    if len(ids) != 1:
        raise ValidationError("estimand ids differ across centers")
    point = float(sum(wi * e.point for wi, e in zip(w, center_estimates)))
    per_unit = np.concatenate([e.per_unit for e in center_estimates])
    return EffectEstimate(center_estimates[0].id, point, per_unit)
