"""Exact ground truth on tiny instances by full enumeration.

Every randomisation outcome is an atom: one probability choice per
decision point and one treatment per unit per decision point. Atoms are
indexed by an integer whose low bits pick q1 (bit set) or q2 at each
decision point and whose high bits hold unit-major treatments. Moments
are accumulated chunk by chunk so memory stays bounded.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .design import DecisionContext, Design, iter_feasible_designs
from .engine import AssignmentPolicy, OutcomeModel, PathTable, _interval_index
from .estimation import ESTIMANDS, cells_of, ht_unit_contrasts, true_effects
from .exceptions import InstanceTooLargeError, ValidationError
from .minimax import (
    ExperimentParams,
    REGIME_LARGE_N,
    level_cost,
    regime_for,
)

MAX_ATOM_BITS = 24
MAX_EXHAUSTIVE_T = 18


@dataclass(frozen=True)
class AtomicOutcome:
    probability: float
    Q: np.ndarray
    Z: np.ndarray
    Y: np.ndarray


class Enumeration:
    """The full randomisation distribution of a policy for N units."""

    def __init__(self, policy: AssignmentPolicy, model: OutcomeModel, N: int):
        n_dec = len(policy.design.decision_points)
        bits = n_dec * (N + 1)
        if bits > MAX_ATOM_BITS:
            raise InstanceTooLargeError(
                f"enumeration needs 2^{bits} atoms; the guard allows at most 2^{MAX_ATOM_BITS}"
            )
        self.policy, self.model, self.N = policy, model, int(N)
        self.n_dec = n_dec
        self.n_atoms = 1 << bits
        self._idx = _interval_index(policy.design)

    def chunks(self, size: int = 1 << 15) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
        """Yield (prob, Q, Z, Y) with shapes (A,), (A, T), (A, N, T), (A, N, T)."""
        pol, n_dec, N = self.policy, self.n_dec, self.N
        shifts_q = np.arange(n_dec)
        shifts_z = n_dec + np.arange(N * n_dec).reshape(N, n_dec)
        for start in range(0, self.n_atoms, size):
            a = np.arange(start, min(start + size, self.n_atoms), dtype=np.int64)
            qbit = (a[:, None] >> shifts_q) & 1
            zbit = ((a[:, None, None] >> shifts_z) & 1).astype(np.int8)
            q_dec = np.where(qbit == 1, pol.q1, pol.q2)
            prob = np.prod(np.where(qbit == 1, pol.r_q1, pol.r_q2), axis=1)
            qz = np.where(zbit == 1, q_dec[:, None, :], 1.0 - q_dec[:, None, :])
            prob = prob * np.prod(qz.reshape(len(a), -1), axis=1)
            Q = q_dec[:, self._idx]
            Z = zbit[:, :, self._idx]
            yield prob, Q, Z, self.model.realize(Q, Z)

    def atoms(self) -> Iterator[AtomicOutcome]:
        for prob, Q, Z, Y in self.chunks():
            for k in range(len(prob)):
                yield AtomicOutcome(float(prob[k]), Q[k], Z[k], Y[k])

    def moments(self, fn: Callable) -> tuple[np.ndarray, np.ndarray]:
        """E[f] and E[f f^T] for a batched statistic f(Q, Z, Y) -> (A, k)."""
        m1 = m2 = None
        for prob, Q, Z, Y in self.chunks():
            f = np.asarray(fn(Q, Z, Y), dtype=float)
            f = f.reshape(len(prob), -1)
            s1 = prob @ f
            s2 = np.einsum("a,ai,aj->ij", prob, f, f)
            m1 = s1 if m1 is None else m1 + s1
            m2 = s2 if m2 is None else m2 + s2
        return m1, m2

    def total_probability(self) -> float:
        return float(sum(c[0].sum() for c in self.chunks()))


def enumerate_distribution(policy: AssignmentPolicy, model: OutcomeModel, N: int) -> Enumeration:
    return Enumeration(policy, model, N)


@dataclass(frozen=True)
class Moments:
    expectation: float
    variance: float
    risk: float
    target: float


def exact_moments(enum: Enumeration, estimand: str, p: int, target: float | None = None) -> Moments:
    """Exact mean, variance and MSE of a population HT estimator.

    The default target is the constant-path estimand of order p.
    """
    if estimand not in ESTIMANDS:
        raise ValidationError(f"unknown estimand {estimand!r}")
    return exact_moments_all(enum, p, targets=None if target is None else {estimand: target})[estimand]


def exact_moments_all(enum: Enumeration, p: int, targets: dict | None = None) -> dict[str, Moments]:
    ctx = DecisionContext(enum.policy.design, p)
    pol = enum.policy

    def stat(Q, Z, Y):
        return ht_unit_contrasts(Q, Z, Y, ctx, pol).mean(axis=-2)

    m1, m2 = enum.moments(stat)
    T = pol.design.horizon
    truth = true_effects(enum.model, enum.N, T, p, pol.q1, pol.q2)
    if targets:
        truth.update(targets)
    out = {}
    for k, name in enumerate(ESTIMANDS):
        e, e2 = float(m1[k]), float(m2[k, k])
        tau = truth[name]
        var = e2 - e * e
        out[name] = Moments(e, var, var + (e - tau) ** 2, tau)
    return out


def misspecified_target(enum: Enumeration, p: int, estimand: str, convention: str = "path_conditioned") -> float:
    """Expected contrast under carryover order m > p, by enumeration.

    ``path_conditioned``: the observed path is kept before F(t - p) and the
    contrast path runs constant from F(t - p) to t. ``literal``: the
    observed path is kept through t - p - 1 and only [t - p, t] is set
    constant. Lags before the series start are clipped either way.
    """
    if convention not in ("path_conditioned", "literal"):
        raise ValidationError(f"unknown convention {convention!r}")
    pol = enum.policy
    ctx = DecisionContext(pol.design, p)
    T = ctx.T
    starts = {t: (ctx.governing(t - p) if convention == "path_conditioned" else t - p)
              for t in range(p + 1, T + 1)}
    pos, neg = cells_of(estimand, pol.q1, pol.q2)

    def stat(Q, Z, Y):
        vals = np.zeros(len(Q))
        for t in range(p + 1, T + 1):
            s = starts[t] - 1
            for sign, (q, z) in ((1.0, pos), (-1.0, neg)):
                Qm, Zm = Q.copy(), Z.copy()
                Qm[:, s:t] = q
                Zm[:, :, s:t] = z
                vals += sign * enum.model.realize(Qm, Zm)[:, :, t - 1].mean(axis=1)
        return vals[:, None] / (T - p)

    m1, _ = enum.moments(stat)
    return float(m1[0])


# Worst case over constant corner tables

class CornerModel(OutcomeModel):
    """Order-0 model with Y = c[(Q_t, Z_t)] for constants c."""

    def __init__(self, values: dict, q1: float, N: int, T: int):
        self.values, self.q1, self.m, self.N, self.T = dict(values), q1, 0, N, T

    def eval(self, i, t, q_path, z_path):
        return self.values[(q_path[-1], int(z_path[-1]))]

    def realize(self, Q, Z):
        Q = np.asarray(Q, dtype=float)[..., None, :]
        Z = np.asarray(Z)
        out = np.zeros(np.broadcast_shapes(Q.shape, Z.shape))
        for (q, z), v in self.values.items():
            out = np.where((Q == q) & (Z == z), v, out)
        return out


@dataclass(frozen=True)
class CornerResult:
    value: float
    corner: dict
    values: dict


def exact_objective(enum: Enumeration, params: ExperimentParams, p: int | None = None) -> float:
    """psi-weighted sum of the four exact risks."""
    p = params.p if p is None else p
    mom = exact_moments_all(enum, p)
    d = mom["direct_q1"].risk + mom["direct_q2"].risk
    s = mom["spillover_1"].risk + mom["spillover_0"].risk
    return params.psi_d * d + params.psi_s * s


def worst_case_corner_search(design: Design, params: ExperimentParams) -> CornerResult:
    """Maximise the exact objective over the 16 constant +-B tables."""
    pol = AssignmentPolicy(design, params.q1, params.q2, params.r_q1)
    cells = [(params.q1, 1), (params.q1, 0), (params.q2, 1), (params.q2, 0)]
    best, values = None, {}
    for signs in itertools.product((1.0, -1.0), repeat=4):
        table = {c: s * params.B for c, s in zip(cells, signs)}
        model = CornerModel(table, params.q1, params.N, params.T)
        val = exact_objective(Enumeration(pol, model, params.N), params)
        values[signs] = val
        if best is None or val > best[0] + 1e-14:
            best = (val, table)
    return CornerResult(best[0], best[1], values)


# Exhaustive design search

@dataclass(frozen=True)
class ExhaustiveResult:
    design: Design
    objective: float
    n_designs: int


def _fast_histogram(pts: np.ndarray, T: int, p: int) -> np.ndarray:
    gidx = np.searchsorted(pts, np.arange(1, T + 1), side="right") - 1
    lo = gidx[: T - p]
    hi = gidx[p:]
    ov = np.minimum.outer(hi, hi) - np.maximum.outer(lo, lo) + 1
    return np.bincount(np.maximum(ov, 0).ravel(), minlength=p + 2)[: p + 2]


def exhaustive_design_search(T: int, params: ExperimentParams) -> ExhaustiveResult:
    """Minimise the histogram objective over every feasible design.

    Ties resolve to the lexicographically first decision-point list.
    """
    if T > MAX_EXHAUSTIVE_T:
        raise InstanceTooLargeError(f"exhaustive search allows T <= {MAX_EXHAUSTIVE_T}, got {T}")
    if T != params.T:
        params = params.replace(T=T)
    p = params.p
    regime = regime_for(params.N, params.r_q1, p) or REGIME_LARGE_N
    cost = np.array([0.0] + [level_cost(j, params, regime) for j in range(1, p + 2)])
    scale = params.B**2 / (T - p) ** 2
    if p == 0:
        d = Design(T, tuple(range(1, T + 1)))
        h = _fast_histogram(np.array(d.decision_points), T, p)
        return ExhaustiveResult(d, float(scale * h @ cost), 1)
    best, count = None, 0
    for d in iter_feasible_designs(T, p):
        count += 1
        val = float(scale * _fast_histogram(np.array(d.decision_points), T, p) @ cost)
        if best is None or val < best[1] - 1e-12 * abs(best[1]):
            best = (d, val)
    if best is None:
        raise InstanceTooLargeError(f"no feasible design for T={T}, p={p}")
    return ExhaustiveResult(best[0], best[1], count)


def random_table(N: int, T: int, m: int, q1: float, rng: np.random.Generator, B: float = 1.0) -> PathTable:
    return PathTable.random(N, T, m, q1, rng, B)
