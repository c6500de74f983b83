"""Exact variances, their estimable bounds and conservative estimators.

Everything here assumes the two-length minimax structure: equal end
intervals of length a >= p + 1 and middle intervals of a common length
b >= p, with r = 0.5. Block k runs from decision point k to the next one
(block 1 starts at p + 1). Its head covers the first p periods, whose
windows reach back into block k - 1; its tail is the rest and depends on
block k alone.

Variances are written as sums of bilinear terms
``alpha * (sum u)(sum v) + beta * u.v`` over per-unit block sums u and v,
which is the matrix form ``u^T (alpha J + beta I) v``. One table of
terms serves the exact variance, the Cauchy-Schwarz bound and (through
inverse-probability weighting of each unit pair) the estimator of the
bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._normal import norm_ppf, two_sided_pvalue
from .design import Design
from .engine import AssignmentPolicy, Trajectory, _interval_index
from .estimation import ESTIMANDS, cells_of
from .exceptions import ValidationError


@dataclass(frozen=True)
class BlockStructure:
    """Block boundaries of a two-length design for order p."""

    design: Design
    p: int
    a: int
    b: int
    K: int
    starts: np.ndarray  # first period of each block (block 1 starts at p + 1)
    ends: np.ndarray  # last period of each block
    head_ends: np.ndarray  # last period of each head (start - 1 when empty)
    eta: np.ndarray  # decision points governing the head: 1 for block 1, else 2

    @property
    def n_blocks(self) -> int:
        return self.K - 2


def block_structure(design: Design, p: int) -> BlockStructure:
    gaps = design.gaps()
    if p < 1:
        raise ValidationError("block variances need p >= 1")
    if len(gaps) < 2:
        raise ValidationError("design not block-structured: needs at least two decision points")
    a = int(gaps[0])
    middle = gaps[1:-1]
    b = int(middle[0]) if len(middle) else p
    if gaps[-1] != a or (len(middle) and np.any(middle != b)):
        raise ValidationError(
            "design not block-structured: needs equal end intervals and equal middle intervals"
        )
    if a < p + 1 or b < p:
        raise ValidationError(
            f"design not block-structured for p={p}: needs end length a >= p+1 and middle length b >= p "
            f"(got a={a}, b={b})"
        )
    pts = np.array(design.decision_points)
    K = len(pts) + 2
    starts = pts.copy()
    starts[0] = p + 1
    ends = np.append(pts[1:] - 1, design.horizon)
    head_ends = np.where(np.arange(K - 2) == 0, starts - 1, starts + p - 1)
    eta = np.where(np.arange(K - 2) == 0, 1, 2)
    return BlockStructure(design, p, a, b, K, starts, ends, head_ends, eta)


def _segment_sums(Y: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Sums of Y[..., t] over 1-based [lo, hi] per segment -> (..., n_seg) on the last axis."""
    c = np.cumsum(Y, axis=-1)
    c = np.concatenate([np.zeros(c.shape[:-1] + (1,)), c], axis=-1)
    return c[..., hi] - c[..., lo - 1]


@dataclass
class BlockDecomposition:
    """Per-block sums of potential or observed outcomes.

    ``full[c]`` and ``head[c]`` have shape (..., K-2, N); ``tail = full - head``.
    For observed data the sums are multiplied by the cell indicators and
    ``full`` is not formed.
    """

    structure: BlockStructure
    head: dict
    tail: dict
    full: dict = field(default_factory=dict)
    observed: bool = False

    @property
    def K(self) -> int:
        return self.structure.K

    @property
    def eta(self) -> np.ndarray:
        return self.structure.eta


def block_decompose(design: Design, p: int, source, policy: AssignmentPolicy | None = None) -> BlockDecomposition:
    """Block sums from potential tables (dict (q, z) -> N x T) or a trajectory."""
    st = block_structure(design, p)
    if isinstance(source, Trajectory):
        if policy is None:
            raise ValidationError("a policy is needed to decompose observed data")
        source.check_design(design)
        return _observed_blocks(st, policy, source.Q, source.Z, source.Y)
    if not isinstance(source, dict):
        raise ValidationError("source must be a Trajectory or a dict of potential tables")
    head, tail, full = {}, {}, {}
    for cell, tab in source.items():
        tab = np.asarray(tab, dtype=float)
        if tab.shape[-1] != design.horizon:
            raise ValidationError(f"table for cell {cell} has {tab.shape[-1]} periods, design has {design.horizon}")
        f = _segment_sums(tab, st.starts, st.ends)
        h = _segment_sums(tab, st.starts, st.head_ends)
        full[cell] = np.swapaxes(f, -1, -2)
        head[cell] = np.swapaxes(h, -1, -2)
        tail[cell] = full[cell] - head[cell]
    return BlockDecomposition(st, head, tail, full)


def _observed_blocks(st: BlockStructure, policy: AssignmentPolicy, Q, Z, Y) -> BlockDecomposition:
    """Observed head and tail sums times each cell's block indicators.

    The head indicator of block k needs the cell at decision points k-1 and
    k; the tail indicator needs it at decision point k only.
    """
    pts = np.array(st.design.decision_points)
    Qd = np.asarray(Q, dtype=float)[..., pts - 1]
    Zd = np.asarray(Z)[..., pts - 1]
    Y = np.asarray(Y, dtype=float)
    h = np.swapaxes(_segment_sums(Y, st.starts, st.head_ends), -1, -2)
    d = np.swapaxes(_segment_sums(Y, st.starts, st.ends), -1, -2) - h
    head, tail = {}, {}
    for q in (policy.q1, policy.q2):
        for z in (1, 0):
            at = (Qd == q)[..., None, :] & (Zd == z)  # (..., N, n_dec)
            at = np.swapaxes(at, -1, -2)  # (..., n_dec, N)
            prev = np.concatenate([np.zeros_like(at[..., :1, :]), at[..., :-1, :]], axis=-2)
            head[(q, z)] = h * (at & prev)
            tail[(q, z)] = d * at
    return BlockDecomposition(st, head, tail, observed=True)


# Term tables

@dataclass(frozen=True)
class Term:
    """alpha (sum u)(sum v) + beta u.v summed over blocks k in [k_lo, K - k_hi_off].

    Parts are (kind, shift, role) with kind 'F' (full block) or 'H' (head),
    shift 0 or 1 (block k or k + 1) and role 'P' or 'M' (the two cells).
    """

    label: str
    u: tuple
    v: tuple
    alpha: float
    beta: float
    k_lo: int
    k_hi_off: int


def _terms(kind: str, xP: float, xM: float, bound: bool) -> list[Term]:
    def own(role, x):
        g = 2 * (1 / x - 1)
        lab = "A" if role == "P" else "B"
        nxt = "D" if role == "P" else "E"
        return [
            Term(lab, ("F", 0, role), ("F", 0, role), 1.0, g, 1, 2),
            Term(lab, ("H", 0, role), ("H", 0, role), 2.0, g * (2 / x + 1), 2, 2),
            Term(nxt, ("F", 0, role), ("H", 1, role), 2.0, 2 * g, 1, 3),
        ]

    terms = own("P", xP) + own("M", xM)
    FP, FM, HP, HM = ("F", 0, "P"), ("F", 0, "M"), ("H", 0, "P"), ("H", 0, "M")
    HP1, HM1 = ("H", 1, "P"), ("H", 1, "M")
    if kind == "direct":
        if not bound:
            terms += [
                Term("C", FP, FM, -2.0, 4.0, 1, 2),
                Term("C", HP, HM, -4.0, 4.0, 2, 2),
                Term("F", FP, HM1, -2.0, 4.0, 1, 3),
                Term("G", FM, HP1, -2.0, 4.0, 1, 3),
            ]
        else:
            terms += [
                Term("C", FP, FM, -2.0, 2.0, 1, 2),
                Term("C", HP, HM, -4.0, 4.0, 2, 2),
                Term("C", FP, FP, 0.0, 1.0, 1, 2),
                Term("C", FM, FM, 0.0, 1.0, 1, 2),
                Term("F", FP, HM1, -2.0, 2.0, 1, 3),
                Term("F", FP, FP, 0.0, 1.0, 1, 3),
                Term("F", HM, HM, 0.0, 1.0, 2, 2),
                Term("G", FM, HP1, -2.0, 2.0, 1, 3),
                Term("G", HP, HP, 0.0, 1.0, 2, 2),
                Term("G", FM, FM, 0.0, 1.0, 1, 3),
            ]
    else:
        if not bound:
            terms += [
                Term("C", FP, FM, 2.0, 0.0, 1, 2),
                Term("F", FP, HM1, 2.0, 0.0, 1, 3),
                Term("G", FM, HP1, 2.0, 0.0, 1, 3),
            ]
        else:
            terms += [
                Term("C", FP, FP, 1.0, 0.0, 1, 2),
                Term("C", FM, FM, 1.0, 0.0, 1, 2),
                Term("F", FP, FP, 1.0, 0.0, 1, 3),
                Term("F", HM, HM, 1.0, 0.0, 2, 2),
                Term("G", HP, HP, 1.0, 0.0, 2, 2),
                Term("G", FM, FM, 1.0, 0.0, 1, 3),
            ]
    return terms


def _roles(estimand: str, q1: float, q2: float):
    (qP, zP), (qM, zM) = cells_of(estimand, q1, q2)
    kind = "direct" if estimand.startswith("direct") else "spillover"
    x = lambda q, z: q if z == 1 else 1 - q
    return kind, {"P": (qP, zP), "M": (qM, zM)}, x(qP, zP), x(qM, zM)


def _part(blocks: BlockDecomposition, part, cells, n_blocks, k_lo, k_hi_off) -> np.ndarray:
    kind, shift, role = part
    src = blocks.full if kind == "F" else blocks.head
    arr = src[cells[role]]
    k0 = k_lo - 1 + shift
    k1 = n_blocks - (k_hi_off - 2) + shift
    return arr[..., k0:k1, :]


def _assemble(blocks: BlockDecomposition, estimand: str, q1: float, q2: float, bound: bool) -> dict:
    kind, cells, xP, xM = _roles(estimand, q1, q2)
    nb = blocks.structure.n_blocks
    out = {c: 0.0 for c in "ABCDEFG"}
    for term in _terms(kind, xP, xM, bound):
        u = _part(blocks, term.u, cells, nb, term.k_lo, term.k_hi_off)
        v = _part(blocks, term.v, cells, nb, term.k_lo, term.k_hi_off)
        if u.shape[-2] == 0:
            continue
        val = term.alpha * np.sum(u.sum(-1) * v.sum(-1), axis=-1) + term.beta * np.sum(u * v, axis=(-1, -2))
        out[term.label] = out[term.label] + val
    return out


def _scale(blocks: BlockDecomposition, N: int) -> float:
    st = blocks.structure
    return 1.0 / (N**2 * (st.design.horizon - st.p) ** 2)


@dataclass
class VarianceReport:
    estimand: str
    exact: float | None
    upper_bound: float | None
    estimate: float | None
    components: dict = field(default_factory=dict)


def _check_tables(blocks: BlockDecomposition, estimand: str, q1: float, q2: float) -> int:
    if blocks.observed:
        raise ValidationError("exact variances need potential tables, not observed data")
    if estimand not in ESTIMANDS:
        raise ValidationError(f"unknown estimand {estimand!r}")
    for c in cells_of(estimand, q1, q2):
        if c not in blocks.full:
            raise ValidationError(f"missing potential table for cell {c}")
    return next(iter(blocks.full.values())).shape[-1]


def variance_components(blocks: BlockDecomposition, q1: float, q2: float, estimand: str, bound: bool = False) -> dict:
    N = _check_tables(blocks, estimand, q1, q2)
    s = _scale(blocks, N)
    return {k: v * s for k, v in _assemble(blocks, estimand, q1, q2, bound).items()}


def exact_variance(blocks: BlockDecomposition, params, estimand: str) -> float:
    """Design variance of the population HT estimator (r = 0.5)."""
    _require_half(params)
    return float(sum(variance_components(blocks, params.q1, params.q2, estimand).values()))


def variance_upper_bound(blocks: BlockDecomposition, params, estimand: str) -> float:
    """Cauchy-Schwarz majorant of the exact variance that is estimable from data."""
    _require_half(params)
    return float(sum(variance_components(blocks, params.q1, params.q2, estimand, bound=True).values()))


def _require_half(params):
    if abs(params.r_q1 - 0.5) > 1e-15:
        raise ValidationError("block variance formulas require r_q1 = r_q2 = 0.5")


# Conservative estimator

def _decisions(kind: str, k: np.ndarray) -> list[np.ndarray]:
    """Governing decision indices (0-based) for a head or tail part of block k (1-based)."""
    if kind == "H":
        return [k - 2, k - 1]
    return [k - 1]


def _pair_probability(policy: AssignmentPolicy, u_atom, v_atom, ks: np.ndarray, same_unit: bool) -> np.ndarray:
    """P(both indicators on) for atomic parts u, v across blocks ks."""
    (ku, su, cu), (kv, sv, cv) = u_atom, v_atom
    dv = [ks - 1 + sv] if kv == "D" else [ks - 2 + sv, ks - 1 + sv]
    xu = cu[0] if cu[1] == 1 else 1 - cu[0]
    xv = cv[0] if cv[1] == 1 else 1 - cv[0]
    ru, rv = policy.r_of(cu[0]), policy.r_of(cv[0])
    if cu[0] == cv[0]:
        if same_unit:
            shared_factor = ru * xu if cu[1] == cv[1] else 0.0
        else:
            shared_factor = ru * xu * xv
    else:
        shared_factor = 0.0
    # decision sets are contiguous index runs; count shared and unshared per block
    u_list = [ks - 1 + su] if ku == "D" else [ks - 2 + su, ks - 1 + su]
    prob = np.ones(len(ks))
    valid_u = [d >= 0 for d in u_list]
    valid_v = [d >= 0 for d in dv]
    for j, d in enumerate(u_list):
        inv = np.zeros(len(ks), dtype=bool)
        for dd, vv in zip(dv, valid_v):
            inv |= (dd == d) & vv
        f = np.where(inv, shared_factor, ru * xu)
        prob *= np.where(valid_u[j], f, 1.0)
    for j, d in enumerate(dv):
        inu = np.zeros(len(ks), dtype=bool)
        for dd, uu in zip(u_list, valid_u):
            inu |= (dd == d) & uu
        prob *= np.where(valid_v[j] & ~inu, rv * xv, 1.0)
    return prob


def conservative_variance_estimate(trajectory_or_blocks, blocks_or_design, params, estimand: str,
                                   policy: AssignmentPolicy | None = None) -> float:
    """Unbiased estimate of :func:`variance_upper_bound` from one trajectory.

    Every unit pair in every bilinear term is weighted by the inverse
    probability that both parts are observed in their cells. May be
    negative in small samples; confidence intervals floor it at zero.
    """
    obs = _observed_from(trajectory_or_blocks, blocks_or_design, params, policy)
    pol = policy or AssignmentPolicy(obs.structure.design, params.q1, params.q2, params.r_q1)
    return float(_estimate_bound(obs, pol, estimand))


def _observed_from(trajectory_or_blocks, blocks_or_design, params, policy) -> BlockDecomposition:
    _require_half(params)
    if isinstance(trajectory_or_blocks, BlockDecomposition):
        if not trajectory_or_blocks.observed:
            raise ValidationError("estimator needs observed block sums")
        return trajectory_or_blocks
    design = blocks_or_design.structure.design if isinstance(blocks_or_design, BlockDecomposition) else blocks_or_design
    p = blocks_or_design.structure.p if isinstance(blocks_or_design, BlockDecomposition) else params.p
    pol = policy or AssignmentPolicy(design, params.q1, params.q2, params.r_q1)
    return block_decompose(design, p, trajectory_or_blocks, pol)


def observed_blocks_batch(design: Design, p: int, policy: AssignmentPolicy, Q, Z, Y) -> BlockDecomposition:
    """Observed block sums for a batch: Q (..., T), Z and Y (..., N, T)."""
    return _observed_blocks(block_structure(design, p), policy, Q, Z, Y)


def _estimate_bound(obs: BlockDecomposition, policy: AssignmentPolicy, estimand: str, cache: dict | None = None):
    if estimand not in ESTIMANDS:
        raise ValidationError(f"unknown estimand {estimand!r}")
    kind, cells, xP, xM = _roles(estimand, policy.q1, policy.q2)
    st = obs.structure
    nb = st.n_blocks
    N = next(iter(obs.head.values())).shape[-1]
    cache = {} if cache is None else cache
    total = 0.0
    for term in _terms(kind, xP, xM, bound=True):
        ks = np.arange(term.k_lo, nb - (term.k_hi_off - 2) + 1)
        if len(ks) == 0:
            continue
        for ua in _atoms(term.u):
            for va in _atoms(term.v):
                total = total + _atomic_estimate(obs, policy, cells, term, ua, va, ks, cache)
    return total * _scale(obs, N)


def _atoms(part):
    kind, shift, role = part
    return [("H", shift, role), ("D", shift, role)] if kind == "F" else [("H", shift, role)]


def _unit_major(obs: BlockDecomposition, kind: str, cell, cache: dict):
    """(units-first copy, unit sums) of the head or tail sums of one cell."""
    key = (kind, cell)
    if key not in cache:
        src = (obs.head if kind == "H" else obs.tail)[cell]
        um = np.ascontiguousarray(np.moveaxis(src, -1, 0))
        cache[key] = (um, um.sum(axis=0))
    return cache[key]


def _atomic_estimate(obs, policy, cells, term, ua, va, ks, cache=None):
    cache = {} if cache is None else cache
    # ks is a contiguous run, so block selections are slices (views)
    def arr(atom):
        kind, shift, role = atom
        um, tot = _unit_major(obs, kind, cells[role], cache)
        sl = slice(ks[0] - 1 + shift, ks[-1] + shift)
        return um[..., sl], tot[..., sl]

    (u, su), (v, sv) = arr(ua), arr(va)
    ucell, vcell = cells[ua[2]], cells[va[2]]
    pu = (ua[0], ua[1], ucell)
    pv = (va[0], va[1], vcell)
    # head of block 1 is empty: its sums are identically zero
    live = ~(((ua[0] == "H") & (ks + ua[1] == 1)) | ((va[0] == "H") & (ks + va[1] == 1)))
    if not live.any():
        return 0.0
    pi_off = _pair_probability(policy, pu, pv, ks, same_unit=False)
    pi_diag = _pair_probability(policy, pu, pv, ks, same_unit=True)
    a, b = term.alpha, term.beta
    uv = u[0] * v[0]
    for i in range(1, u.shape[0]):
        uv += u[i] * v[i]
    res = 0.0
    if a != 0.0:
        if np.any(live & (pi_off == 0)):
            raise ValidationError("off-diagonal pair never jointly observed")
        w = np.where(live, a / np.where(pi_off > 0, pi_off, 1.0), 0.0)
        res = res + (su * sv - uv) @ w
    if a + b != 0.0:
        if np.any(live & (pi_diag == 0)):
            raise ValidationError("same-unit pair never jointly observed; term is not estimable")
        w = np.where(live, (a + b) / np.where(pi_diag > 0, pi_diag, 1.0), 0.0)
        res = res + uv @ w
    return res


def conservative_variance_batch(design: Design, p: int, policy: AssignmentPolicy, Q, Z, Y,
                                names: Sequence[str] = ESTIMANDS) -> np.ndarray:
    """Estimates for a batch of trajectories -> (..., len(names))."""
    if abs(policy.r_q1 - 0.5) > 1e-15:
        raise ValidationError("block variance formulas require r_q1 = r_q2 = 0.5")
    obs = observed_blocks_batch(design, p, policy, Q, Z, Y)
    cache = {}
    return np.stack([np.asarray(_estimate_bound(obs, policy, n, cache), dtype=float) for n in names], axis=-1)


# Intervals, pooling and the order test

def confidence_interval(point: float, var_est: float, alpha: float = 0.05) -> tuple[float, float]:
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")
    half = norm_ppf(1.0 - alpha / 2.0) * math.sqrt(max(float(var_est), 0.0))
    return point - half, point + half


def multicenter_variance(var_ests: Sequence[float], weights: Sequence[float]) -> float:
    v = np.asarray(var_ests, dtype=float)
    w = np.asarray(weights, dtype=float)
    if v.shape != w.shape:
        raise ValidationError(f"got {v.size} variances for {w.size} weights")
    return float(np.sum(w**2 * v))


COMBINE_RULES = ("any", "bonferroni")


@dataclass(frozen=True)
class OrderTestResult:
    statistics: dict
    p_values: dict
    alpha: float
    critical_value: float
    reject: dict
    reject_overall: bool
    combine: str = "any"
    overall_critical_value: float | None = None

    def to_dict(self) -> dict:
        return {
            "statistics": self.statistics,
            "p_values": self.p_values,
            "alpha": self.alpha,
            "critical_value": self.critical_value,
            "reject": self.reject,
            "reject_overall": self.reject_overall,
            "combine": self.combine,
            "overall_critical_value": self.overall_critical_value,
        }


def wald_statistic(est_p1: float, est_p2: float, var_p1: float, var_p2: float) -> float:
    v = float(var_p1) + float(var_p2)
    if not v > 0:
        raise ValidationError("order test needs var_p1 + var_p2 > 0")
    return (float(est_p1) - float(est_p2)) / math.sqrt(v)


def order_wald_test(est_p1: dict, est_p2: dict, var_p1: dict, var_p2: dict, alpha: float = 0.05,
                    combine: str = "any") -> OrderTestResult:
    """Wald comparisons of the four estimands from designs built for p1 < p2.

    Each argument maps estimand name to a value. Each statistic is tested
    at level alpha. ``combine="any"`` rejects H0 (m <= p1) when any
    statistic exceeds its critical value; its family-wise size exceeds
    alpha. ``combine="bonferroni"`` tests each at alpha / k instead.
    """
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")
    if combine not in COMBINE_RULES:
        raise ValidationError(f"combine must be one of {COMBINE_RULES}, got {combine!r}")
    missing = set(est_p1) ^ set(est_p2) | set(est_p1) ^ set(var_p1) | set(est_p1) ^ set(var_p2)
    if missing:
        raise ValidationError(f"estimand sets differ: {sorted(missing)}")
    crit = norm_ppf(1.0 - alpha / 2.0)
    k = len(est_p1)
    crit_all = crit if combine == "any" else norm_ppf(1.0 - alpha / (2.0 * k))
    stats, pv, rej = {}, {}, {}
    for name in est_p1:
        s = wald_statistic(est_p1[name], est_p2[name], max(var_p1[name], 0.0), max(var_p2[name], 0.0))
        stats[name] = s
        pv[name] = two_sided_pvalue(s)
        rej[name] = abs(s) > crit
    overall = any(abs(s) > crit_all for s in stats.values())
    return OrderTestResult(stats, pv, alpha, crit, rej, overall, combine, crit_all)
