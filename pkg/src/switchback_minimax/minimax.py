"""Worst-case risk coefficients and minimax design search.

The worst-case objective of a design depends on the design only through
its overlap histogram: each single period or ordered pair of periods whose
governing sets share ``j`` decision points contributes one worst-case
second moment evaluated at exposure level ``j``. Two evaluation routes are
provided and kept independent:

* :func:`worst_case_objective_general` sums those moments over the
  histogram for any design and any selection probability;
* :func:`worst_case_objective_closed` uses the gap-length closed form,
  valid for feasible designs at ``r = 0.5``.

:func:`optimal_design` scans end length ``a`` and middle length ``b``
with the closed form specialised to two interval lengths, which is
O(T^2) overall.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import optimize

from .design import (
    DecisionContext,
    Design,
    JHistogram,
    design_from_ab,
    make_standard_design,
    validate_candidate,
)
from .exceptions import InfeasibleError, RegimeIndeterminateError, ValidationError


def _is_prob(x) -> bool:
    return isinstance(x, (int, float, np.floating)) and 0.0 < float(x) < 1.0


@dataclass(frozen=True)
class ExperimentParams:
    """Experiment size, probabilities and risk weights.

    ``psi_s`` defaults to ``1 - psi_d``.
    """

    N: int
    T: int
    p: int
    q1: float = 0.6
    q2: float = 0.4
    r_q1: float = 0.5
    psi_d: float = 0.5
    psi_s: float | None = None
    B: float = 1.0

    def __post_init__(self):
        if self.psi_s is None:
            object.__setattr__(self, "psi_s", 1.0 - float(self.psi_d))
        for name in ("N", "T"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ValidationError(f"{name} must be a positive integer, got {v!r}")
        if isinstance(self.p, bool) or not isinstance(self.p, (int, np.integer)) or self.p < 0:
            raise ValidationError(f"p must be a non-negative integer, got {self.p!r}")
        for name in ("q1", "q2", "r_q1"):
            if not _is_prob(getattr(self, name)):
                raise ValidationError(f"{name} must lie strictly in (0, 1), got {getattr(self, name)!r}")
        if self.q1 == self.q2:
            raise ValidationError("q1 and q2 must differ")
        if self.psi_d < 0 or self.psi_s < 0 or abs(self.psi_d + self.psi_s - 1.0) > 1e-12:
            raise ValidationError(
                f"psi_d and psi_s must be non-negative and sum to 1, got {self.psi_d}, {self.psi_s}"
            )
        if not self.B > 0:
            raise ValidationError(f"B must be positive, got {self.B!r}")

    @property
    def r_q2(self) -> float:
        return 1.0 - self.r_q1

    def r_of(self, q: float) -> float:
        return self.r_q1 if q == self.q1 else self.r_q2

    def replace(self, **changes) -> "ExperimentParams":
        data = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if "psi_d" in changes and "psi_s" not in changes:
            data["psi_s"] = None
        data.update(changes)
        return ExperimentParams(**data)


def unit_prob(q: float, z: int) -> float:
    """P(Z = z | Q = q): q for treatment, 1 - q for control."""
    return q if z == 1 else 1.0 - q


# Per-level worst-case second moments

def direct_moment(j: int, q: float, r: float, y1: float, y0: float, N: float) -> float:
    """E{D_t D_t'} for constant outcomes when the windows share j decision points.

    ``N = inf`` drops the 1/N terms.
    """
    rj = r ** -j
    within = 2 * rj * y1 * y0 + rj * (q**-j - 1) * y1**2 + rj * ((1 - q) ** -j - 1) * y0**2
    return (rj - 1) * (y1 - y0) ** 2 + (0.0 if math.isinf(N) else within / N)


def spillover_moment(
    j: int, x1: float, x2: float, r1: float, r2: float, y1: float, y2: float, N: float
) -> float:
    """E{S_t S_t'} for constant outcomes; x_k = P(Z = z | Q = q_k)."""
    a, b = r1**-j, r2**-j
    within = a * (x1**-j - 1) * y1**2 + b * (x2**-j - 1) * y2**2
    return (a - 1) * y1**2 + (b - 1) * y2**2 + 2 * y1 * y2 + (0.0 if math.isinf(N) else within / N)


REGIME_LARGE_N = "large_N"  # N >= (1 - max r)^-1: +B / -B corner
REGIME_SMALL_N = "small_N"  # N <= (1 - min r^(p+1))^-1: all +B corner


def regime_for(N: float, r_q1: float, p: int) -> str | None:
    r_max = max(r_q1, 1 - r_q1)
    r_min = min(r_q1, 1 - r_q1)
    if N >= 1.0 / (1.0 - r_max):
        return REGIME_LARGE_N
    if N <= 1.0 / (1.0 - r_min ** (p + 1)):
        return REGIME_SMALL_N
    return None


def level_cost(j: int, params: ExperimentParams, regime: str, r_q1: float | None = None,
               N: float | None = None) -> float:
    """psi-weighted worst-case moment at exposure level j (B = 1)."""
    r1 = params.r_q1 if r_q1 is None else r_q1
    r2 = 1.0 - r1
    N = params.N if N is None else N
    y0 = -1.0 if regime == REGIME_LARGE_N else 1.0
    d = direct_moment(j, params.q1, r1, 1.0, y0, N) + direct_moment(j, params.q2, r2, 1.0, y0, N)
    s = 0.0
    for z in (1, 0):
        y = 1.0 if z == 1 else y0
        s += spillover_moment(j, unit_prob(params.q1, z), unit_prob(params.q2, z), r1, r2, y, y, N)
    return params.psi_d * d + params.psi_s * s


@dataclass(frozen=True)
class WorstCaseTerms:
    """alpha_J(q), beta_J(z) at r = 0.5 and zeta_j at the params' r (B = 1)."""

    alpha: dict
    beta: dict
    zeta: dict


def worst_case_terms(params: ExperimentParams, max_j: int | None = None) -> WorstCaseTerms:
    max_j = params.p + 1 if max_j is None else max_j
    regime = REGIME_LARGE_N if params.N >= 2 else REGIME_SMALL_N
    y0 = -1.0 if regime == REGIME_LARGE_N else 1.0
    alpha, beta, zeta = {}, {}, {}
    r1, r2 = params.r_q1, params.r_q2
    for j in range(1, max_j + 1):
        alpha[j] = {q: direct_moment(j, q, 0.5, 1.0, y0, params.N) for q in (params.q1, params.q2)}
        beta[j] = {
            z: spillover_moment(j, unit_prob(params.q1, z), unit_prob(params.q2, z), 0.5, 0.5,
                                1.0, 1.0, params.N)
            for z in (1, 0)
        }
        zeta[j] = sum(
            r**-j * (q**-j + (1 - q) ** -j) for q, r in ((params.q1, r1), (params.q2, r2))
        )
    return WorstCaseTerms(alpha, beta, zeta)


@dataclass(frozen=True)
class GammaSet:
    gamma1_d: float
    gamma2_d: float
    gamma3_d: float
    gamma1_s: float
    gamma2_s: float
    gamma3_s: float
    gamma1_star: float
    gamma2_star: float
    gamma3_star: float
    theta_star: float


def gamma_coefficients(params: ExperimentParams) -> GammaSet:
    """Closed-form risk coefficients at r = 0.5, including the 1/(T-p)^2 factor.

    gamma_1 = m_1, gamma_2 = m_2 - 2 m_1, gamma_3 = m_3 - 2 m_2 + m_1 where m_J
    is the summed worst-case moment at exposure level J.
    """
    if params.p >= params.T:
        raise ValidationError(f"p={params.p} >= T={params.T}: no estimable periods")
    terms = worst_case_terms(params, max_j=3)
    scale = 1.0 / (params.T - params.p) ** 2
    a = {j: sum(terms.alpha[j].values()) for j in (1, 2, 3)}
    b = {j: sum(terms.beta[j].values()) for j in (1, 2, 3)}

    def trio(m):
        return (m[1] * scale, (m[2] - 2 * m[1]) * scale, (m[3] - 2 * m[2] + m[1]) * scale)

    g1d, g2d, g3d = trio(a)
    g1s, g2s, g3s = trio(b)
    pd, ps = params.psi_d, params.psi_s
    g1 = pd * g1d + ps * g1s
    g2 = pd * g2d + ps * g2s
    g3 = pd * g3d + ps * g3s
    return GammaSet(g1d, g2d, g3d, g1s, g2s, g3s, g1, g2, g3, g2 / g1)


def theta_star_formula(params: ExperimentParams) -> float:
    """gamma2*/gamma1* via the simplified ratio (independent of the gamma route)."""
    N, pd = params.N, params.psi_d
    xs = [params.q1, 1 - params.q1, params.q2, 1 - params.q2]
    big = N >= 2
    num = 4 * N * pd * big + sum(2 * x**-2 - 2 * x**-1 for x in xs)
    den = (4 * N - 4 - 4 * pd) * big + sum(x**-1 for x in xs)
    return num / den


# Objectives

def _gap_terms(design: Design, p: int) -> tuple[float, float, float]:
    """Coefficients multiplying gamma1*, gamma2*, gamma3* in the closed form."""
    gaps = design.gaps()
    pts = design.decision_points
    L = design.L
    c1 = float(np.sum(gaps.astype(float) ** 2)) + (L - 1) * p**2 + 2 * p * (pts[-1] - pts[1])
    c2 = float(L * p**2)
    middle = np.diff(np.asarray(pts[1:]))
    c3 = float(np.sum(np.maximum(p - middle, 0).astype(float) ** 2))
    return c1, c2, c3


def worst_case_objective_closed(design: Design, params: ExperimentParams) -> float:
    """Gap-length closed form of the worst-case objective (r = 0.5, feasible designs)."""
    if design.horizon != params.T:
        raise ValidationError(f"design horizon {design.horizon} != T={params.T}")
    if params.r_q1 != 0.5:
        raise ValidationError("the closed form assumes r_q1 = r_q2 = 0.5")
    if not validate_candidate(design, params.p):
        raise InfeasibleError(
            "design violates the feasibility constraints (t_1 >= p+2, t_L <= T-p, "
            "t_{l+1} - t_{l-1} >= p); use worst_case_objective_general"
        )
    g = gamma_coefficients(params)
    c1, c2, c3 = _gap_terms(design, params.p)
    return (c1 * g.gamma1_star + c2 * g.gamma2_star + c3 * g.gamma3_star) * params.B**2


@dataclass(frozen=True)
class WorstCaseReport:
    value: float | None
    regime: str | None
    candidates: dict


def worst_case_report(design: Design, params: ExperimentParams,
                      hist: JHistogram | None = None) -> WorstCaseReport:
    """Histogram form of the worst-case objective with the regime used."""
    if design.horizon != params.T:
        raise ValidationError(f"design horizon {design.horizon} != T={params.T}")
    if hist is None:
        hist = DecisionContext(design, params.p).j_histogram()
    return _report_from_hist(hist, params)


def _report_from_hist(hist: JHistogram, params: ExperimentParams) -> WorstCaseReport:
    scale = params.B**2 / (params.T - params.p) ** 2
    cands = {}
    for regime in (REGIME_LARGE_N, REGIME_SMALL_N):
        cands[regime] = scale * sum(
            count * level_cost(j, params, regime) for j, count in hist.counts.items() if count
        )
    regime = regime_for(params.N, params.r_q1, params.p)
    return WorstCaseReport(cands[regime] if regime else None, regime, cands)


def worst_case_objective_general(design: Design, params: ExperimentParams,
                                 hist: JHistogram | None = None) -> float:
    """max over bounded outcome tables of the psi-weighted risk, via the overlap histogram."""
    rep = worst_case_report(design, params, hist)
    if rep.regime is None:
        raise RegimeIndeterminateError(
            f"N={params.N} lies between the two worst-case regimes for r_q1={params.r_q1}",
            rep.candidates,
        )
    return rep.value


# Design search

EQUAL_ENDS = "equal_ends"
UNEQUAL_ENDS = "unequal_ends"


@dataclass(frozen=True)
class DesignSearchResult:
    a_star: int
    b_star: int
    case_tag: str
    L: int
    objective: float
    design: Design
    theta_star: float
    branch: str = ""
    scaled_objective: float = field(default=float("nan"))


def _pen(p: int, x: int) -> int:
    return max(p - x, 0) ** 2


def optimal_design(params: ExperimentParams) -> DesignSearchResult:
    """Minimise the closed-form objective over end length a and middle length b.

    For each (a, b) and end case the middle of length R holds M intervals of
    length b or b + 1. The objective is linear in M, so only the extreme
    counts floor(R/b) and ceil(R/(b+1)) can be optimal; the sign of the M
    coefficient picks one. For b >= p that sign test is exactly
    ``theta* <= b(b+1)/p^2 - 1``.
    """
    T, p = params.T, params.p
    if p == 0:
        d = make_standard_design("independent", T, 0)
        g = gamma_coefficients(params)
        # every window is a single period: objective T * gamma1* (also for T = 1)
        value = T * g.gamma1_star * params.B**2
        return DesignSearchResult(1, 1, EQUAL_ENDS, d.L, value, d, g.theta_star, "independent", value)
    if T < 2 * (p + 1):
        raise InfeasibleError(f"horizon too short: T={T} < 2(p+1)={2 * (p + 1)}")
    g = gamma_coefficients(params)
    theta = g.theta_star
    rho = g.gamma3_star / g.gamma1_star
    p2 = p * p
    best = None  # (value, b, a, case_index, M, branch)
    b_min = max((p + 1) // 2, 1)
    for b in range(b_min, T + 1):
        coef = (1 + theta) * p2 - b * (b + 1) + rho * ((b + 1) * _pen(p, b) - b * _pen(p, b + 1))
        for a in range(p + 1, T // 2 + 1):
            for case_idx, extra in ((0, 0), (1, 1)):
                R = T - 2 * a - extra
                if R < 0:
                    continue
                if R == 0:
                    if b != b_min:
                        continue
                    M, branch = 0, "single"
                else:
                    m_hi, m_lo = R // b, -(-R // (b + 1))
                    if m_lo > m_hi or m_hi < 1:
                        continue
                    if coef <= 0:
                        M, branch = m_hi, "floor"
                    else:
                        M, branch = m_lo, "ceil"
                ends = a * a + (a + extra) ** 2
                pen = (M * (b + 1) - R) * _pen(p, b) + (R - M * b) * _pen(p, b + 1)
                value = (ends + R * (2 * b + 1 + 2 * p) + theta * p2
                         + M * ((1 + theta) * p2 - b * (b + 1)) + rho * pen)
                if best is None or value < best[0] - 1e-12 * abs(best[0]):
                    best = (value, b, a, case_idx, M, branch)
    if best is None:
        raise InfeasibleError(f"horizon too short: no feasible (a, b) for T={T}, p={p}")
    value, b, a, case_idx, M, branch = best
    design = design_from_ab(T, a, b, M, unequal_ends=bool(case_idx))
    middle = design.gaps()[1:-1]
    if len(middle) and min(middle) == b + 1:
        # every middle interval has length b + 1: report that length as b
        b, branch = b + 1, "floor"
    objective = worst_case_objective_closed(design, params)
    return DesignSearchResult(a, b, (EQUAL_ENDS, UNEQUAL_ENDS)[case_idx], design.L, objective,
                              design, theta, branch, value * g.gamma1_star * params.B**2)


class ClosedFormDesign(NamedTuple):
    design: Design
    rule: str
    fallback: bool


def closed_form_design(params: ExperimentParams) -> ClosedFormDesign:
    """Pick star1 / star2 from the theta* regime, else defer to the search."""
    T, p = params.T, params.p
    if p == 0:
        return ClosedFormDesign(make_standard_design("independent", T, 0), "independent", False)
    theta = gamma_coefficients(params).theta_star
    if theta <= 1.0 / p:
        kind = "star1"
    elif theta <= (3 * p + 2) / p**2:
        kind = "star2"
    else:
        return ClosedFormDesign(optimal_design(params).design, "search", False)
    try:
        return ClosedFormDesign(make_standard_design(kind, T, p), kind, False)
    except InfeasibleError:
        return ClosedFormDesign(optimal_design(params).design, "search", True)


def corollary_intervals(theta: float, p: int, b: float | None = None) -> dict:
    """Intervals known to contain b* and (given b) a*."""
    root = math.sqrt(1 + 4 * (theta + 1) * p * p)
    b_lo, b_hi = (-1 + root) / 2, (1 + root) / 2
    out = {"b": (b_lo, b_hi)}
    if b is not None:
        centre = 2 * p + b + (theta + 1) * p * p / b
        out["a"] = ((centre - 1) / 2, (centre + 1) / 2)
    return out


# Selection probability

@dataclass(frozen=True)
class SelectionResult:
    r_q1: float
    r_q2: float
    regime: str | None
    candidates: dict


def _selection_objective(r1: float, params: ExperimentParams, counts: dict, regime: str,
                         N: float) -> float:
    return sum(c * level_cost(j, params, regime, r_q1=r1, N=N) for j, c in counts.items() if c)


def optimal_selection_probability(params: ExperimentParams, hist: JHistogram,
                                  N_infinite: bool = False, tol: float = 1e-8) -> SelectionResult:
    """Selection probability for q1 minimising the worst-case objective.

    Each regime's objective is scanned on a coarse grid to bracket the
    minimum, then refined by golden-section search.
    """
    if N_infinite or abs(params.q1 + params.q2 - 1.0) < 1e-15:
        return SelectionResult(0.5, 0.5, REGIME_LARGE_N if N_infinite else
                               regime_for(params.N, 0.5, params.p), {})
    counts = {j: c for j, c in hist.counts.items() if c}
    N = params.N
    cands = {}
    grid = np.linspace(0.001, 0.999, 999)
    for regime in (REGIME_LARGE_N, REGIME_SMALL_N):
        vals = np.array([_selection_objective(r, params, counts, regime, N) for r in grid])
        k = int(np.clip(np.argmin(vals), 1, len(grid) - 2))
        res = optimize.minimize_scalar(
            _selection_objective, bracket=(grid[k - 1], grid[k], grid[k + 1]),
            args=(params, counts, regime, N), method="golden", tol=tol,
        )
        r = float(res.x)
        valid = regime_for(N, r, params.p) == regime
        cands[regime] = {"r_q1": r, "objective": float(res.fun), "valid": valid}
    valid = [k for k, v in cands.items() if v["valid"]]
    if len(valid) == 1:
        r = cands[valid[0]]["r_q1"]
        return SelectionResult(r, 1 - r, valid[0], cands)
    return SelectionResult(float("nan"), float("nan"), None, cands)
