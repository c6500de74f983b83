"""Enumeration cross-checks run by ``switchback verify --suite oracle``."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .design import Design, make_standard_design
from .engine import AssignmentPolicy
from .estimation import ESTIMANDS, constant_path_tables
from .minimax import (
    ExperimentParams,
    gamma_coefficients,
    optimal_design,
    theta_star_formula,
    worst_case_objective_closed,
    worst_case_objective_general,
)
from .oracle import (
    Enumeration,
    exact_moments_all,
    exhaustive_design_search,
    random_table,
    worst_case_corner_search,
)
from .variance import block_decompose, conservative_variance_batch, exact_variance, variance_upper_bound

# (T, decision points, N) instances that carry the block structure at p = 1
TINY = ((4, (1, 3), 1), (4, (1, 3), 2), (8, (1, 3, 4, 5, 6, 7), 1), (8, (1, 4, 6), 2))


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _tiny_cases(seed: int):
    rng = np.random.default_rng(seed)
    for T, pts, N in TINY:
        d = Design(T, pts)
        pol = AssignmentPolicy(d)
        table = random_table(N, T, 1, pol.q1, rng)
        yield d, pol, table, N, ExperimentParams(N, T, 1)


def check_probability_mass(seed: int) -> tuple[bool, str]:
    worst = 0.0
    for d, pol, table, N, _ in _tiny_cases(seed):
        worst = max(worst, abs(Enumeration(pol, table, N).total_probability() - 1.0))
    return worst < 1e-12, f"max |sum prob - 1| = {worst:.1e}"


def check_unbiased_and_variance(seed: int) -> tuple[bool, str]:
    bias = gap = 0.0
    slack = float("inf")
    for d, pol, table, N, params in _tiny_cases(seed):
        mom = exact_moments_all(Enumeration(pol, table, N), 1)
        blocks = block_decompose(d, 1, constant_path_tables(table, N, d.horizon, pol.q1, pol.q2))
        for n in ESTIMANDS:
            ev = exact_variance(blocks, params, n)
            bias = max(bias, abs(mom[n].expectation - mom[n].target))
            gap = max(gap, abs(mom[n].variance - ev))
            slack = min(slack, variance_upper_bound(blocks, params, n) - ev)
    ok = bias < 1e-12 and gap < 1e-10 and slack > -1e-12
    return ok, f"max bias {bias:.1e}, max |var - exact| {gap:.1e}, min bound slack {slack:.1e}"


def check_estimator_expectation(seed: int) -> tuple[bool, str]:
    worst = 0.0
    for d, pol, table, N, params in list(_tiny_cases(seed))[:2]:
        enum = Enumeration(pol, table, N)
        m1, _ = enum.moments(lambda Q, Z, Y: conservative_variance_batch(d, 1, pol, Q, Z, Y))
        blocks = block_decompose(d, 1, constant_path_tables(table, N, d.horizon, pol.q1, pol.q2))
        for k, n in enumerate(ESTIMANDS):
            worst = max(worst, abs(m1[k] - variance_upper_bound(blocks, params, n)))
    return worst < 1e-10, f"max |E[estimate] - bound| = {worst:.1e}"


def check_worst_case_corners(seed: int) -> tuple[bool, str]:
    worst = 0.0
    for N in (1, 2):
        params = ExperimentParams(N, 4, 1)
        d = Design(4, (1, 3))
        corner = worst_case_corner_search(d, params).value
        worst = max(worst, abs(corner - worst_case_objective_general(d, params)))
    return worst < 1e-10, f"max |corner max - analytic| = {worst:.1e}"


def check_design_search(seed: int) -> tuple[bool, str]:
    worst, n = 0.0, 0
    for T in (10, 12):
        for p in (1, 2):
            for psi in (0.0, 0.5, 1.0):
                params = ExperimentParams(20, T, p, psi_d=psi)
                brute = exhaustive_design_search(T, params).objective
                found = worst_case_objective_general(optimal_design(params).design, params)
                worst = max(worst, (found - brute) / brute)
                n += 1
    return worst < 1e-9, f"{n} instances, max relative excess {worst:.1e}"


def check_closed_form(seed: int) -> tuple[bool, str]:
    worst = 0.0
    for psi in (0.0, 0.5, 1.0):
        params = ExperimentParams(20, 16, 2, psi_d=psi)
        for kind in ("star1", "star2", "blocked"):
            d = make_standard_design(kind, 16, 2)
            worst = max(worst, abs(worst_case_objective_closed(d, params) - worst_case_objective_general(d, params)))
        g = gamma_coefficients(params)
        worst = max(worst, abs(g.theta_star - theta_star_formula(params)))
    return worst < 1e-10, f"max |closed - general| and theta* gap {worst:.1e}"


CHECKS: dict[str, Callable[[int], tuple[bool, str]]] = {
    "probability_mass": check_probability_mass,
    "unbiasedness_and_exact_variance": check_unbiased_and_variance,
    "conservative_estimator_expectation": check_estimator_expectation,
    "worst_case_corner_search": check_worst_case_corners,
    "design_search_vs_exhaustive": check_design_search,
    "closed_form_vs_general": check_closed_form,
}


def run_oracle_suite(seed: int = 0) -> list[CheckResult]:
    out = []
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        ok, detail = fn(seed)
        out.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return out
