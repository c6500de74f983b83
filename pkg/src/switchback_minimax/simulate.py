"""Monte Carlo protocols for risk, inference, order testing and normality.

Potential outcomes stay fixed within a scenario and only the assignment
is redrawn. Replication r of experiment e in center g draws from
``SeedSequence(seed, spawn_key=(e, g, r))``, so results do not depend on
how replications are split across workers. Replications run in fixed
chunks and are stacked into arrays, which the estimators consume in one
batched call.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from multiprocessing import get_context
from pathlib import Path
from typing import Any

import numpy as np
from scipy import stats

from ._normal import norm_ppf
from .design import DecisionContext, Design, make_standard_design
from .engine import AssignmentPolicy, Model1, Model2, Model2Spec, derive_seed, draw_assignment
from .estimation import ESTIMANDS, ht_unit_contrasts, true_effects, constant_path_tables
from .exceptions import InfeasibleError, ValidationError
from .minimax import ExperimentParams, closed_form_design, optimal_design, worst_case_report
from .variance import (
    block_decompose,
    block_structure,
    conservative_variance_batch,
    exact_variance,
    order_wald_test,
)

SCHEMA_VERSION = 1
PROTOCOLS = ("risk_table", "inference_table", "order_figure", "normality_qq")
DEFAULT_PSI = ((1.0, 0.0), (0.0, 1.0), (0.5, 0.5))
DESIGN_NAMES = ("star1", "star2", "independent", "blocked", "optimal", "closed_form")


@dataclass(frozen=True)
class ModelConfig:
    type: str = "model1"
    B: float = 1.0
    m: int = 2
    noise_sd: float = 1.0
    delta_q: tuple | None = None
    delta_z: tuple | None = None
    delta_qz: tuple | None = None
    alpha: str = "log"
    seed: int = 0

    def __post_init__(self):
        if self.type not in ("model1", "model2"):
            raise ValidationError(f"model.type must be 'model1' or 'model2', got {self.type!r}")
        if self.alpha not in ("log", "zero"):
            raise ValidationError("model.alpha must be 'log' or 'zero'")

    @property
    def order(self) -> int:
        return 0 if self.type == "model1" else self.m

    def build(self, N: int, T: int, q1: float, center: int = 0):
        if self.type == "model1":
            return Model1(self.B)
        spec = Model2Spec(
            m=self.m,
            alpha=np.log if self.alpha == "log" else np.zeros_like,
            delta_q=self.delta_q,
            delta_z=self.delta_z,
            delta_qz=self.delta_qz,
            noise_sd=self.noise_sd,
        )
        return Model2(spec, N, T, q1, seed=derive_seed(self.seed, center))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("delta_q", "delta_z", "delta_qz"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d


@dataclass(frozen=True)
class ScenarioConfig:
    """A Monte Carlo scenario; see ``docs/scenario_schema.md``."""

    protocol: str
    N: int
    T: int
    p: int
    replications: int
    seed: int
    q1: float = 0.6
    q2: float = 0.4
    r_q1: float = 0.5
    designs: tuple = ()
    model: ModelConfig = field(default_factory=ModelConfig)
    p_est: int | None = None
    centers: int = 1
    alpha: float = 0.05
    psi: tuple = DEFAULT_PSI
    p1: int | None = None
    p2: int | None = None
    grid: tuple = ()
    chunk_size: int = 50
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValidationError(f"unsupported schema_version {self.schema_version}; expected {SCHEMA_VERSION}")
        if self.protocol not in PROTOCOLS:
            raise ValidationError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.replications < 1:
            raise ValidationError("replications must be >= 1")
        if self.centers < 1 or self.N % self.centers:
            raise ValidationError(f"N={self.N} must split evenly over centers={self.centers}")
        if self.chunk_size < 1:
            raise ValidationError("chunk_size must be >= 1")
        if self.protocol == "order_figure" and (self.p1 is None or self.p2 is None or self.p1 >= self.p2):
            raise ValidationError("order_figure needs p1 < p2")
        if not self.designs:
            default = ("star1", "star2", "independent", "blocked") if self.protocol == "risk_table" else ("star1",)
            object.__setattr__(self, "designs", default)
        for d in self.designs:
            if isinstance(d, str) and d not in DESIGN_NAMES:
                raise ValidationError(f"unknown design name {d!r}; expected one of {DESIGN_NAMES}")
        ExperimentParams(self.N, self.T, self.p, self.q1, self.q2, self.r_q1)

    @property
    def estimation_order(self) -> int:
        return self.p if self.p_est is None else self.p_est

    def params(self, **changes) -> ExperimentParams:
        base = dict(N=self.N, T=self.T, p=self.p, q1=self.q1, q2=self.q2, r_q1=self.r_q1)
        base.update(changes)
        return ExperimentParams(**base)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        if not isinstance(data, dict):
            raise ValidationError("scenario must be a JSON object")
        if "schema_version" not in data:
            raise ValidationError("scenario is missing field 'schema_version'")
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ValidationError(f"unknown scenario fields: {sorted(extra)}")
        d = dict(data)
        if "model" in d:
            m = dict(d["model"])
            for k in ("delta_q", "delta_z", "delta_qz"):
                if m.get(k) is not None:
                    m[k] = tuple(m[k])
            try:
                d["model"] = ModelConfig(**m)
            except TypeError as exc:
                raise ValidationError(f"bad model spec: {exc}") from None
        for k in ("psi", "grid"):
            if k in d:
                d[k] = tuple(tuple(x) if isinstance(x, list) else x for x in d[k])
        if "grid" in d:
            d["grid"] = tuple(dict(g) for g in d["grid"])
        if "designs" in d:
            d["designs"] = tuple(x if isinstance(x, str) else dict(x) for x in d["designs"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(f"bad scenario: {exc}") from None

    @classmethod
    def from_json(cls, path: str | Path) -> "ScenarioConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"scenario file is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["model"] = self.model.to_dict()
        d["designs"] = [x if isinstance(x, str) else dict(x) for x in self.designs]
        d["psi"] = [list(x) for x in self.psi]
        d["grid"] = [dict(g) for g in self.grid]
        return d


def resolve_design(spec, params: ExperimentParams) -> tuple[str, Design]:
    T, p = params.T, params.p
    if isinstance(spec, dict):
        name = spec.get("name", "custom")
        if "decision_points" in spec:
            return name, Design(T, tuple(spec["decision_points"]))
        spec = spec.get("kind", name)
    else:
        name = spec
    if spec in ("star1", "star2", "independent", "blocked"):
        return name, make_standard_design(spec, T, p)
    if spec == "optimal":
        return name, optimal_design(params).design
    if spec == "closed_form":
        return name, closed_form_design(params).design
    raise ValidationError(f"unknown design {spec!r}")


def default_order_design(T: int, p: int, params: ExperimentParams) -> Design:
    try:
        return make_standard_design("star1", T, p)
    except InfeasibleError:
        return closed_form_design(params.replace(T=T, p=p)).design


# Batched replication core

@dataclass(frozen=True)
class Experiment:
    """One arm of a scenario: a design estimated at order p_est."""

    key: int
    design_points: tuple
    T: int
    p_est: int
    N_g: int
    G: int
    with_var: bool


def _run_chunk(args) -> tuple[np.ndarray, np.ndarray | None]:
    cfg_dict, exp, rep_lo, rep_hi = args
    cfg = ScenarioConfig.from_dict(cfg_dict)
    return _simulate_reps(cfg, exp, range(rep_lo, rep_hi))


def _models(cfg: ScenarioConfig, exp: Experiment):
    return [cfg.model.build(exp.N_g, exp.T, cfg.q1, center=g) for g in range(exp.G)]


def _simulate_reps(cfg: ScenarioConfig, exp: Experiment, reps: range):
    design = Design(exp.T, exp.design_points)
    policy = AssignmentPolicy(design, cfg.q1, cfg.q2, cfg.r_q1)
    n, G, Ng, T = len(reps), exp.G, exp.N_g, exp.T
    Q = np.empty((n, G, T))
    Z = np.empty((n, G, Ng, T), dtype=np.int8)
    for j, rep in enumerate(reps):
        for g in range(G):
            Q[j, g], Z[j, g] = draw_assignment(policy, Ng, derive_seed(cfg.seed, exp.key, g, rep))
    Y = np.empty((n, G, Ng, T))
    for g, model in enumerate(_models(cfg, exp)):
        Y[:, g] = model.realize(Q[:, g], Z[:, g])
    ctx = DecisionContext(design, exp.p_est)
    est = ht_unit_contrasts(Q, Z, Y, ctx, policy).mean(axis=-2)  # (n, G, 4)
    var = conservative_variance_batch(design, exp.p_est, policy, Q, Z, Y) if exp.with_var else None
    return est, var


def run_experiment(cfg: ScenarioConfig, exp: Experiment, workers: int = 1):
    """Center-level estimates (R, G, 4) and variance estimates for all replications."""
    R, size = cfg.replications, cfg.chunk_size
    tasks = [(cfg.to_dict(), exp, lo, min(lo + size, R)) for lo in range(0, R, size)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("fork")) as pool:
            parts = list(pool.map(_run_chunk, tasks))
    else:
        parts = [_run_chunk(t) for t in tasks]
    est = np.concatenate([p[0] for p in parts])
    var = np.concatenate([p[1] for p in parts]) if exp.with_var else None
    return est, var


def _truth(cfg: ScenarioConfig, exp: Experiment) -> np.ndarray:
    """Per-center constant-path estimands (G, 4)."""
    out = []
    for model in _models(cfg, exp):
        te = true_effects(model, exp.N_g, exp.T, exp.p_est, cfg.q1, cfg.q2)
        out.append([te[n] for n in ESTIMANDS])
    return np.array(out)


def _exact_var(cfg: ScenarioConfig, exp: Experiment, design: Design) -> list | None:
    """Pooled exact variance when the block formulas apply, else None."""
    if exp.p_est < cfg.model.order or cfg.r_q1 != 0.5 or exp.p_est < 1:
        return None
    try:
        block_structure(design, exp.p_est)
    except ValidationError:
        return None
    params = cfg.params(N=exp.N_g, T=exp.T, p=exp.p_est)
    w = 1.0 / exp.G
    total = np.zeros(len(ESTIMANDS))
    for model in _models(cfg, exp):
        blocks = block_decompose(design, exp.p_est, constant_path_tables(model, exp.N_g, exp.T, cfg.q1, cfg.q2))
        total += w**2 * np.array([exact_variance(blocks, params, n) for n in ESTIMANDS])
    return total.tolist()


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    se = float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else float("nan")
    return float(x.mean()), se


# Protocols

@dataclass
class SimReport:
    protocol: str
    config: dict
    results: Any
    schema_version: int = SCHEMA_VERSION
    extra_csv: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "protocol": self.protocol,
                "config": self.config, "results": self.results}

    def to_json(self) -> str:
        return json.dumps(_clean(self.to_dict()), sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        rows = _rows(self.protocol, self.results)
        buf = io.StringIO()
        cols = ["schema_version", "protocol"] + list(rows[0].keys()) if rows else ["schema_version", "protocol"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([self.schema_version, self.protocol] + [_fmt(r[c]) for c in cols[2:]])
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _rows(protocol: str, results) -> list[dict]:
    rows = []
    if protocol == "risk_table":
        for d in results["designs"]:
            for r in d["risks"]:
                rows.append({"design": d["name"], "psi_d": r["psi_d"], "psi_s": r["psi_s"], "risk": r["risk"],
                             "se": r["se"], "analytic": r["analytic"]})
    elif protocol == "inference_table":
        for name, r in results["estimands"].items():
            rows.append({"estimand": name, **{k: r[k] for k in ("value", "bias", "bias_se", "var", "mean_var_est",
                                                              "mean_var_est_se", "exact_var", "cp", "cp_se")}})
    elif protocol == "order_figure":
        for g in results["grid"]:
            for name in ESTIMANDS:
                rows.append({"N": g["N"], "T": g["T"], "centers": g["centers"], "estimand": name,
                             "mean_p_value": g["mean_p_value"][name], "p_value_se": g["p_value_se"][name],
                             "reject_rate": g["reject_rate"][name], "reject_rate_overall": g["reject_rate_overall"],
                             "reject_rate_bonferroni": g["reject_rate_bonferroni"]})
    else:
        for name, r in results["estimands"].items():
            rows.append({"estimand": name, **{k: r[k] for k in ("mean", "sd", "skewness", "excess_kurtosis", "ks")}})
    return rows


def mc_risk(cfg: ScenarioConfig, workers: int = 1) -> SimReport:
    """MC risk of each design under each psi weighting, with MC standard errors."""
    params = cfg.params()
    p_est = cfg.estimation_order
    out = []
    for e, spec in enumerate(cfg.designs):
        name, design = resolve_design(spec, params)
        if design.horizon != cfg.T:
            raise ValidationError(f"design {name} horizon {design.horizon} != T={cfg.T}")
        exp = Experiment(e, design.decision_points, cfg.T, p_est, cfg.N // cfg.centers, cfg.centers, False)
        est, _ = run_experiment(cfg, exp, workers)
        pooled = est.mean(axis=1)  # equal centers
        truth = _truth(cfg, exp).mean(axis=0)
        sq = (pooled - truth) ** 2  # (R, 4)
        risks = []
        for psi_d, psi_s in cfg.psi:
            loss = psi_d * (sq[:, 0] + sq[:, 1]) + psi_s * (sq[:, 2] + sq[:, 3])
            m, se = _mean_se(loss)
            analytic = None
            if cfg.model.type == "model1" and cfg.centers == 1:
                rep = worst_case_report(design, params.replace(psi_d=psi_d, psi_s=psi_s, B=cfg.model.B, p=p_est))
                analytic = rep.value
            risks.append({"psi_d": psi_d, "psi_s": psi_s, "risk": m, "se": se, "analytic": analytic})
        out.append({"name": name, "decision_points": list(design.decision_points), "risks": risks})
    selected = {}
    for psi_d, psi_s in cfg.psi:
        try:
            cf = closed_form_design(params.replace(psi_d=psi_d, psi_s=psi_s))
            selected[f"{psi_d},{psi_s}"] = list(cf.design.decision_points)
        except (InfeasibleError, ValidationError):
            selected[f"{psi_d},{psi_s}"] = None
    return SimReport("risk_table", cfg.to_dict(), {"designs": out, "closed_form_selection": selected})


def mc_inference(cfg: ScenarioConfig, workers: int = 1) -> SimReport:
    """Bias, variance, mean variance estimate and CI coverage per estimand."""
    params = cfg.params()
    name, design = resolve_design(cfg.designs[0], params)
    p_est = cfg.estimation_order
    G = cfg.centers
    exp = Experiment(0, design.decision_points, cfg.T, p_est, cfg.N // G, G, True)
    est, var = run_experiment(cfg, exp, workers)
    w = 1.0 / G
    pooled = est.sum(axis=1) * w
    pooled_var = var.sum(axis=1) * w**2
    truth = _truth(cfg, exp).mean(axis=0)
    exact = _exact_var(cfg, exp, design)
    crit = norm_ppf(1 - cfg.alpha / 2)
    half = crit * np.sqrt(np.maximum(pooled_var, 0.0))
    covered = (pooled - half <= truth) & (truth <= pooled + half)
    res = {}
    for k, n in enumerate(ESTIMANDS):
        bias, bias_se = _mean_se(pooled[:, k] - truth[k])
        mv, mv_se = _mean_se(pooled_var[:, k])
        cp, cp_se = _mean_se(covered[:, k].astype(float))
        res[n] = {
            "value": float(truth[k]),
            "bias": bias,
            "bias_se": bias_se,
            "var": float(pooled[:, k].var(ddof=1)) if len(pooled) > 1 else float("nan"),
            "mean_var_est": mv,
            "mean_var_est_se": mv_se,
            "exact_var": None if exact is None else exact[k],
            "cp": cp,
            "cp_se": cp_se,
            "negative_var_est_rate": float(np.mean(pooled_var[:, k] < 0)),
        }
    return SimReport("inference_table", cfg.to_dict(),
                     {"design": {"name": name, "decision_points": list(design.decision_points)}, "estimands": res})


def mc_order(cfg: ScenarioConfig, workers: int = 1) -> SimReport:
    """Wald tests of H0: m <= p1 from paired experiments designed for p1 and p2."""
    grid = cfg.grid or ({"N": cfg.N, "T": cfg.T, "centers": cfg.centers},)
    out = []
    for gi, g in enumerate(grid):
        N, T, G = int(g["N"]), int(g["T"]), int(g.get("centers", 1))
        if N % G:
            raise ValidationError(f"grid entry N={N} must split evenly over {G} centers")
        arms = []
        for j, p in enumerate((cfg.p1, cfg.p2)):
            params = cfg.params(N=N, T=T, p=p)
            design = default_order_design(T, p, params)
            exp = Experiment(2 * gi + j, design.decision_points, T, p, N // G, G, True)
            est, var = run_experiment(cfg, exp, workers)
            arms.append((est.mean(axis=1), var.sum(axis=1) / G**2, design))
        (e1, v1, d1), (e2, v2, d2) = arms
        pvals = np.empty_like(e1)
        rejects = np.empty(e1.shape, dtype=bool)
        bonf = np.empty(len(e1), dtype=bool)
        for r in range(len(e1)):
            args = (dict(zip(ESTIMANDS, e1[r])), dict(zip(ESTIMANDS, e2[r])),
                    dict(zip(ESTIMANDS, v1[r])), dict(zip(ESTIMANDS, v2[r])), cfg.alpha)
            res = order_wald_test(*args)
            pvals[r] = [res.p_values[n] for n in ESTIMANDS]
            rejects[r] = [res.reject[n] for n in ESTIMANDS]
            bonf[r] = order_wald_test(*args, combine="bonferroni").reject_overall
        overall = rejects.any(axis=1)
        mp = {n: _mean_se(pvals[:, k]) for k, n in enumerate(ESTIMANDS)}
        out.append({
            "N": N, "T": T, "centers": G,
            "design_p1": list(d1.decision_points), "design_p2": list(d2.decision_points),
            "mean_p_value": {n: mp[n][0] for n in ESTIMANDS},
            "p_value_se": {n: mp[n][1] for n in ESTIMANDS},
            "reject_rate": {n: float(rejects[:, k].mean()) for k, n in enumerate(ESTIMANDS)},
            "reject_rate_overall": float(overall.mean()),
            "reject_rate_overall_se": _mean_se(overall.astype(float))[1],
            "reject_rate_bonferroni": float(bonf.mean()),
        })
    return SimReport("order_figure", cfg.to_dict(), {"p1": cfg.p1, "p2": cfg.p2, "grid": out})


def normality_diagnostics(samples: np.ndarray) -> dict:
    """Standardised skewness, excess kurtosis and KS distance to N(0, 1)."""
    x = np.asarray(samples, dtype=float)
    if x.size < 3:
        raise ValidationError("need at least 3 samples")
    sd = x.std(ddof=1)
    zs = (x - x.mean()) / sd if sd > 0 else np.zeros_like(x)
    ks = stats.kstest(zs, "norm")
    return {
        "mean": float(x.mean()),
        "sd": float(sd),
        "skewness": float(stats.skew(x)),
        "excess_kurtosis": float(stats.kurtosis(x)),
        "ks": float(ks.statistic),
        "ks_p_value": float(ks.pvalue),
    }


def qq_pairs(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.sort(np.asarray(samples, dtype=float))
    zs = (x - x.mean()) / x.std(ddof=1)
    n = len(x)
    theo = np.array([norm_ppf((i + 0.5) / n) for i in range(n)])
    return theo, zs


def mc_normality(cfg: ScenarioConfig, workers: int = 1) -> SimReport:
    params = cfg.params()
    name, design = resolve_design(cfg.designs[0], params)
    exp = Experiment(0, design.decision_points, cfg.T, cfg.estimation_order, cfg.N // cfg.centers, cfg.centers, False)
    est, _ = run_experiment(cfg, exp, workers)
    pooled = est.mean(axis=1)
    res = {n: normality_diagnostics(pooled[:, k]) for k, n in enumerate(ESTIMANDS)}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["schema_version", "estimand", "theoretical", "sample"])
    for k, n in enumerate(ESTIMANDS):
        th, sm = qq_pairs(pooled[:, k])
        for a, b in zip(th, sm):
            w.writerow([SCHEMA_VERSION, n, repr(float(a)), repr(float(b))])
    return SimReport("normality_qq", cfg.to_dict(),
                     {"design": {"name": name, "decision_points": list(design.decision_points)},
                      "model_order": cfg.model.order, "p_est": cfg.estimation_order, "estimands": res},
                     extra_csv={"qq": buf.getvalue()})


def run_scenario(cfg: ScenarioConfig, workers: int = 1) -> SimReport:
    fn = {"risk_table": mc_risk, "inference_table": mc_inference,
          "order_figure": mc_order, "normality_qq": mc_normality}[cfg.protocol]
    return fn(cfg, workers)
