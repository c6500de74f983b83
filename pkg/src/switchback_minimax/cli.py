"""Command-line entry point: ``switchback <subcommand> ...``.

Exit codes: 0 success, 1 usage or validation error, 2 infeasible
instance or indeterminate regime, 3 failed verification.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from . import __version__
from .design import DecisionContext, Design
from .engine import AssignmentPolicy, Model1, Model2, Model2Spec, Trajectory, run_trial
from .estimation import ESTIMANDS, estimate_all
from .exceptions import RegimeIndeterminateError, SwitchbackError, ValidationError
from .minimax import (
    ExperimentParams,
    closed_form_design,
    gamma_coefficients,
    optimal_design,
    optimal_selection_probability,
    worst_case_objective_closed,
    worst_case_report,
)
from .simulate import SCHEMA_VERSION, ScenarioConfig, run_scenario
from .variance import COMBINE_RULES, block_structure, conservative_variance_batch, confidence_interval, order_wald_test

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_VERIFY = 0, 1, 2, 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _params_flags(p: argparse.ArgumentParser, with_psi: bool = True):
    p.add_argument("--N", type=int, required=True, help="number of units")
    p.add_argument("--T", type=int, help="horizon (defaults to the design's horizon where one is given)")
    p.add_argument("--p", type=int, required=True, help="carryover order the design targets")
    p.add_argument("--q1", type=float, default=0.6, help="first treated probability (default 0.6)")
    p.add_argument("--q2", type=float, default=0.4, help="second treated probability (default 0.4)")
    p.add_argument("--r", type=float, default=0.5, help="selection probability of q1 (default 0.5)")
    p.add_argument("--B", type=float, default=1.0, help="outcome bound (default 1)")
    if with_psi:
        p.add_argument("--psi-d", type=float, default=0.5, help="weight on direct-effect risk (default 0.5)")
        p.add_argument("--psi-s", type=float, default=None, help="weight on spillover risk (default 1 - psi-d)")


def _common(p: argparse.ArgumentParser, seed: bool = False, seed_required: bool = False):
    p.add_argument("--format", choices=("json", "csv"), default="json", help="output format (default json)")
    p.add_argument("--out", help="write output here instead of stdout")
    p.add_argument("--quiet", action="store_true", help="suppress progress messages")
    if seed:
        p.add_argument("--seed", type=int, required=seed_required, default=None if seed_required else 0,
                       help="master seed" + (" (required)" if seed_required else " (default 0)"))


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="switchback", description="Minimax switchback designs, estimation and simulation.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("design", help="compute the minimax optimal design")
    _params_flags(d)
    d.add_argument("--method", choices=("optimal", "closed-form"), default="optimal",
                   help="full (a, b) search or the theta* closed-form rule (default optimal)")
    _common(d)

    e = sub.add_parser("evaluate", help="worst-case objective of a design")
    e.add_argument("--design", required=True, help="design JSON file")
    _params_flags(e)
    e.add_argument("--selection", action="store_true", help="also optimise the selection probability of q1")
    _common(e)

    s = sub.add_parser("simulate", help="run a Monte Carlo scenario")
    s.add_argument("--config", required=True, help="scenario JSON file")
    s.add_argument("--workers", type=int, default=1, help="worker processes (output does not depend on this)")
    s.add_argument("--qq-out", help="normality protocol: write quantile pairs CSV here")
    _common(s, seed=True, seed_required=True)

    t = sub.add_parser("trial", help="draw one experiment and write its trajectory CSV")
    t.add_argument("--design", required=True, help="design JSON file")
    t.add_argument("--N", type=int, required=True, help="number of units")
    t.add_argument("--q1", type=float, default=0.6)
    t.add_argument("--q2", type=float, default=0.4)
    t.add_argument("--r", type=float, default=0.5)
    t.add_argument("--model", choices=("model1", "model2"), default="model2")
    t.add_argument("--m", type=int, default=2, help="carryover order of model2")
    t.add_argument("--model-seed", type=int, default=0, help="seed of the frozen model2 noise")
    t.add_argument("--out", help="trajectory CSV path (default stdout)")
    t.add_argument("--quiet", action="store_true")
    t.add_argument("--seed", type=int, required=True, help="assignment seed (required)")

    es = sub.add_parser("estimate", help="HT estimates, variance estimates and CIs from a trajectory")
    es.add_argument("--trajectory", required=True, help="trajectory CSV (unit,time,q,z,y)")
    es.add_argument("--design", required=True, help="design JSON file")
    es.add_argument("--p", type=int, required=True, help="estimation order")
    es.add_argument("--q1", type=float, default=0.6)
    es.add_argument("--q2", type=float, default=0.4)
    es.add_argument("--r", type=float, default=0.5)
    es.add_argument("--alpha", type=float, default=0.05)
    _common(es)

    o = sub.add_parser("order-test", help="Wald test of H0: m <= p1 from two experiments")
    o.add_argument("--trajectory1", required=True)
    o.add_argument("--design1", required=True)
    o.add_argument("--trajectory2", required=True)
    o.add_argument("--design2", required=True)
    o.add_argument("--p1", type=int, required=True)
    o.add_argument("--p2", type=int, required=True)
    o.add_argument("--q1", type=float, default=0.6)
    o.add_argument("--q2", type=float, default=0.4)
    o.add_argument("--r", type=float, default=0.5)
    o.add_argument("--alpha", type=float, default=0.05)
    o.add_argument("--combine", choices=COMBINE_RULES, default="any",
                   help="overall decision: any statistic at alpha, or Bonferroni at alpha/4")
    _common(o)

    v = sub.add_parser("verify", help="run the enumeration oracle battery")
    v.add_argument("--suite", choices=("oracle",), default="oracle")
    _common(v, seed=True)
    return ap


# helpers

def _read_design(path: str) -> Design:
    try:
        return Design.from_json(path)
    except OSError as exc:
        raise ValidationError(f"cannot read design file {path}: {exc.strerror}") from None


def _read_trajectory(path: str) -> Trajectory:
    try:
        return Trajectory.from_csv(path)
    except OSError as exc:
        raise ValidationError(f"cannot read trajectory file {path}: {exc.strerror}") from None


def _params(args, T: int | None = None) -> ExperimentParams:
    T = args.T if args.T is not None else T
    if T is None:
        raise ValidationError("--T is required")
    return ExperimentParams(args.N, T, args.p, args.q1, args.q2, args.r,
                            psi_d=args.psi_d, psi_s=args.psi_s, B=args.B)


def _to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = list(rows[0].keys())
    w.writerow(cols)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else ("" if r[c] is None else r[c]) for c in cols])
    return buf.getvalue()


def _emit(args, payload: dict, rows: list[dict] | None = None):
    if args.format == "csv":
        text = _to_csv(rows if rows is not None else [_flat(payload)])
    else:
        text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _flat(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flat(v, key + "."))
        elif isinstance(v, list):
            out[key] = " ".join(str(x) for x in v)
        else:
            out[key] = v
    return out


def _log(args, msg: str):
    if not getattr(args, "quiet", False):
        print(msg, file=sys.stderr)


# subcommands

def cmd_design(args) -> int:
    params = _params(args)
    if args.method == "closed-form":
        cf = closed_form_design(params)
        payload = {
            "schema_version": SCHEMA_VERSION,
            "method": "closed-form",
            "rule": cf.rule,
            "fallback": cf.fallback,
            "theta_star": gamma_coefficients(params).theta_star,
            "objective": worst_case_objective_closed(cf.design, params),
            "design": cf.design.to_dict(),
        }
    else:
        res = optimal_design(params)
        payload = {
            "schema_version": SCHEMA_VERSION,
            "method": "optimal",
            "theta_star": res.theta_star,
            "a_star": res.a_star,
            "b_star": res.b_star,
            "case": res.case_tag,
            "branch": res.branch,
            "objective": res.objective,
            "design": res.design.to_dict(),
        }
    _emit(args, payload)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    design = _read_design(args.design)
    params = _params(args, T=design.horizon)
    if params.T != design.horizon:
        raise ValidationError(f"horizon mismatch: design has T={design.horizon}, --T {params.T}")
    rep = worst_case_report(design, params)
    hist = DecisionContext(design, params.p).j_histogram()
    payload = {
        "schema_version": SCHEMA_VERSION,
        "design": design.to_dict(),
        "objective": rep.value,
        "regime": rep.regime,
        "regime_candidates": rep.candidates,
        "j_histogram": {str(j): int(c) for j, c in sorted(hist.counts.items())},
    }
    if args.selection:
        sel = optimal_selection_probability(params, hist)
        payload["selection"] = {"r_q1": sel.r_q1, "r_q2": sel.r_q2, "regime": sel.regime,
                                "candidates": sel.candidates}
    if rep.value is None:
        _emit(args, payload)
        raise RegimeIndeterminateError("N lies between the two worst-case regimes", rep.candidates)
    _emit(args, payload)
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        data = json.loads(Path(args.config).read_text())
    except OSError as exc:
        raise ValidationError(f"cannot read scenario file {args.config}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"scenario file is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ValidationError("scenario must be a JSON object")
    data["seed"] = args.seed
    cfg = ScenarioConfig.from_dict(data)
    if args.workers < 1:
        raise ValidationError("--workers must be >= 1")
    _log(args, f"running {cfg.protocol} with R={cfg.replications}, seed={cfg.seed}, workers={args.workers}")
    report = run_scenario(cfg, workers=args.workers)
    text = report.to_csv() if args.format == "csv" else report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.qq_out and "qq" in report.extra_csv:
        Path(args.qq_out).write_text(report.extra_csv["qq"])
    _log(args, "done")
    return EXIT_OK


def cmd_trial(args) -> int:
    design = _read_design(args.design)
    policy = AssignmentPolicy(design, args.q1, args.q2, args.r)
    if args.model == "model1":
        model = Model1()
    else:
        model = Model2(Model2Spec(m=args.m), args.N, design.horizon, args.q1, seed=args.model_seed)
    traj = run_trial(policy, model, args.N, args.seed)
    text = traj.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _estimate_payload(traj: Trajectory, design: Design, p: int, q1: float, q2: float, r: float,
                      alpha: float) -> tuple[dict, dict, dict]:
    policy = AssignmentPolicy(design, q1, q2, r)
    ctx = DecisionContext(design, p)
    ests = estimate_all(traj, ctx, policy)
    note = None
    variances = dict.fromkeys(ESTIMANDS)
    if r != 0.5:
        note = "variance estimates need r = 0.5"
    else:
        try:
            block_structure(design, p)
            v = conservative_variance_batch(design, p, policy, traj.Q, traj.Z, traj.Y)
            variances = {n: float(v[k]) for k, n in enumerate(ESTIMANDS)}
        except ValidationError as exc:
            note = f"variance estimates unavailable: {exc}"
    points = {n: ests[n].point for n in ESTIMANDS}
    out = {}
    for n in ESTIMANDS:
        ci = None if variances[n] is None else list(confidence_interval(points[n], variances[n], alpha))
        out[n] = {"point": points[n], "variance_estimate": variances[n], "ci": ci}
    payload = {"schema_version": SCHEMA_VERSION, "p": p, "alpha": alpha, "estimates": out}
    if note:
        payload["note"] = note
    return payload, points, variances


def cmd_estimate(args) -> int:
    traj = _read_trajectory(args.trajectory)
    design = _read_design(args.design)
    payload, _, _ = _estimate_payload(traj, design, args.p, args.q1, args.q2, args.r, args.alpha)
    rows = [{"estimand": n, "point": v["point"], "variance_estimate": v["variance_estimate"],
             "ci_low": None if v["ci"] is None else v["ci"][0],
             "ci_high": None if v["ci"] is None else v["ci"][1]} for n, v in payload["estimates"].items()]
    _emit(args, payload, rows)
    return EXIT_OK


def cmd_order_test(args) -> int:
    if not args.p1 < args.p2:
        raise ValidationError(f"need p1 < p2, got p1={args.p1}, p2={args.p2}")
    _, e1, v1 = _estimate_payload(_read_trajectory(args.trajectory1), _read_design(args.design1),
                                  args.p1, args.q1, args.q2, args.r, args.alpha)
    _, e2, v2 = _estimate_payload(_read_trajectory(args.trajectory2), _read_design(args.design2),
                                  args.p2, args.q1, args.q2, args.r, args.alpha)
    if any(v is None for v in list(v1.values()) + list(v2.values())):
        raise ValidationError("order test needs variance estimates from both experiments "
                              "(block-structured designs and r = 0.5)")
    res = order_wald_test(e1, e2, v1, v2, args.alpha, combine=args.combine)
    payload = {"schema_version": SCHEMA_VERSION, "p1": args.p1, "p2": args.p2, **res.to_dict()}
    rows = [{"estimand": n, "statistic": res.statistics[n], "p_value": res.p_values[n],
             "reject": res.reject[n], "reject_overall": res.reject_overall} for n in ESTIMANDS]
    _emit(args, payload, rows)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_oracle_suite

    results = run_oracle_suite(args.seed)
    for r in results:
        _log(args, r.line())
    payload = {"schema_version": SCHEMA_VERSION, "suite": args.suite, "seed": args.seed,
               "passed": all(r.passed for r in results),
               "checks": [{"name": r.name, "passed": r.passed, "detail": r.detail} for r in results]}
    rows = [{"name": r.name, "passed": r.passed, "detail": r.detail} for r in results]
    _emit(args, payload, rows)
    return EXIT_OK if payload["passed"] else EXIT_VERIFY


COMMANDS = {
    "design": cmd_design,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
    "trial": cmd_trial,
    "estimate": cmd_estimate,
    "order-test": cmd_order_test,
    "verify": cmd_verify,
}


def _report_error(fmt: str, code: str, message: str, extra: dict | None = None):
    if fmt == "json":
        body = {"code": code, "message": message}
        if extra:
            body.update(extra)
        print(json.dumps(body, sort_keys=True), file=sys.stderr)
    else:
        print(f"error [{code}]: {message}", file=sys.stderr)


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    fmt = "csv" if "--format" in argv and argv[argv.index("--format") + 1:][:1] == ["csv"] else "json"
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        _report_error(fmt, "usage", str(exc))
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except RegimeIndeterminateError as exc:
        _report_error(fmt, exc.code, str(exc), {"candidates": exc.candidates})
        return exc.exit_code
    except SwitchbackError as exc:
        _report_error(fmt, exc.code, str(exc))
        return exc.exit_code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
