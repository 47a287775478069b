"""Command-line entry point: ``iptm run | sweep | check-gradients | compare``.

Exit codes: 0 success, 1 error (including usage errors), 2 when a run ends
without reaching the target SOC.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .models import VehicleState
from .mpc import ClosedLoopResult, PlanningError, WeightSchedule, run_closed_loop
from .plant import Metrics
from .scenario import (CASE_IDS, NOMINAL_SCENARIO, ParseError, Scenario, ValidationError, case_preset,
                       load_scenario, scenario_to_dict)
from .transcription import HorizonSpec, Weights, build_nlp

EXIT_OK, EXIT_ERROR, EXIT_TARGET = 0, 1, 2
log = logging.getLogger("iptm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def setup_logging() -> None:
    level = os.environ.get("IPTM_LOG", "error").strip().lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)


# ------------------------------------------------------------------ helpers
def metrics_dict(m: Metrics) -> dict:
    return {"t_chg_min": m.t_chg, "cv_c_sec": m.cv_cabin, "t_cab_final_c": m.t_cab_final,
            "cooling_energy_j": m.cooling_energy, "peak_t_bat_c": m.peak_t_bat, "status": m.status}


def config_hash(sc: Scenario, case_id: str, plant_dt: float) -> str:
    doc = scenario_to_dict(sc)
    doc.pop("name", None)
    payload = json.dumps({"scenario": doc, "case": case_id, "plant_dt": plant_dt}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _run_one(sc: Scenario, case_id: str, schedule: WeightSchedule | None = None,
             plant_dt: float | None = None, trace_stream=None) -> ClosedLoopResult:
    preset = sc.preset(case_id)
    trace = None
    on_plan = None
    if trace_stream is not None:
        def trace(record):
            trace_stream.write(json.dumps({"kind": "solver", **record}) + "\n")

        def on_plan(record):
            trace_stream.write(json.dumps({"kind": "plan", **record}) + "\n")
    cfg = sc.mpc_config(case_id, plant_dt=plant_dt, trace=trace)
    return run_closed_loop(sc.initial, sc.preview(case_id), schedule or preset.schedule, cfg,
                           on_plan=on_plan)


# ------------------------------------------------------------------ commands
def cmd_run(args) -> int:
    sc = load_scenario(args.scenario)
    if args.plant_dt is not None and not args.plant_dt > 0:
        raise UsageError("--plant-dt must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace_fh = open(out / "trace.ndjson", "w") if args.trace else None
    try:
        res = _run_one(sc, args.case, plant_dt=args.plant_dt, trace_stream=trace_fh)
    finally:
        if trace_fh is not None:
            trace_fh.close()
    res.log.to_csv(out / "trajectory.csv")
    _write_json(out / "metrics.json", metrics_dict(res.metrics))
    plant_dt = args.plant_dt if args.plant_dt is not None else sc.controller.plant_dt
    _write_json(out / "manifest.json", {
        "scenario": str(Path(args.scenario).resolve()), "case": args.case, "out_dir": str(out.resolve()),
        "config_hash": config_hash(sc, args.case, plant_dt), "tool_version": __version__,
    })
    m = res.metrics
    t = "n/a" if m.t_chg is None else f"{m.t_chg:.2f} min"
    print(f"case {args.case}: t_chg={t} CV={m.cv_cabin:.1f} degC s T_cab,final={m.t_cab_final:.2f} degC "
          f"status={m.status}")
    return EXIT_OK if m.status == "converged" else EXIT_TARGET


def _parse_values(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"cannot parse value list {text!r}: {exc}") from exc
    return vals


def _sweep_worker(job: tuple[str, float]) -> dict:
    path, beta2 = job
    sc = load_scenario(path)
    schedule = replace(case_preset("IIa").schedule, beta2_const=beta2)
    row = {"beta2": beta2}
    try:
        m = _run_one(sc, "IIa", schedule=schedule).metrics
        row.update(t_chg_min=m.t_chg, cv_c_sec=m.cv_cabin, t_cab_final_c=m.t_cab_final, status=m.status)
    except PlanningError as exc:
        row.update(t_chg_min=None, cv_c_sec=None, t_cab_final_c=None, status=f"error: {exc}")
    return row


def cmd_sweep(args) -> int:
    values = _parse_values(args.beta2)
    if len(values) < 2:
        raise UsageError("--beta2 needs at least two values")
    if any(not v >= 0 for v in values):
        raise UsageError("--beta2 values must be nonnegative")
    if args.parallel < 1:
        raise UsageError("--parallel must be at least 1")
    load_scenario(args.scenario)  # fail early on a bad file
    jobs = [(str(args.scenario), v) for v in values]
    if args.parallel > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.parallel) as pool:
            rows = list(pool.map(_sweep_worker, jobs))
    else:
        rows = [_sweep_worker(j) for j in jobs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["beta2", "t_chg_min", "cv_c_sec", "t_cab_final_c", "status"])
        for r in rows:
            w.writerow(["" if r[k] is None else repr(r[k]) if isinstance(r[k], float) else r[k]
                        for k in ("beta2", "t_chg_min", "cv_c_sec", "t_cab_final_c", "status")])
    for r in rows:
        print(f"beta2={r['beta2']:g}: t_chg={r['t_chg_min']} CV={r['cv_c_sec']} status={r['status']}")
    if any(r["status"].startswith("error") for r in rows):
        return EXIT_ERROR
    return EXIT_OK if all(r["status"] == "converged" for r in rows) else EXIT_TARGET


def gradient_check(n_points: int = 100, seed: int = 0, perturbation: float = 0.0,
                   scenario_path=NOMINAL_SCENARIO) -> tuple[float, str]:
    """Worst row-wise relative error of analytic vs central-difference derivatives.

    Every objective/constraint row is compared in the infinity norm relative
    to the finite-difference row; returns the worst value and where it occurred.
    """
    sc = load_scenario(scenario_path)
    rng = np.random.default_rng(seed)
    params = sc.problem_params()
    cool = params.vehicle.cooling
    trac = tuple(rng.uniform(0.0, 20e3, 3))
    spec = HorizonSpec(n1=3, dt1=30.0, n2=4, dt2_max=180.0, traction_preview=trac, soc_targ=0.6)
    weights = Weights(alpha=sc.alpha, beta1=1e11, beta2=1e10, budget_t_chg=1800.0)
    worst, where = 0.0, ""
    for _ in range(n_points):
        x0 = VehicleState(rng.uniform(0.2, 0.5), rng.uniform(25.0, 35.0), rng.uniform(23.0, 26.0))
        nlp = build_nlp(spec, x0, params, weights, gradient_perturbation=perturbation)
        L = nlp.layout
        z = np.empty(nlp.n)
        z[L["q_bat"]] = rng.uniform(0.0, cool.q_bat_max, spec.n_samples)
        z[L["q_cab"]] = rng.uniform(0.0, cool.q_cab_max, spec.n_samples)
        z[L["p_chg"]] = rng.uniform(0.0, params.limits.p_chg_max, spec.n2)
        z[L["dt2"]] = rng.uniform(0.1, 1.0, spec.n2) * spec.dt2_max
        z[L["soc"]] = rng.uniform(0.2, 0.8, spec.n_samples + 1)
        z[L["t_bat"]] = rng.uniform(15.0, 36.0, spec.n_samples + 1)
        z[L["t_cab"]] = rng.uniform(23.0, 30.0, spec.n_samples + 1)
        z[L["eps1"]] = rng.uniform(0.0, 2.0)
        z[L["eps2"]] = rng.uniform(0.0, 2.0)
        analytic = [nlp.objective_grad(z)[None, :], nlp.eq_jac(z).toarray(), nlp.ineq_jac(z).toarray()]
        fd = [np.zeros_like(a) for a in analytic]
        for j in range(nlp.n):
            h = 1e-6 * max(abs(z[j]), 1.0)
            zp, zm = z.copy(), z.copy()
            zp[j] += h
            zm[j] -= h
            fd[0][0, j] = (nlp.objective(zp) - nlp.objective(zm)) / (2 * h)
            fd[1][:, j] = (nlp.eq(zp) - nlp.eq(zm)) / (2 * h)
            fd[2][:, j] = (nlp.ineq(zp) - nlp.ineq(zm)) / (2 * h)
        for name, a, f in zip(("objective", "eq", "ineq"), analytic, fd):
            for r in range(a.shape[0]):
                scale = max(np.max(np.abs(f[r])), np.max(np.abs(a[r])))
                if scale == 0.0:
                    continue
                diff = np.abs(a[r] - f[r])
                err = float(np.max(diff)) / scale
                if err > worst:
                    worst = err
                    label = f"{name}[{r}]" if name != "objective" else "objective"
                    where = f"d {label} / d {nlp._name_of(int(np.argmax(diff)))}"
    return worst, where


def cmd_check_gradients(args) -> int:
    if args.n_points < 1:
        raise UsageError("--n-points must be at least 1")
    worst, where = gradient_check(args.n_points, args.seed, args.perturb_gradient)
    ok = worst < 1e-5
    print(f"max relative error {worst:.3e} over {args.n_points} points ({'pass' if ok else 'FAIL'})")
    if not ok:
        print(f"worst component: {where}", file=sys.stderr)
    return EXIT_OK if ok else EXIT_ERROR


COMPARE_ROWS = (("t_chg_min", "t_chg [min]"), ("cv_c_sec", "CV [degC s]"),
                ("t_cab_final_c", "T_cab,final [degC]"))


def cmd_compare(args) -> int:
    dirs = [d for d in args.runs.split(",") if d.strip()]
    if not dirs:
        raise UsageError("--runs needs at least one directory")
    labels, columns = [], []
    for d in dirs:
        path = Path(d) / "metrics.json"
        try:
            metrics = json.loads(path.read_text())
            values = [metrics[k] for k, _ in COMPARE_ROWS]
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            print(f"error: run {d}: unreadable metrics ({exc})", file=sys.stderr)
            return EXIT_ERROR
        label = Path(d).name
        try:
            label = f"Case {json.loads((Path(d) / 'manifest.json').read_text())['case']}"
        except (OSError, json.JSONDecodeError, KeyError):
            pass
        labels.append(label)
        columns.append(values)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", *labels])
    for i, (key, _) in enumerate(COMPARE_ROWS):
        w.writerow([key, *("" if c[i] is None else repr(float(c[i])) for c in columns)])
    Path(args.out).write_text(buf.getvalue())

    cells = [["", *labels]]
    for i, (_, title) in enumerate(COMPARE_ROWS):
        cells.append([title, *("n/a" if c[i] is None else f"{c[i]:.1f}" for c in columns)])
    widths = [max(len(row[k]) for row in cells) for k in range(len(cells[0]))]
    for row in cells:
        print("  ".join(cell.ljust(widths[0]) if k == 0 else cell.rjust(widths[k])
                        for k, cell in enumerate(row)))
    return EXIT_OK


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="iptm", description="Power and thermal management MPC for EV fast charging.")
    p.add_argument("--version", action="version", version=f"iptm {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="closed-loop run of one case")
    r.add_argument("--scenario", required=True)
    r.add_argument("--case", required=True, choices=CASE_IDS)
    r.add_argument("--out", required=True)
    r.add_argument("--plant-dt", type=float, default=None)
    r.add_argument("--trace", action="store_true", help="write solver iterations to trace.ndjson")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="Case II runs over several beta2 values")
    s.add_argument("--scenario", required=True)
    s.add_argument("--beta2", required=True, help="comma-separated values")
    s.add_argument("--out", required=True)
    s.add_argument("--parallel", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    g = sub.add_parser("check-gradients", help="analytic vs finite-difference derivatives")
    g.add_argument("--n-points", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--perturb-gradient", type=float, default=0.0, help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_check_gradients)

    c = sub.add_parser("compare", help="side-by-side metrics of finished runs")
    c.add_argument("--runs", required=True, help="comma-separated run directories")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    setup_logging()
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ParseError, ValidationError, PlanningError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
