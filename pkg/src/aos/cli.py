"""Command-line front end.

Subcommands::

    aos plan    --config task.json --out DIR
    aos race    --config course.json --out DIR
    aos analyze --config adjoint.json --out DIR
    aos bench   --suite {di-gap,horizontal,figure8} --out DIR

Exit codes: 0 success, 2 config error, 3 solver non-convergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import oracle, pmp, solver
from .model import QuadrotorParams, planar_bounds, preset

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4
SIG_FMT = "%.9g"

Vec3 = tuple[float, float, float]


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class VehicleConfig(_Strict):
    mass: float
    arm_length: float
    inertia_diag: Vec3
    rotor_thrust_min: float
    rotor_thrust_max: float
    torque_constant: float
    body_rate_max: Vec3
    gravity: float = 9.81


class StateConfig(_Strict):
    """Boundary state.  ``roll``/``pitch`` (rad) imply the acceleration of a
    hover-size thrust tilted that way and may not be combined with it."""

    position: Vec3
    velocity: Vec3 = (0.0, 0.0, 0.0)
    acceleration: Vec3 | None = None
    jerk: Vec3 = (0.0, 0.0, 0.0)
    yaw: float = 0.0
    yaw_rate: float = 0.0
    roll: float | None = None
    pitch: float | None = None


class WaypointConfig(_Strict):
    position: Vec3
    tolerance: float = Field(default=0.0, ge=0.0)
    yaw: float | None = None


class PlanConfig(_Strict):
    vehicle: Union[str, VehicleConfig] = "STD"
    model: Literal["S", "R"] = "R"
    start: StateConfig
    end: StateConfig
    waypoints: list[WaypointConfig] = []
    pieces: Union[int, Literal["auto"]] = "auto"
    n_se: int = Field(default=2, ge=0, le=2)
    sample_dt: float = Field(default=0.01, gt=0.0)
    seed: int = 0
    feas_tol: float = Field(default=1e-3, gt=0.0)
    nodes: int = Field(default=16, ge=4)

    @field_validator("pieces")
    @classmethod
    def _positive(cls, v):
        if isinstance(v, int) and v < 1:
            raise ValueError("pieces must be >= 1 or 'auto'")
        return v


class AnalyzeConfig(_Strict):
    """Adjoint block: ``c`` may be ``"random"`` (drawn with ``seed``)."""

    vehicle: Union[str, VehicleConfig] = "STD"
    c: Union[tuple[float, float, float, float], Literal["random"]]
    p5_init: Union[float, Literal["solve"]] = "solve"
    rate_sign: Literal[-1, 1] = 1
    x0: tuple[float, float, float, float, float] = (0.0, 0.0, 0.0, 0.0, 0.0)
    horizon: float = Field(default=3.0, gt=0.0)
    dt: float = Field(default=1e-3, gt=0.0)
    flat: bool = False
    seed: int = 0


def _params(vehicle) -> QuadrotorParams:
    if isinstance(vehicle, str):
        try:
            return preset(vehicle)
        except KeyError as exc:
            raise ConfigError(f"vehicle: {exc.args[0]}") from None
    try:
        return QuadrotorParams(**vehicle.model_dump())
    except ValueError as exc:
        raise ConfigError(f"vehicle: {exc}") from None


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def load_config(path: str | os.PathLike, kind=PlanConfig):
    """Parse a JSON config strictly; raises ``ConfigError`` naming the bad key."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    try:
        return kind.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None


def state_stack(state: StateConfig, model: str, gravity: float = 9.81) -> np.ndarray:
    s = 3 if model == "S" else 4
    if state.roll is not None or state.pitch is not None:
        if state.acceleration is not None:
            raise ConfigError("roll/pitch and acceleration are mutually exclusive")
        out = solver.tilted_stack(model, state.position, state.velocity, state.roll or 0.0,
                                  state.pitch or 0.0, state.yaw)
        out[2, :3] *= gravity / solver.GRAVITY
    else:
        out = np.zeros((s, 4))
        out[0, :3] = state.position
        out[1, :3] = state.velocity
        if state.acceleration is not None:
            out[2, :3] = state.acceleration
        out[0, 3] = state.yaw
    out[1, 3] = state.yaw_rate
    if s == 4:
        out[3, :3] = state.jerk
    return out


def build_problem(cfg: PlanConfig) -> tuple[solver.PlanProblem, solver.SolverOptions]:
    params = _params(cfg.vehicle)
    try:
        problem = solver.PlanProblem(
            cfg.model,
            params,
            state_stack(cfg.start, cfg.model, params.gravity),
            state_stack(cfg.end, cfg.model, params.gravity),
            waypoints=tuple(solver.Waypoint(w.position, w.tolerance, w.yaw) for w in cfg.waypoints),
            pieces_per_segment=cfg.pieces,
            n_se=cfg.n_se,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return problem, solver.SolverOptions(feas_tol=cfg.feas_tol, nodes=cfg.nodes)


# --------------------------------------------------------------------------
# Writers.


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else SIG_FMT % (v + 0.0) for v in row])


def write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serialisable: {type(obj).__name__}")


def write_plot_data(path: Path, x, y) -> None:
    np.savetxt(path, np.column_stack([x, y]) + 0.0, fmt=SIG_FMT)


def _emit_solution(out: Path, sol: solver.Solution, problem: solver.PlanProblem, dt: float) -> None:
    report = sol.to_dict()
    report["model"] = problem.model
    report["vehicle"] = problem.params.name
    write_json(out / "solution.json", report)
    write_json(out / "pieces.json", sol.trajectory.to_dict())
    samples = solver.sample_solution(sol, dt, problem.params)
    write_csv(out / "trajectory.csv", samples.COLUMNS, samples.table())


def _run_plan(cfg: PlanConfig, out: Path, race: bool) -> int:
    problem, options = build_problem(cfg)
    if race and not problem.waypoints:
        raise ConfigError("waypoints: race needs at least one waypoint")
    if not race and problem.waypoints:
        raise ConfigError("waypoints: use the race subcommand for waypoint tasks")
    try:
        if race:
            sol = solver.solve_waypoints(problem, options)
        elif cfg.pieces == "auto":
            sol = solver.robust_aos(problem, options)
        else:
            sol = solver.solve_two_state(problem, int(cfg.pieces), options)
    except solver.AllAttemptsFailed as exc:
        if exc.best is not None:
            _write_outputs(out, exc.best, problem, cfg, race)
        print(f"solver did not converge: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except solver.InfeasibleBoundary as exc:
        raise ConfigError(f"start/end: {exc}") from None
    _write_outputs(out, sol, problem, cfg, race)
    print(f"total_time {sol.total_time:.6g} s  pieces {sol.pieces}  converged {sol.converged}")
    return EXIT_OK if sol.converged else EXIT_SOLVER


def _write_outputs(out, sol, problem, cfg, race):
    out.mkdir(parents=True, exist_ok=True)
    _emit_solution(out, sol, problem, cfg.sample_dt)
    if race:
        hits = [
            {"index": i, "position": list(w.position), "tolerance": w.tolerance, "miss": m,
             "hit": bool(m <= w.tolerance + 1e-6)}
            for i, (w, m) in enumerate(zip(problem.waypoints, sol.waypoint_misses))
        ]
        write_json(out / "waypoint_hits.json", hits)


def cmd_plan(args) -> int:
    return _run_plan(_with_overrides(load_config(args.config), args), Path(args.out), race=False)


def cmd_race(args) -> int:
    return _run_plan(_with_overrides(load_config(args.config), args), Path(args.out), race=True)


def _with_overrides(cfg: PlanConfig, args) -> PlanConfig:
    upd = {}
    if args.sample_dt is not None:
        upd["sample_dt"] = args.sample_dt
    if args.pieces is not None:
        upd["pieces"] = args.pieces if args.pieces == "auto" else int(args.pieces)
    if args.model is not None:
        upd["model"] = args.model
    if args.seed is not None:
        upd["seed"] = args.seed
    if not upd:
        return cfg
    try:
        return PlanConfig.model_validate({**cfg.model_dump(), **upd})
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None


# --------------------------------------------------------------------------
# analyze


def analyze(cfg: AnalyzeConfig) -> tuple[dict, list[str], np.ndarray]:
    """Shoot one extremal and classify it.  Returns (report, csv header, rows)."""
    params = _params(cfg.vehicle)
    bounds = planar_bounds(params)
    if cfg.c == "random":
        rng = np.random.default_rng(cfg.seed)
        acfg, x0 = pmp.random_extremal_setup(rng, bounds, flat=cfg.flat)
    else:
        x0 = np.asarray(cfg.x0, dtype=float)
        try:
            acfg = pmp.AdjointConfig(cfg.c, cfg.p5_init, cfg.rate_sign)
        except ValueError as exc:
            raise ConfigError(f"c: {exc}") from None
        if acfg.p5_init == "solve":
            # a positive rescaling of c leaves the switching structure intact
            acfg = pmp.h_consistent_config(acfg.c, x0, bounds, rate_sign=cfg.rate_sign)
    ext = pmp.shoot_extremal(acfg, x0, cfg.horizon, cfg.dt, bounds)
    rep = pmp.classify_profile(ext.profile)
    flows = [pmp.singular_flow(acfg, k) for k in (-1, 0, 1)]
    report = {
        "c": list(acfg.c),
        "p5_init": ext.p5_init,
        "x0": list(map(float, x0)),
        "u_t_bounds": list(bounds),
        "is_flat": acfg.flat,
        "theta_branches_t0": [f.theta(0.0) for f in flows],
        "arcs": [{"kind": a.kind, "channel": a.channel, "t_start": a.t_start, "t_end": a.t_end}
                 for a in ext.profile.arcs],
        "switch_count": dict(ext.profile.switch_count),
        "structure": dict(ext.profile.structure),
        "hamiltonian_drift": ext.hamiltonian_drift(),
        "compliance": rep.to_dict(),
        "flagged": not (rep.lemma_compliant and rep.theorem_compliant),
    }
    header = ["t_hat", "x", "x_dot", "z", "z_dot", "theta", "u_t", "u_r", "phi_t", "phi_r", "H",
              "theta_m1", "theta_0", "theta_p1"]
    rows = np.column_stack([ext.t, ext.states, ext.u_t, ext.u_r, ext.phi_t(), ext.p5, ext.hamiltonian(),
                            *[np.broadcast_to(f.theta(ext.t), ext.t.shape) for f in flows]])
    return report, header, rows


def cmd_analyze(args) -> int:
    cfg = load_config(args.config, AnalyzeConfig)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    report, header, rows = analyze(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "analysis.json", report)
    write_csv(out / "extremal.csv", header, rows)
    comp = report["compliance"]
    print(f"rate {comp['rate_structure']}  thrust {comp['thrust_structure']}  flagged {report['flagged']}")
    return EXIT_OK


# --------------------------------------------------------------------------
# bench

HORIZONTAL_REF = {
    "S": (0.956, 1.307, 1.573, 1.797, 1.994),
    "R": (1.084, 1.398, 1.657, 1.878, 2.075),
}
DISTANCES = (3.0, 6.0, 9.0, 12.0, 15.0)
GAMMAS = (4.0, 8.0, 12.0, 16.0)
DI_OPTIONS = solver.SolverOptions(delta=1e-6)


def figure8_waypoints(gamma: float, tolerance: float = 0.3) -> tuple[solver.Waypoint, ...]:
    g = gamma
    pts = [(g, g, 0), (2 * g, 0, 0), (g, -g, 0), (0, 0, 0), (-g, g, 0), (-2 * g, 0, 0), (-g, -g, 0)]
    return tuple(solver.Waypoint(p, tolerance) for p in pts)


def _di_case(N: int) -> dict:
    prob = oracle.DiProblem(-2.0, 0.0, 0.0, 0.0)
    ref = oracle.di_min_time(prob).duration
    sol = solver.solve_generic(solver.AccelBox(1.0, 3), [[-2.0], [0.0], [0.0]], [[0.0], [0.0], [0.0]], N,
                               DI_OPTIONS, yaw_channel=False)
    return _row(f"N={N}", sol, ref)


def _horizontal_case(model: str, i: int) -> dict:
    d = DISTANCES[i]
    sol = solver.solve_two_state(solver.rest_to_rest(model, preset("STD"), (0, 0, 0), (d, 0, 0)), 5)
    return _row(f"{model}-{d:g}m", sol, HORIZONTAL_REF[model][i])


def _figure8_case(gamma: float) -> dict:
    problem = solver.rest_to_rest("R", preset("RPG"), (0, 0, 0), (0, 0, 0), waypoints=figure8_waypoints(gamma))
    sol = solver.solve_waypoints(problem)
    row = _row(f"gamma={gamma:g}", sol, math.nan)
    row["max_miss"] = max(sol.waypoint_misses)
    return row


def _row(case: str, sol: solver.Solution, ref: float) -> dict:
    gap = (sol.total_time - ref) / ref if math.isfinite(ref) else math.nan
    return {"case": case, "planned_s": sol.total_time, "reference_s": ref, "gap_pct": 100.0 * gap,
            "wall_ms": 1e3 * sol.wall_time, "converged": sol.converged}


def _call(job):
    fn, args = job
    return fn(*args)


def _bench_jobs(suite: str):
    if suite == "di-gap":
        return [(_di_case, (N,)) for N in range(1, 13)]
    if suite == "horizontal":
        return [(_horizontal_case, (m, i)) for m in ("S", "R") for i in range(len(DISTANCES))]
    if suite == "figure8":
        return [(_figure8_case, (g,)) for g in GAMMAS]
    raise ConfigError(f"suite: unknown suite {suite!r}")


def run_bench(suite: str, threads: int = 1) -> list[dict]:
    jobs = _bench_jobs(suite)
    solver.warm_up()
    if threads <= 1:
        return [_call(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_call, jobs))


def _bench_threads() -> int:
    raw = os.environ.get("AOS_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"AOS_THREADS: expected an integer, got {raw!r}") from None


def cmd_bench(args) -> int:
    if args.suite is None:
        raise ConfigError("suite: --suite is required")
    rows = run_bench(args.suite, _bench_threads())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = ["case", "planned_s", "reference_s", "gap_pct", "wall_ms", "converged"]
    write_csv(out / "report.csv", header,
              [[r["case"], r["planned_s"], r["reference_s"], r["gap_pct"], r["wall_ms"], str(r["converged"])]
               for r in rows])
    if args.suite == "di-gap":
        write_plot_data(out / "gap_vs_pieces.dat", np.arange(1, 13), [r["gap_pct"] for r in rows])
    elif args.suite == "horizontal":
        for k, model in enumerate(("S", "R")):
            part = rows[5 * k : 5 * k + 5]
            write_plot_data(out / f"time_vs_distance_{model}.dat", DISTANCES, [r["planned_s"] for r in part])
            write_plot_data(out / f"reference_vs_distance_{model}.dat", DISTANCES, HORIZONTAL_REF[model])
    else:
        write_plot_data(out / "wall_ms_vs_gamma.dat", GAMMAS, [r["wall_ms"] for r in rows])
        write_plot_data(out / "time_vs_gamma.dat", GAMMAS, [r["planned_s"] for r in rows])
        ratio = rows[-1]["wall_ms"] / rows[0]["wall_ms"]
        write_json(out / "summary.json", {"wall_ratio_16_over_4": ratio,
                                          "max_miss": [r["max_miss"] for r in rows]})
    for r in rows:
        print(f"{r['case']:>12}  {r['planned_s']:.4f} s  gap {r['gap_pct']:7.2f}%  "
              f"{r['wall_ms']:8.1f} ms  converged {r['converged']}")
    return EXIT_OK if all(r["converged"] for r in rows) else EXIT_SOLVER


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aos", description="Time-optimal quadrotor planning.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, help_ in (
        ("plan", cmd_plan, "two-state minimum-time planning"),
        ("race", cmd_race, "waypoint planning"),
        ("analyze", cmd_analyze, "shoot and classify a planar extremal"),
        ("bench", cmd_bench, "run a benchmark suite"),
    ):
        p = sub.add_parser(name, help=help_)
        if name != "bench":
            p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        if name in ("plan", "race"):
            p.add_argument("--sample-dt", type=float, default=None, help="sampling step of trajectory.csv [s]")
            p.add_argument("--pieces", default=None, help="pieces (per segment) or 'auto'")
            p.add_argument("--model", choices=("S", "R"), default=None)
        if name == "bench":
            p.add_argument("--suite", choices=("di-gap", "horizontal", "figure8"), default=None)
        p.set_defaults(func=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "pieces", None) not in (None, "auto"):
        try:
            int(args.pieces)
        except ValueError:
            print("config error: pieces: expected an integer or 'auto'", file=sys.stderr)
            return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
