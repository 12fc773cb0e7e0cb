"""Experiment orchestration: builds plant, target and solver from a config
and writes the CSV / OBJ / summary outputs of one run."""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .geometry import RigidTransform, TriangleMesh, compose
from .meshio import load_mesh, mesh_digest, save_obj
from .objective import ObjectiveConfig, SubRegionPartition, Target, normal_histogram, write_sample_csv
from .plant import PRESETS, BumpSpec, MembraneModel, Plant, make_flat_waist_target, \
    make_reachable_target, make_unreachable_target
from .registration import IcpConfig
from .solver import BROYDEN_STEP, FD_PROBE, GDS_STEP, ICP, LS_PROBE, ROLLBACK, LineSearchConfig, \
    ShapeProblem, SolverConfig, SolverTrace, SolveResult, estimate_pose, fixed_step_solve, hybrid_solve

DEFAULT_TARGET_ACTUATION = {"mannequin4": (12.0, 18.0, 10.0, 15.0), "reduced2": (13.0, 8.0)}
DEFAULT_PARTITION = {"mannequin4": "mannequin", "reduced2": "halves"}


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------

def build_model(cfg: ExperimentConfig) -> MembraneModel:
    p = cfg.plant
    if p.preset not in PRESETS:
        raise ConfigError(f"unknown plant preset {p.preset!r} (known: {', '.join(PRESETS)})")
    return PRESETS[p.preset](grid_shape=(p.grid_rows, p.grid_cols), smoothing_passes=p.smoothing_passes,
                             noise=p.noise, hysteresis=p.hysteresis, p_min=p.p_min, p_max=p.p_max)


def _vector(values, k, what, fallback):
    a = np.asarray(values if len(values) else fallback, dtype=float)
    if a.shape != (k,):
        raise ConfigError(f"{what} needs {k} values, got {len(a)}")
    return a


def target_actuation(cfg: ExperimentConfig, model: MembraneModel) -> np.ndarray:
    fallback = DEFAULT_TARGET_ACTUATION.get(cfg.plant.preset, np.full(model.k, 10.0))
    return _vector(cfg.target.actuation, model.k, "target.actuation", fallback)


def target_transform(cfg: ExperimentConfig) -> RigidTransform:
    """Rigid motion applied to the generated target (rotation about y, then translation)."""
    t = cfg.target
    rot = RigidTransform.from_axis_angle((0.0, 1.0, 0.0), math.radians(t.rotate_deg), t.rotate_center)
    return compose(RigidTransform(np.eye(3), np.array(t.translate, dtype=float)), rot)


def build_target(cfg: ExperimentConfig, model: MembraneModel | None = None) -> TriangleMesh:
    model = model or build_model(cfg)
    t = cfg.target
    if t.kind == "file":
        mesh = load_mesh(cfg.target_path)
    else:
        a_star = target_actuation(cfg, model)
        if t.kind == "reachable":
            mesh = make_reachable_target(model, a_star)
        elif t.kind == "unreachable":
            mesh = make_unreachable_target(model, a_star, BumpSpec(t.bump_amplitude, tuple(t.bump_center),
                                                                   t.bump_sigma))
        else:
            mesh = make_flat_waist_target(model, a_star, tuple(t.waist))
    tf = target_transform(cfg)
    return mesh if tf.angle() == 0 and not np.any(tf.translation) else mesh.transformed(tf)


def objective_config(cfg: ExperimentConfig, normal_weight: float | None = None) -> ObjectiveConfig:
    name = cfg.objective.partition
    if name == "auto":
        name = DEFAULT_PARTITION.get(cfg.plant.preset, "mannequin")
    partition = SubRegionPartition.mannequin() if name == "mannequin" else SubRegionPartition.halves()
    w = cfg.objective.normal_weight if normal_weight is None else normal_weight
    return ObjectiveConfig(normal_weight=w, partition=partition)


def icp_config(cfg: ExperimentConfig) -> IcpConfig:
    c = cfg.icp
    return IcpConfig(c.max_iterations, c.tol_translation, c.tol_rotation, c.trim_fraction)


def solver_config(cfg: ExperimentConfig, **overrides) -> SolverConfig:
    s = cfg.solver
    ls = LineSearchConfig(s.ls_initial_step, s.ls_shrink, s.ls_expand, s.ls_max_probes, s.ls_refine)
    out = SolverConfig(fd_delta=s.fd_delta, rel_tol=s.rel_tol, i_max=s.i_max, broyden=s.broyden,
                       broyden_lambda=s.broyden_lambda, broyden_step_cap=s.broyden_step_cap,
                       icp=cfg.icp.enabled, icp_period=cfg.icp.period, line_search=ls,
                       actuation_ms=s.actuation_ms)
    return replace(out, **overrides)


def build_problem(cfg: ExperimentConfig, target_mesh: TriangleMesh, model: MembraneModel | None = None,
                  normal_weight: float | None = None) -> ShapeProblem:
    model = model or build_model(cfg)
    b = cfg.bspline
    return ShapeProblem(Plant(model, cfg.run.seed), Target(target_mesh), objective_config(cfg, normal_weight),
                        ctrl=(b.ctrl_u, b.ctrl_v), samples=(b.samples_u, b.samples_v),
                        regularization=b.regularization, icp=icp_config(cfg))


def initial_actuation(cfg: ExperimentConfig, model: MembraneModel) -> np.ndarray:
    return _vector(cfg.solver.a0, model.k, "solver.a0", np.zeros(model.k))


# --------------------------------------------------------------------------
# outputs
# --------------------------------------------------------------------------

def waist_mask(cfg: ExperimentConfig, model: MembraneModel, uv) -> np.ndarray:
    lo, hi = cfg.target.waist
    v = np.asarray(uv)[:, 1]
    return (v >= lo / model.height) & (v <= hi / model.height)


def summarize(result: SolveResult, target_mesh: TriangleMesh, cfg: ExperimentConfig,
              model: MembraneModel, mode: str) -> dict:
    """Run statistics; everything except the eta fields can be recomputed from trace.csv."""
    trace = result.trace
    final = result.final
    target = Target(target_mesh, result.pose)
    _, _, eta_all = normal_histogram(final.samples, target)
    _, _, eta_waist = normal_histogram(final.samples, target, mask=waist_mask(cfg, model, final.samples.uv))
    counts = {kind: sum(r.kind == kind for r in trace.rows)
              for kind in (FD_PROBE, GDS_STEP, LS_PROBE, BROYDEN_STEP, ICP, ROLLBACK)}
    accepted_broyden = sum(r.kind == BROYDEN_STEP and r.accepted for r in trace.rows)
    return {
        "mode": mode,
        "seed": cfg.run.seed,
        "terminated_by": result.terminated_by,
        "final_D": result.final_D,
        "avg_err_mm": final.value.mean_distance,
        "max_err_mm": final.value.max_distance,
        "rms_mm": final.value.rms,
        "mean_eta": eta_all,
        "mean_eta_waist": eta_waist,
        "steps": len(trace.accepted()) - 1,
        "gds_steps": counts[GDS_STEP],
        "broyden_steps": accepted_broyden,
        "broyden_rejected": counts[BROYDEN_STEP] - accepted_broyden,
        "rollbacks": counts[ROLLBACK],
        "icp_runs": counts[ICP],
        "fd_probes": counts[FD_PROBE],
        "ls_probes": counts[LS_PROBE],
        "evals": result.evals,
        "modelled_ms": trace.rows[-1].ms,
        "a_opt": " ".join(repr(float(x)) for x in result.a_opt),
        "pose_angle_deg": math.degrees(result.pose.angle()),
        "pose_translation": " ".join(repr(float(x)) for x in result.pose.translation),
        "target_sha256": mesh_digest(target_mesh),
    }


def write_summary(path, summary: dict) -> None:
    with open(path, "w") as fh:
        for key, val in summary.items():
            fh.write(f"{key}={val!r}\n" if isinstance(val, float) else f"{key}={val}\n")


def read_summary(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        key, _, val = line.partition("=")
        out[key] = val
    return out


def write_run(out_dir, result: SolveResult, target_mesh: TriangleMesh, summary: dict,
              final_mesh: TriangleMesh | None = None) -> Path:
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    result.trace.write_csv(out / "trace.csv")
    for row_index, ev in result.trace.snapshots:
        write_sample_csv(out / "samples" / f"row_{row_index:04d}.csv", ev.samples, ev.value)
    save_obj(target_mesh, out / "target.obj")
    if final_mesh is not None:
        save_obj(final_mesh, out / "final_mesh.obj")
    write_summary(out / "summary.txt", summary)
    return out


def _final_mesh(cfg, model, a) -> TriangleMesh:
    # noise-free re-render of the final actuation; does not touch the run's plant
    return make_reachable_target(model, a)


# --------------------------------------------------------------------------
# runs
# --------------------------------------------------------------------------

def run_solve(cfg: ExperimentConfig, out_dir=None, *, write: bool = True, target_mesh=None,
              normal_weight: float | None = None, mode: str = "solve", **solver_overrides):
    """Hybrid solve on the configured target; returns (SolveResult, summary)."""
    model = build_model(cfg)
    target_mesh = target_mesh if target_mesh is not None else build_target(cfg, model)
    problem = build_problem(cfg, target_mesh, model, normal_weight)
    scfg = solver_config(cfg, **solver_overrides)
    result = hybrid_solve(problem, initial_actuation(cfg, model), scfg)
    summary = summarize(result, target_mesh, cfg, model, mode)
    if write:
        write_run(out_dir or cfg.output_dir, result, target_mesh, summary, _final_mesh(cfg, model, result.a_opt))
    return result, summary


@dataclass
class AblationResult:
    mode: str
    on: SolveResult
    off: SolveResult
    on_summary: dict
    off_summary: dict


ABLATIONS = ("icp", "broyden", "normal")


def comparison_rows(on: SolveResult, off: SolveResult):
    """Best-so-far D of both runs on the union of their eval counts."""
    curves = [dict(r.best_D_by_evals()) for r in (on.trace, off.trace)]
    grid = sorted(set(curves[0]) | set(curves[1]))
    rows = []
    for e in grid:
        vals = []
        for c in curves:
            known = [d for k, d in c.items() if k <= e]
            vals.append(min(known) if known else float("nan"))
        rows.append((e, vals[0], vals[1]))
    return rows


def run_ablation(cfg: ExperimentConfig, mode: str, out_dir=None, *, write: bool = True) -> AblationResult:
    if mode not in ABLATIONS:
        raise ConfigError(f"ablation mode must be one of {', '.join(ABLATIONS)}")
    model = build_model(cfg)
    target_mesh = build_target(cfg, model)
    base = Path(out_dir or cfg.output_dir)
    runs = {}
    for side in ("on", "off"):
        kw = {}
        if mode == "icp":
            kw["icp"] = side == "on"
        elif mode == "broyden":
            kw["broyden"] = side == "on"
        else:
            kw["normal_weight"] = cfg.objective.normal_weight if side == "on" else 0.0
        runs[side] = run_solve(cfg, base / side, write=write, target_mesh=target_mesh,
                               mode=f"ablate-{mode}-{side}", **kw)
    res = AblationResult(mode, runs["on"][0], runs["off"][0], runs["on"][1], runs["off"][1])
    if write:
        with open(base / "comparison.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["evals", "best_D_on", "best_D_off"])
            for e, a, b in comparison_rows(res.on, res.off):
                w.writerow([e, repr(a), repr(b)])
    return res


def fixed_pose(cfg: ExperimentConfig, problem: ShapeProblem, a0) -> RigidTransform:
    """Pre-optimised pose for runs without pose estimation.

    Generated targets use their known placement; file targets are registered
    once against the start observation.
    """
    if cfg.target.kind != "file":
        return target_transform(cfg)
    trace = SolverTrace(problem.k)
    ev = problem.evaluate(a0)
    estimate_pose(problem, ev, trace, 0)
    return problem.pose


def run_fixed_step_baseline(cfg: ExperimentConfig, step: float | None = None, out_dir=None, *,
                            write: bool = True, target_mesh=None):
    """Sign-driven fixed-increment controller with a fixed pose; returns (SolveResult, summary)."""
    multiple = cfg.run.baseline_step if step is None else step
    if multiple not in (1.0, 1.5, 2.0):
        raise ConfigError("baseline step must be 1.0, 1.5 or 2.0")
    model = build_model(cfg)
    target_mesh = target_mesh if target_mesh is not None else build_target(cfg, model)
    problem = build_problem(cfg, target_mesh, model)
    a0 = initial_actuation(cfg, model)
    problem.pose = fixed_pose(cfg, problem, a0)
    result = fixed_step_solve(problem, a0, multiple * cfg.solver.fd_delta, cfg.run.baseline_max_evals,
                              cfg.solver.actuation_ms)
    summary = summarize(result, target_mesh, cfg, model, f"baseline-{multiple}")
    if write:
        write_run(out_dir or cfg.output_dir, result, target_mesh, summary, _final_mesh(cfg, model, result.a_opt))
    return result, summary


# --------------------------------------------------------------------------
# brute-force oracle
# --------------------------------------------------------------------------

@dataclass
class OracleResult:
    points: int
    axes: list  # per-channel node values
    table: np.ndarray  # D on the grid, shape (points,) * k
    best_a: np.ndarray
    best_D: float
    best_index: tuple

    def cell_variation(self) -> float:
        """Largest |D - best D| over the nodes one grid step (any direction) from the best node."""
        sl = tuple(slice(max(i - 1, 0), i + 2) for i in self.best_index)
        return float(np.max(np.abs(self.table[sl] - self.best_D)))


def oracle_grid(cfg: ExperimentConfig, points: int | None = None, out_dir=None, *,
                write: bool = True, target_mesh=None) -> OracleResult:
    """Exhaustive D over the actuation box through the solver's own pipeline.

    Each node is scored like a solver evaluation: observe, fit, sample, then
    (if enabled) register the target from the identity pose and keep the new
    pose only when it does not raise D.  Nodes run in lexicographic order.
    """
    n = points or cfg.run.oracle_points
    model = build_model(cfg)
    if model.k > 3 and not cfg.run.oracle_override:
        raise ConfigError(f"oracle grid too large: k={model.k} needs run.oracle_override=true")
    if model.hysteresis:
        raise ConfigError("oracle grid needs a stateless plant (hysteresis = 0)")
    target_mesh = target_mesh if target_mesh is not None else build_target(cfg, model)
    problem = build_problem(cfg, target_mesh, model)
    axes = [np.linspace(model.p_min, model.p_max, n) for _ in range(model.k)]
    table = np.empty((n,) * model.k)
    scratch = SolverTrace(model.k)
    for idx in itertools.product(range(n), repeat=model.k):
        a = np.array([axes[c][i] for c, i in enumerate(idx)])
        problem.pose = RigidTransform.identity()
        ev = problem.evaluate(a)
        if cfg.icp.enabled:
            ev = estimate_pose(problem, ev, scratch, 0)
        table[idx] = ev.D
    best = np.unravel_index(int(np.argmin(table)), table.shape)
    best_a = np.array([axes[c][i] for c, i in enumerate(best)])
    res = OracleResult(n, axes, table, best_a, float(table[best]), tuple(int(i) for i in best))
    if write:
        out = Path(out_dir or cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "oracle.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"P{i + 1}" for i in range(model.k)] + ["D"])
            for idx in itertools.product(range(n), repeat=model.k):
                w.writerow([repr(float(axes[c][i])) for c, i in enumerate(idx)] + [repr(float(table[idx]))])
        write_summary(out / "summary.txt", {
            "mode": "oracle", "points": n, "best_D": res.best_D,
            "best_a": " ".join(repr(float(x)) for x in best_a),
            "cell_variation": res.cell_variation(), "target_sha256": mesh_digest(target_mesh)})
    return res
