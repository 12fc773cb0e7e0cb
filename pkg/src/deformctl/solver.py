"""Hybrid deformation controller.

Gradient descent on finite-difference gradients with a shrink/expand line
search, accelerated by Broyden steps on the region-error vector d, with the
target's pose re-estimated by ICP once per outer iteration.

Every call to ``problem.evaluate`` is one plant actuation, the expensive
resource; the code is arranged so each one is accounted for in the trace.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .bspline import PatchFitter, SampleSet, make_sample_set
from .geometry import RigidTransform
from .objective import ObjectiveConfig, ObjectiveValue, Target, assign_regions
from .objective import evaluate as evaluate_objective
from .plant import Plant
from .registration import IcpConfig, IcpResult, icp_pose

FD_PROBE = "FD_PROBE"
GDS_STEP = "GDS_STEP"
LS_PROBE = "LS_PROBE"
BROYDEN_STEP = "BROYDEN_STEP"
ICP = "ICP"
ROLLBACK = "ROLLBACK"

REL_TOL = "REL_TOL"
I_MAX = "I_MAX"


class ProbeError(ValueError):
    pass


class SingularJacobian(np.linalg.LinAlgError):
    pass


class BroydenBreakdown(ArithmeticError):
    pass


@dataclass
class LineSearchConfig:
    initial_step: float = 1.0  # kPa along the normalised gradient
    shrink: float = 0.5
    expand: float = 2.0
    max_probes: int = 8
    refine: bool = True


@dataclass
class SolverConfig:
    fd_delta: float = 0.25
    rel_tol: float = 0.01
    i_max: int = 25
    broyden: bool = True
    broyden_lambda: float = 0.1
    broyden_step_cap: int = 10
    icp: bool = True
    icp_period: int = 1
    line_search: LineSearchConfig = field(default_factory=LineSearchConfig)
    actuation_ms: float = 12500.0  # modelled cost of one actuation

    def __post_init__(self):
        if self.fd_delta <= 0:
            raise ValueError("fd_delta must be > 0")
        if not 0 < self.rel_tol < 1:
            raise ValueError("rel_tol must lie in (0, 1)")
        if self.broyden_lambda <= 0:
            raise ValueError("broyden_lambda must be > 0")
        if self.i_max < 1:
            raise ValueError("i_max must be >= 1")
        if self.icp_period < 1:
            raise ValueError("icp_period must be >= 1")


# --------------------------------------------------------------------------
# problem: what the optimiser sees of plant + objective
# --------------------------------------------------------------------------

@dataclass
class Evaluation:
    a: np.ndarray
    value: ObjectiveValue
    samples: SampleSet | None = None

    @property
    def D(self) -> float:
        return self.value.total

    @property
    def d(self) -> np.ndarray:
        return self.value.components


class ShapeProblem:
    """Plant + B-spline fit + samples + posed target, as one black box over a."""

    def __init__(self, plant: Plant, target: Target, objective: ObjectiveConfig | None = None,
                 ctrl=(14, 14), samples=(13, 25), regularization: float = 1e-4,
                 icp: IcpConfig | None = None):
        self.plant = plant
        self.target = target
        self.objective = objective or ObjectiveConfig()
        if self.objective.partition.k != plant.k:
            raise ValueError(f"partition has {self.objective.partition.k} regions for {plant.k} channels")
        self.icp_cfg = icp or IcpConfig()
        self.sample_shape = tuple(samples)
        self._fitter = PatchFitter(plant.model.uv_grid(), ctrl[0], ctrl[1], regularization)
        self.lower, self.upper = plant.bounds

    @property
    def k(self) -> int:
        return self.plant.k

    @property
    def evals(self) -> int:
        return self.plant.eval_count

    @property
    def stateless(self) -> bool:
        return self.plant.stateless

    @property
    def pose(self) -> RigidTransform:
        return self.target.pose

    @pose.setter
    def pose(self, value: RigidTransform):
        self.target.pose = value

    def observe(self, a):
        obs = self.plant.actuate(a)
        patch = self._fitter.fit(obs.cloud)
        samples = make_sample_set(patch, obs.mesh, *self.sample_shape)
        assign_regions(samples, self.objective.partition)
        return obs, patch, samples

    def evaluate(self, a) -> Evaluation:
        a = np.array(a, dtype=float)
        _, _, samples = self.observe(a)
        return Evaluation(a, evaluate_objective(samples, self.target, self.objective), samples)

    def rescore(self, ev: Evaluation, pose: RigidTransform | None = None) -> Evaluation:
        """Re-score cached samples (no actuation), under ``pose`` or the current pose."""
        return Evaluation(ev.a, evaluate_objective(ev.samples, self.target, self.objective, pose), ev.samples)

    def register(self, ev: Evaluation) -> IcpResult:
        return icp_pose(ev.samples.points, self.target.index, self.target.pose, self.icp_cfg)


# --------------------------------------------------------------------------
# trace
# --------------------------------------------------------------------------

@dataclass
class TraceRow:
    step: int
    kind: str
    a: np.ndarray
    D: float
    d: np.ndarray
    rms: float
    evals: int
    ms: float
    pose: RigidTransform
    accepted: bool = False


class SolverTrace:
    def __init__(self, k: int, actuation_ms: float = 12500.0):
        self.k = k
        self.actuation_ms = actuation_ms
        self.rows: list[TraceRow] = []
        self.secant_residuals: list[float] = []
        self.snapshots: list[tuple[int, Evaluation]] = []  # (row index, accepted evaluation)
        self.wall_time = 0.0

    def add(self, kind, step, ev: Evaluation, problem, accepted=False) -> TraceRow:
        rms = ev.value.rms if ev.value.distances is not None else float("nan")
        row = TraceRow(step, kind, np.array(ev.a, dtype=float), float(ev.D), np.array(ev.d, dtype=float),
                       rms, problem.evals, problem.evals * self.actuation_ms,
                       getattr(problem, "pose", RigidTransform.identity()), accepted)
        self.rows.append(row)
        if accepted:
            self.snapshots.append((len(self.rows) - 1, ev))
        return row

    def accepted(self) -> list[TraceRow]:
        return [r for r in self.rows if r.accepted]

    def accepted_D(self) -> np.ndarray:
        return np.array([r.D for r in self.accepted()])

    def best_D_by_evals(self):
        """(evals, best accepted D so far) after each accepted row."""
        out, best = [], np.inf
        for r in self.accepted():
            best = min(best, r.D)
            out.append((r.evals, best))
        return out

    def count(self, kind) -> int:
        return sum(r.kind == kind and (r.accepted or kind != BROYDEN_STEP) for r in self.rows)

    def header(self):
        return (["step", "kind"] + [f"P{i + 1}" for i in range(self.k)] + ["D"]
                + [f"d{i + 1}" for i in range(self.k)] + ["rms_mm", "evals", "ms"])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for r in self.rows:
                w.writerow([r.step, r.kind] + [repr(float(x)) for x in r.a] + [repr(r.D)]
                           + [repr(float(x)) for x in r.d] + [repr(r.rms), r.evals, repr(float(r.ms))])


@dataclass
class SolveResult:
    a_opt: np.ndarray
    pose: RigidTransform
    final_D: float
    trace: SolverTrace
    terminated_by: str
    final: Evaluation | None = None

    @property
    def evals(self) -> int:
        return self.trace.rows[-1].evals if self.trace.rows else 0


# --------------------------------------------------------------------------
# gradient and Jacobian by forward differences
# --------------------------------------------------------------------------

@dataclass
class FDProbes:
    base: Evaluation
    steps: np.ndarray  # signed per-channel probe offsets
    probes: list  # Evaluation per channel


def probe_steps(a, delta, lower, upper) -> np.ndarray:
    """Forward offset per channel, shrunk to fit under the upper bound.

    A channel sitting on its upper bound is probed backwards instead.
    """
    a = np.asarray(a, dtype=float)
    room_up = np.asarray(upper) - a
    room_down = a - np.asarray(lower)
    steps = np.minimum(delta, room_up)
    floor = 1e-6 * delta
    back = steps < floor
    steps[back] = -np.minimum(delta, room_down[back])
    if np.any(np.abs(steps) < floor):
        i = int(np.flatnonzero(np.abs(steps) < floor)[0])
        raise ProbeError(f"cannot probe channel {i + 1}")
    return steps


def fd_probes(problem, a_or_base, delta, trace=None, step=0) -> FDProbes:
    """k probe evaluations around a base point (plus the base if not cached)."""
    if isinstance(a_or_base, Evaluation):
        base = a_or_base
    else:
        base = problem.evaluate(a_or_base)
        if trace is not None:
            trace.add(FD_PROBE, step, base, problem)
    steps = probe_steps(base.a, delta, problem.lower, problem.upper)
    probes = []
    for i in range(problem.k):
        a = base.a.copy()
        a[i] += steps[i]
        ev = problem.evaluate(a)
        if trace is not None:
            trace.add(FD_PROBE, step, ev, problem)
        probes.append(ev)
    return FDProbes(base, steps, probes)


def numerical_gradient(problem, a, delta, probes: FDProbes | None = None, trace=None) -> np.ndarray:
    """Forward-difference dD/dP_i."""
    fd = probes or fd_probes(problem, a, delta, trace)
    return np.array([(p.D - fd.base.D) / s for p, s in zip(fd.probes, fd.steps)])


def jacobian_fd(problem, a, delta, probes: FDProbes | None = None, trace=None) -> np.ndarray:
    """J[l, i] = dD_l/dP_i from the same probes as the gradient."""
    fd = probes or fd_probes(problem, a, delta, trace)
    cols = [(p.d - fd.base.d) / s for p, s in zip(fd.probes, fd.steps)]
    return np.stack(cols, axis=1)


# --------------------------------------------------------------------------
# gradient step
# --------------------------------------------------------------------------

def project_gradient(a, g, lower, upper) -> np.ndarray:
    """Zero components of g whose descent step would leave the box at a binding face."""
    g = np.array(g, dtype=float)
    a = np.asarray(a, dtype=float)
    g[(a <= lower) & (g > 0)] = 0.0
    g[(a >= upper) & (g < 0)] = 0.0
    return g


def clamp_step(a, g, bounds) -> float:
    """Largest tau with a - tau * g inside the box (inf if g is zero)."""
    lower, upper = bounds
    a = np.asarray(a, dtype=float)
    g = np.asarray(g, dtype=float)
    tau = np.inf
    down = g > 0
    up = g < 0
    with np.errstate(over="ignore"):
        if down.any():
            tau = min(tau, float(np.min((a[down] - np.asarray(lower)[down]) / g[down])))
        if up.any():
            tau = min(tau, float(np.min((np.asarray(upper)[up] - a[up]) / -g[up])))
    return max(tau, 0.0)


@dataclass
class LineSearchResult:
    tau: float
    evaluation: Evaluation
    stalled: bool
    probes: int


def _parabola_vertex(x, f):
    (x1, x2, x3), (f1, f2, f3) = x, f
    num = (x2 - x1) ** 2 * (f2 - f3) - (x2 - x3) ** 2 * (f2 - f1)
    den = (x2 - x1) * (f2 - f3) - (x2 - x3) * (f2 - f1)
    if den == 0:
        return None
    return x2 - 0.5 * num / den


def line_search(problem, base: Evaluation, g, tau_max, cfg: LineSearchConfig | None = None,
                trace=None, step=0) -> LineSearchResult:
    """Shrink/expand search for tau minimising D(a - tau g), tau in (0, tau_max].

    Starts at ``initial_step`` kPa along the normalised gradient (or tau_max
    if smaller), doubles while D keeps falling, halves while D is above the
    incumbent.  Once a minimum is bracketed, one parabolic probe refines it.
    Never returns a point worse than ``base``.
    """
    cfg = cfg or LineSearchConfig()
    g = np.asarray(g, dtype=float)
    gnorm = float(np.linalg.norm(g))
    if gnorm == 0 or tau_max <= 0:
        return LineSearchResult(0.0, base, True, 0)

    tried = {0.0: base}

    def probe(tau):
        a = np.clip(base.a - tau * g, problem.lower, problem.upper)
        ev = problem.evaluate(a)
        if trace is not None:
            trace.add(LS_PROBE, step, ev, problem)
        tried[tau] = ev
        return ev

    tau = min(tau_max, cfg.initial_step / gnorm)
    ev = probe(tau)
    bracket = None
    if ev.D < base.D:
        prev_tau = 0.0
        while len(tried) - 1 < cfg.max_probes and tau < tau_max:
            nxt = min(tau * cfg.expand, tau_max)
            ev2 = probe(nxt)
            if ev2.D >= tried[tau].D:
                bracket = (prev_tau, tau, nxt)
                break
            prev_tau, tau = tau, nxt
    else:
        hi = tau
        while len(tried) - 1 < cfg.max_probes:
            tau *= cfg.shrink
            ev = probe(tau)
            if ev.D < base.D:
                bracket = (0.0, tau, hi)
                break
            hi = tau

    if cfg.refine and bracket is not None and len(tried) - 1 < cfg.max_probes:
        fs = [tried[t].D for t in bracket]
        tq = _parabola_vertex(bracket, fs)
        lo, hi = bracket[0], bracket[2]
        if tq is not None and lo < tq < hi and abs(tq - bracket[1]) > 1e-3 * (hi - lo):
            probe(tq)

    best_tau = min(tried, key=lambda t: (tried[t].D, t))
    best = tried[best_tau]
    if not best.D < base.D:
        return LineSearchResult(0.0, base, True, len(tried) - 1)
    return LineSearchResult(best_tau, best, False, len(tried) - 1)


# --------------------------------------------------------------------------
# Broyden machinery
# --------------------------------------------------------------------------

def svd_inverse(J, rcond: float = 1e-10) -> np.ndarray:
    U, s, Vt = np.linalg.svd(np.asarray(J, dtype=float))
    if s[0] == 0 or s[-1] < rcond * s[0]:
        raise SingularJacobian("singular Jacobian")
    return (Vt.T / s) @ U.T


def broyden_inverse_update(J_inv, da, dd) -> np.ndarray:
    """Good-Broyden update of the inverse Jacobian (Sherman-Morrison form).

    The result maps ``dd`` exactly onto ``da`` (inverse secant condition).
    """
    J_inv = np.asarray(J_inv, dtype=float)
    da = np.asarray(da, dtype=float)
    dd = np.asarray(dd, dtype=float)
    Jdd = J_inv @ dd
    den = float(da @ Jdd)
    if not abs(den) > 1e-12 * np.linalg.norm(da) * np.linalg.norm(dd):
        raise BroydenBreakdown("update breakdown")
    return J_inv + np.outer(da - Jdd, da @ J_inv) / den


def broyden_step(J_inv, a, d, lam, bounds) -> np.ndarray:
    """a - lam * J^-1 d, clamped into the box."""
    lower, upper = bounds
    return np.clip(np.asarray(a) - lam * (np.asarray(J_inv) @ np.asarray(d)), lower, upper)


def secant_residual(J_inv, da, dd) -> float:
    return float(np.linalg.norm(J_inv @ dd - da) / np.linalg.norm(da))


# --------------------------------------------------------------------------
# the controller
# --------------------------------------------------------------------------

def _relative_change(d_old, d_new) -> float:
    if d_new == 0:
        return 0.0 if d_old == 0 else np.inf
    return abs(d_new - d_old) / d_new


def estimate_pose(problem, cur: Evaluation, trace, step) -> Evaluation:
    res = problem.register(cur)
    rescored = problem.rescore(cur, res.transform)
    # the pose only moves when it does not raise D, keeping accepted D monotone
    if rescored.D <= cur.D:
        problem.pose = res.transform
        cur = rescored
    trace.add(ICP, step, cur, problem)
    return cur


def hybrid_solve(problem, a0, cfg: SolverConfig | None = None, trace: SolverTrace | None = None) -> SolveResult:
    """Closed-loop actuation search (gradient descent + Broyden + ICP).

    Outer iteration: pose estimation, forward-difference gradient and
    Jacobian from the same k probes, clamped line search along -g, the
    relative-change termination test, then Broyden steps on d while they
    keep lowering D.  A Broyden step that raises D is rolled back and
    control returns to the gradient step.  ``i`` counts accepted steps of
    either kind and is capped by ``i_max``.
    """
    cfg = cfg or SolverConfig()
    trace = trace or SolverTrace(problem.k, cfg.actuation_ms)
    t0 = time.perf_counter()
    bounds = (problem.lower, problem.upper)

    cur = problem.evaluate(np.asarray(a0, dtype=float))
    trace.add(FD_PROBE, 0, cur, problem, accepted=True)
    terminated = I_MAX
    i = 0
    outer = 0
    while i < cfg.i_max:
        if cfg.icp and outer % cfg.icp_period == 0:
            cur = estimate_pose(problem, cur, trace, i)
        outer += 1

        fd = fd_probes(problem, cur, cfg.fd_delta, trace, i)
        g = numerical_gradient(problem, cur.a, cfg.fd_delta, fd)
        g = project_gradient(cur.a, g, *bounds)
        tau_max = clamp_step(cur.a, g, bounds)
        ls = line_search(problem, cur, g, tau_max, cfg.line_search, trace, i)
        prev, cur = cur, ls.evaluation
        trace.add(GDS_STEP, i, cur, problem, accepted=True)
        i += 1
        if _relative_change(prev.D, cur.D) <= cfg.rel_tol:
            terminated = REL_TOL
            break
        if not cfg.broyden:
            continue

        try:
            J_inv = svd_inverse(jacobian_fd(problem, prev.a, cfg.fd_delta, fd))
        except SingularJacobian:
            continue
        inner = 0
        while i < cfg.i_max and inner < cfg.broyden_step_cap:
            da, dd = cur.a - prev.a, cur.d - prev.d
            try:
                J_inv = broyden_inverse_update(J_inv, da, dd)
            except BroydenBreakdown:
                break
            trace.secant_residuals.append(secant_residual(J_inv, da, dd))
            a_next = broyden_step(J_inv, cur.a, cur.d, cfg.broyden_lambda, bounds)
            if np.array_equal(a_next, cur.a):
                break
            ev = problem.evaluate(a_next)
            if ev.D > cur.D:
                trace.add(BROYDEN_STEP, i, ev, problem)
                trace.add(ROLLBACK, i, cur, problem)
                break
            trace.add(BROYDEN_STEP, i, ev, problem, accepted=True)
            prev, cur = cur, ev
            i += 1
            inner += 1

    trace.wall_time = time.perf_counter() - t0
    return SolveResult(cur.a.copy(), getattr(problem, "pose", RigidTransform.identity()), cur.D, trace, terminated, cur)


def gradient_descent_solve(problem, a0, cfg: SolverConfig | None = None) -> SolveResult:
    """The same controller with Broyden acceleration switched off."""
    cfg = cfg or SolverConfig()
    return hybrid_solve(problem, a0, replace(cfg, broyden=False))


# --------------------------------------------------------------------------
# fixed-step incremental baseline
# --------------------------------------------------------------------------

def region_error_signs(problem, ev: Evaluation) -> np.ndarray:
    """Per-region sign of the mean signed gap along the sample normals.

    +1 means the target lies outside the membrane there (inflate).
    """
    gap = np.einsum("ij,ij->i", ev.value.closest.points - ev.samples.points, ev.samples.normals)
    w = ev.samples.weights
    mean_gap = (w.T @ gap) / np.maximum(w.sum(axis=0), 1e-300)
    return np.sign(mean_gap)


def fixed_step_solve(problem, a0, step: float, max_evals: int = 400,
                     actuation_ms: float = 12500.0) -> SolveResult:
    """Incremental controller: each channel moves by +-step toward its region's error.

    A move is kept only if D decreases; the run ends when a full sweep over
    the channels moves nothing or the evaluation budget is spent.
    """
    trace = SolverTrace(problem.k, actuation_ms)
    t0 = time.perf_counter()
    start = problem.evals
    cur = problem.evaluate(np.asarray(a0, dtype=float))
    trace.add(FD_PROBE, 0, cur, problem, accepted=True)
    i = 0
    terminated = I_MAX
    while problem.evals - start < max_evals:
        moved = False
        for ch in range(problem.k):
            if problem.evals - start >= max_evals:
                break
            s = region_error_signs(problem, cur)[ch]
            if s == 0:
                continue
            a = cur.a.copy()
            a[ch] = np.clip(a[ch] + s * step, problem.lower[ch], problem.upper[ch])
            if a[ch] == cur.a[ch]:
                continue
            ev = problem.evaluate(a)
            trace.add(LS_PROBE, i, ev, problem)
            if ev.D < cur.D:
                cur = ev
                i += 1
                moved = True
                trace.add(GDS_STEP, i, cur, problem, accepted=True)
        if not moved:
            terminated = REL_TOL
            break
    trace.wall_time = time.perf_counter() - t0
    return SolveResult(cur.a.copy(), problem.pose, cur.D, trace, terminated, cur)
