"""Cubic B-spline patches: least-squares fitting, evaluation and sampling.

The fitted patch smooths a noisy observation; the representative samples
used by the objective are taken on a uniform uv grid and snapped back onto
the raw observed mesh.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import linalg

from .geometry import SpatialIndex, TriangleMesh, build_spatial_index

DEGREE = 3


class FitError(ValueError):
    pass


def clamped_knots(n_ctrl: int, degree: int = DEGREE) -> np.ndarray:
    if n_ctrl < degree + 1:
        raise ValueError(f"need at least {degree + 1} control points, got {n_ctrl}")
    inner = np.arange(1, n_ctrl - degree) / (n_ctrl - degree)
    return np.concatenate([np.zeros(degree + 1), inner, np.ones(degree + 1)])


def basis_matrix(knots, t, degree: int = DEGREE, deriv: int = 0) -> np.ndarray:
    """Dense matrix of B-spline basis values (or first derivatives) at ``t``.

    Cox-de Boor recursion evaluated for all basis functions at once.  The
    right end of the domain belongs to the last non-empty knot span.
    """
    knots = np.asarray(knots, dtype=float)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    n_ctrl = len(knots) - degree - 1
    last = np.flatnonzero(knots[:-1] < knots[1:])[-1]
    N = ((knots[:-1] <= t[:, None]) & (t[:, None] < knots[1:])).astype(float)
    N[t >= knots[last + 1], :] = 0.0
    N[t >= knots[last + 1], last] = 1.0

    def ratio(num, den):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)

    for p in range(1, degree + 1):
        m = len(knots) - p - 1
        if deriv and p == degree:
            left = ratio(p, knots[p:p + m] - knots[:m])
            right = ratio(p, knots[p + 1:p + 1 + m] - knots[1:m + 1])
            return left * N[:, :m] - right * N[:, 1:m + 1]
        left = ratio(t[:, None] - knots[:m], knots[p:p + m] - knots[:m])
        right = ratio(knots[p + 1:p + 1 + m] - t[:, None], knots[p + 1:p + 1 + m] - knots[1:m + 1])
        N = left * N[:, :m] + right * N[:, 1:m + 1]
    assert N.shape[1] == n_ctrl
    return N


@lru_cache(maxsize=64)
def _cached_basis(n_ctrl, t_bytes, deriv):
    t = np.frombuffer(t_bytes, dtype=float)
    B = basis_matrix(clamped_knots(n_ctrl), t, deriv=deriv)
    B.setflags(write=False)
    return B


def _basis(n_ctrl, t, deriv=0):
    return _cached_basis(n_ctrl, np.ascontiguousarray(t, dtype=float).tobytes(), deriv)


@dataclass(frozen=True)
class BSplinePatch:
    """Bicubic clamped uniform patch.

    ``control_points`` has shape (ctrl_u, ctrl_v, 3).  ``orientation`` picks
    the normal side: +1 puts the normal's z-component positive at the patch
    centre (outward from the mannequin core), -1 the opposite side.
    """

    control_points: np.ndarray
    orientation: int = 1
    fit_rms: float = field(default=float("nan"), compare=False)

    def __post_init__(self):
        cp = np.array(self.control_points, dtype=float)
        if cp.ndim != 3 or cp.shape[2] != 3:
            raise ValueError("control_points must have shape (ctrl_u, ctrl_v, 3)")
        if self.orientation not in (1, -1):
            raise ValueError("orientation must be +1 or -1")
        cp.setflags(write=False)
        object.__setattr__(self, "control_points", cp)
        centre = self._raw_normals(np.array([0.5]), np.array([0.5]))[0]
        object.__setattr__(self, "_sign", self.orientation * (1.0 if centre[2] >= 0 else -1.0))

    @property
    def ctrl_u(self) -> int:
        return self.control_points.shape[0]

    @property
    def ctrl_v(self) -> int:
        return self.control_points.shape[1]

    @property
    def knots_u(self) -> np.ndarray:
        return clamped_knots(self.ctrl_u)

    @property
    def knots_v(self) -> np.ndarray:
        return clamped_knots(self.ctrl_v)

    def flipped(self) -> "BSplinePatch":
        return BSplinePatch(self.control_points, -self.orientation, self.fit_rms)

    def _combine(self, Bu, Bv):
        return np.einsum("mi,mj,ijk->mk", Bu, Bv, self.control_points)

    def points(self, u, v) -> np.ndarray:
        u, v = _check_uv(u, v)
        return self._combine(_basis(self.ctrl_u, u), _basis(self.ctrl_v, v))

    def partials(self, u, v):
        u, v = _check_uv(u, v)
        Bu, Bv = _basis(self.ctrl_u, u), _basis(self.ctrl_v, v)
        dBu, dBv = _basis(self.ctrl_u, u, 1), _basis(self.ctrl_v, v, 1)
        return self._combine(dBu, Bv), self._combine(Bu, dBv)

    def _raw_normals(self, u, v):
        su, sv = self.partials(u, v)
        n = np.cross(su, sv)
        length = np.linalg.norm(n, axis=1)
        scale = np.linalg.norm(su, axis=1) * np.linalg.norm(sv, axis=1)
        if np.any(length <= 1e-12 * np.maximum(scale, 1e-300)):
            raise FitError("singular normal")
        return n / length[:, None]

    def normals(self, u, v) -> np.ndarray:
        return self._sign * self._raw_normals(*_check_uv(u, v))


def _check_uv(u, v):
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    u, v = np.broadcast_arrays(u, v)
    if u.min() < 0 or u.max() > 1 or v.min() < 0 or v.max() > 1:
        raise ValueError("(u, v) outside [0, 1]^2")
    return u.ravel(), v.ravel()


def evaluate(patch: BSplinePatch, u, v) -> np.ndarray:
    """Point(s) on the patch; scalar (u, v) gives a single 3-vector."""
    pts = patch.points(u, v)
    return pts[0] if np.ndim(u) == 0 and np.ndim(v) == 0 else pts


def evaluate_normal(patch: BSplinePatch, u, v) -> np.ndarray:
    n = patch.normals(u, v)
    return n[0] if np.ndim(u) == 0 and np.ndim(v) == 0 else n


# --------------------------------------------------------------------------
# parameterisation and fitting
# --------------------------------------------------------------------------

def parameterize_cloud(cloud, hint=None) -> np.ndarray:
    """uv coordinates in [0, 1]^2 for each cloud point.

    A plant-supplied grid hint is used verbatim.  Otherwise points are
    projected on their best-fit plane (principal axes, largest spread first,
    each axis signed so its dominant coordinate is positive) and rescaled.
    """
    cloud = np.asarray(cloud, dtype=float)
    if hint is not None:
        hint = np.asarray(hint, dtype=float)
        if hint.shape != (len(cloud), 2):
            raise ValueError("uv hint does not match the cloud")
        return hint
    if len(cloud) < 16:
        raise FitError("need at least 16 points to parameterise")
    centred = cloud - cloud.mean(axis=0)
    _, s, Vt = np.linalg.svd(centred, full_matrices=False)
    if s[1] <= 1e-9 * s[0]:
        raise FitError("degenerate parameterization")
    axes = Vt[:2]
    axes = axes * np.sign(axes[np.arange(2), np.abs(axes).argmax(axis=1)])[:, None]
    proj = centred @ axes.T
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    return (proj - lo) / (hi - lo)


def _second_difference(n):
    D = np.zeros((n - 2, n))
    for i in range(n - 2):
        D[i, i:i + 3] = (1.0, -2.0, 1.0)
    return D


class PatchFitter:
    """Least-squares fitter for a fixed uv layout.

    The factorisation is reused across clouds sharing the same uv (the plant
    always reports on the same grid), so refitting costs one solve.
    """

    def __init__(self, uv, ctrl_u: int = 14, ctrl_v: int = 14, regularization: float = 1e-4):
        uv = np.asarray(uv, dtype=float)
        if len(uv) < ctrl_u * ctrl_v:
            raise FitError(f"underdetermined fit: {len(uv)} points for {ctrl_u}x{ctrl_v} control points")
        self.ctrl_u, self.ctrl_v = ctrl_u, ctrl_v
        Bu = _basis(ctrl_u, uv[:, 0])
        Bv = _basis(ctrl_v, uv[:, 1])
        A = (Bu[:, :, None] * Bv[:, None, :]).reshape(len(uv), ctrl_u * ctrl_v)
        AtA = A.T @ A
        if regularization > 0:
            Lu = np.kron(_second_difference(ctrl_u), np.eye(ctrl_v))
            Lv = np.kron(np.eye(ctrl_u), _second_difference(ctrl_v))
            LtL = Lu.T @ Lu + Lv.T @ Lv
            # weight is relative to the data term's scale so it is count-independent
            rho = regularization * np.trace(AtA) / np.trace(LtL)
            M = AtA + rho * LtL
        else:
            M = AtA
        w = np.linalg.eigvalsh(M)
        if w[0] <= 1e-12 * w[-1]:
            raise FitError("underdetermined fit: normal equations are singular")
        self._A = A
        self._chol = linalg.cho_factor(M)

    def fit(self, cloud) -> BSplinePatch:
        cloud = np.asarray(cloud, dtype=float)
        if len(cloud) != len(self._A):
            raise ValueError("cloud does not match the fitter's uv layout")
        C = linalg.cho_solve(self._chol, self._A.T @ cloud)
        resid = self._A @ C - cloud
        rms = float(np.sqrt(np.mean(np.sum(resid ** 2, axis=1))))
        return BSplinePatch(C.reshape(self.ctrl_u, self.ctrl_v, 3), 1, rms)


def fit_patch(cloud, uv, ctrl_u: int = 14, ctrl_v: int = 14, regularization: float = 1e-4) -> BSplinePatch:
    return PatchFitter(uv, ctrl_u, ctrl_v, regularization).fit(cloud)


# --------------------------------------------------------------------------
# representative samples
# --------------------------------------------------------------------------

@dataclass
class SampleSet:
    """Representative points p_j with normals, uv and sub-region weights.

    ``regions`` is an (n, k) boolean membership table and ``weights`` an
    (n, k) table whose rows sum to 1; both are filled by region assignment.
    """

    points: np.ndarray
    normals: np.ndarray
    uv: np.ndarray
    shape: tuple = (13, 25)
    regions: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __len__(self):
        return len(self.points)


def sample_grid(nu: int, nv: int) -> np.ndarray:
    uu, vv = np.meshgrid(np.linspace(0, 1, nu), np.linspace(0, 1, nv), indexing="ij")
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


def make_sample_set(patch: BSplinePatch, raw_mesh: TriangleMesh | SpatialIndex,
                    nu: int = 13, nv: int = 25) -> SampleSet:
    """Uniform uv samples on the patch, snapped to the closest point on the raw mesh.

    Normals come from the patch at the sample's (u, v).
    """
    uv = sample_grid(nu, nv)
    index = raw_mesh if isinstance(raw_mesh, SpatialIndex) else build_spatial_index(raw_mesh)
    on_patch = patch.points(uv[:, 0], uv[:, 1])
    snapped = index.query(on_patch).points
    return SampleSet(snapped, patch.normals(uv[:, 0], uv[:, 1]), uv, (nu, nv))


# --------------------------------------------------------------------------
# text serialisation
# --------------------------------------------------------------------------

def save_patch(patch: BSplinePatch, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"bspline3 {patch.ctrl_u} {patch.ctrl_v}\n")
        for p in patch.control_points.reshape(-1, 3):
            fh.write("%r %r %r\n" % tuple(map(float, p)))


def load_patch(path) -> BSplinePatch:
    lines = Path(path).read_text().split("\n")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "bspline3":
        raise ValueError(f"{path}: expected header 'bspline3 <ctrl_u> <ctrl_v>'")
    cu, cv = int(head[1]), int(head[2])
    rows = [l.split() for l in lines[1:] if l.strip()]
    if len(rows) != cu * cv:
        raise ValueError(f"{path}: expected {cu * cv} control points, found {len(rows)}")
    return BSplinePatch(np.array(rows, dtype=float).reshape(cu, cv, 3))
