"""Analytic pneumatic membrane used as the black-box plant.

Each chamber raises a raised-cosine bump whose height saturates with
pressure (tanh).  The summed displacement is smoothed by a few Laplacian
passes to couple neighbouring chambers through the skin, then isotropic
Gaussian scanner noise is added.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import TriangleMesh, grid_mesh


class ActuationRangeError(ValueError):
    pass


@dataclass(frozen=True)
class Chamber:
    name: str
    centers: tuple  # one or more (x, y) in mm; several centres share one pressure line
    radii: tuple  # (rx, ry) in mm
    a_max: float = 25.0  # mm of rise at saturation
    p_ref: float = 15.0  # kPa


@dataclass(frozen=True)
class MembraneModel:
    chambers: tuple
    width: float = 300.0  # x extent, mm
    height: float = 450.0  # y extent (vertical), mm
    grid_shape: tuple = (64, 48)  # (rows along y, cols along x)
    smoothing_passes: int = 4
    noise: float = 0.0  # mm
    hysteresis: float = 0.0
    p_min: float = 0.0
    p_max: float = 30.0
    base_depth: tuple = (40.0, 10.0)  # mm of crown across x and along y

    def __post_init__(self):
        if not 0.0 <= self.hysteresis < 1.0:
            raise ValueError("hysteresis must lie in [0, 1)")
        if self.p_max <= self.p_min:
            raise ValueError("empty pressure range")

    @property
    def k(self) -> int:
        return len(self.chambers)

    @property
    def bounds(self):
        return np.full(self.k, self.p_min), np.full(self.k, self.p_max)

    def grid_xy(self):
        rows, cols = self.grid_shape
        x = np.linspace(0.0, self.width, cols)
        y = np.linspace(0.0, self.height, rows)
        return np.meshgrid(x, y)  # (rows, cols) each

    def uv_grid(self) -> np.ndarray:
        rows, cols = self.grid_shape
        u, v = np.meshgrid(np.linspace(0, 1, cols), np.linspace(0, 1, rows))
        return np.stack([u.ravel(), v.ravel()], axis=1)

    def base_field(self, x, y) -> np.ndarray:
        cx, cy = self.width / 2, self.height / 2
        ax, ay = self.base_depth
        return ax * (1 - ((x - cx) / cx) ** 2) + ay * (1 - ((y - cy) / cy) ** 2)

    def bump(self, i, x, y) -> np.ndarray:
        ch = self.chambers[i]
        out = np.zeros_like(x)
        for cx, cy in ch.centers:
            r = np.hypot((x - cx) / ch.radii[0], (y - cy) / ch.radii[1])
            out += np.where(r < 1.0, 0.5 * (1.0 + np.cos(np.pi * np.minimum(r, 1.0))), 0.0)
        return out

    def with_(self, **kw) -> "MembraneModel":
        return replace(self, **kw)


def mannequin_model(**kw) -> MembraneModel:
    """Four channels: chest (left+right on one line), upper waist, lower waist, belly.

    The belly chamber sits over the seam between the two waist chambers.
    """
    chambers = (
        Chamber("chest", ((85.0, 365.0), (215.0, 365.0)), (70.0, 75.0), 25.0, 15.0),
        Chamber("upper_waist", ((150.0, 235.0),), (150.0, 80.0), 22.0, 15.0),
        Chamber("lower_waist", ((150.0, 80.0),), (150.0, 80.0), 22.0, 15.0),
        Chamber("belly", ((150.0, 150.0),), (85.0, 75.0), 18.0, 12.0),
    )
    return MembraneModel(chambers, **kw)


def reduced_model(**kw) -> MembraneModel:
    """Two channels (upper / lower halves), for brute-force checks."""
    chambers = (
        Chamber("upper", ((150.0, 330.0),), (150.0, 120.0), 25.0, 15.0),
        Chamber("lower", ((150.0, 120.0),), (150.0, 120.0), 25.0, 15.0),
    )
    return MembraneModel(chambers, **kw)


PRESETS = {"mannequin4": mannequin_model, "reduced2": reduced_model}


@dataclass
class SurfaceObservation:
    cloud: np.ndarray  # (rows * cols, 3)
    mesh: TriangleMesh
    uv_hint: np.ndarray
    grid_shape: tuple
    eval_count: int = 0


def _smooth(field_, passes):
    # 5-point Laplacian relaxation with mirrored borders
    for _ in range(passes):
        p = np.pad(field_, 1, mode="edge")
        lap = p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * field_
        field_ = field_ + 0.125 * lap
    return field_


def height_field(model: MembraneModel, pressures) -> np.ndarray:
    """Noise-free heights on the model grid for effective pressures."""
    x, y = model.grid_xy()
    rise = np.zeros_like(x)
    for i, ch in enumerate(model.chambers):
        rise += ch.a_max * np.tanh(pressures[i] / ch.p_ref) * model.bump(i, x, y)
    return model.base_field(x, y) + _smooth(rise, model.smoothing_passes)


def _check_range(model, a):
    a = np.asarray(a, dtype=float)
    if a.shape != (model.k,):
        raise ValueError(f"expected {model.k} pressures, got shape {a.shape}")
    if np.any(a < model.p_min) or np.any(a > model.p_max) or not np.all(np.isfinite(a)):
        raise ActuationRangeError(f"actuation out of range: {a.tolist()} not in [{model.p_min}, {model.p_max}]")
    return a


def actuate(model: MembraneModel, a, rng_seed=None, previous=None) -> SurfaceObservation:
    """Observe the membrane under actuation ``a`` (kPa).

    ``previous`` is the last effective pressure vector when hysteresis is on.
    Noise is drawn from ``rng_seed`` (an int or a SeedSequence).
    """
    a = _check_range(model, a)
    eff = a if previous is None or model.hysteresis == 0 else a + model.hysteresis * (np.asarray(previous) - a)
    x, y = model.grid_xy()
    pts = np.stack([x, y, height_field(model, eff)], axis=-1)
    if model.noise > 0:
        rng = np.random.default_rng(rng_seed)
        pts = pts + rng.normal(0.0, model.noise, size=pts.shape)
    return SurfaceObservation(pts.reshape(-1, 3), grid_mesh(pts), model.uv_grid(), model.grid_shape, 1)


class Plant:
    """Stateful wrapper: counts actuations and derives per-evaluation noise seeds.

    With hysteresis the plant remembers the last effective pressure and must
    be driven serially (``stateless`` is False).
    """

    def __init__(self, model: MembraneModel, seed: int = 0):
        self.model = model
        self.seed = int(seed)
        self.eval_count = 0
        self._previous = None

    @property
    def k(self) -> int:
        return self.model.k

    @property
    def bounds(self):
        return self.model.bounds

    @property
    def stateless(self) -> bool:
        return self.model.hysteresis == 0

    def actuate(self, a) -> SurfaceObservation:
        a = _check_range(self.model, a)
        seed = np.random.SeedSequence(self.seed, spawn_key=(0x504C414E, self.eval_count))
        obs = actuate(self.model, a, seed, self._previous)
        if not self.stateless:
            prev = a if self._previous is None else self._previous
            self._previous = a + self.model.hysteresis * (prev - a)
        self.eval_count += 1
        obs.eval_count = self.eval_count
        return obs


# --------------------------------------------------------------------------
# targets
# --------------------------------------------------------------------------

def make_reachable_target(model: MembraneModel, a_star) -> TriangleMesh:
    """Noise-free membrane at ``a_star``: a target whose optimum is known."""
    clean = model.with_(noise=0.0, hysteresis=0.0)
    return actuate(clean, a_star).mesh


@dataclass(frozen=True)
class BumpSpec:
    """Extra Gaussian feature (mm) that no chamber combination can produce.

    The default is a dent off-centre over the belly / lower-waist overlap.
    """

    amplitude: float = -12.0
    center: tuple = (220.0, 160.0)
    sigma: float = 30.0


def make_unreachable_target(model: MembraneModel, a_star, bump: BumpSpec = BumpSpec()) -> TriangleMesh:
    clean = model.with_(noise=0.0, hysteresis=0.0)
    x, y = clean.grid_xy()
    z = height_field(clean, _check_range(clean, a_star))
    r2 = (x - bump.center[0]) ** 2 + (y - bump.center[1]) ** 2
    z = z + bump.amplitude * np.exp(-r2 / (2.0 * bump.sigma ** 2))
    return grid_mesh(np.stack([x, y, z], axis=-1))


def make_flat_waist_target(model: MembraneModel, a_star, waist=(40.0, 270.0)) -> TriangleMesh:
    """Target whose waist band is flattened along x (a plateau the chambers cannot form).

    Heights inside the band ``y in waist`` are replaced by their row maximum,
    blended in over 30 mm at each side of the band.
    """
    clean = model.with_(noise=0.0, hysteresis=0.0)
    x, y = clean.grid_xy()
    z = height_field(clean, _check_range(clean, a_star))
    plateau = np.repeat(z.max(axis=1, keepdims=True), z.shape[1], axis=1)
    lo, hi = waist
    ramp = np.clip(np.minimum(y - lo, hi - y) / 30.0, 0.0, 1.0)
    z = z + ramp * (plateau - z) * 0.6
    return grid_mesh(np.stack([x, y, z], axis=-1))
