"""Point-to-point ICP that poses the target against static samples."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import RigidTransform, SpatialIndex, closest_points_posed, rotation_angle


class DegenerateCorrespondence(ValueError):
    pass


@dataclass
class IcpConfig:
    max_iterations: int = 50
    tol_translation: float = 1e-4  # mm
    tol_rotation: float = 1e-6  # rad
    trim_fraction: float = 0.0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0.0 <= self.trim_fraction < 0.5:
            raise ValueError("trim_fraction must lie in [0, 0.5)")


@dataclass
class IcpResult:
    transform: RigidTransform
    iterations: int
    final_rms: float
    converged: bool
    rms_history: list = field(default_factory=list)


def best_rigid(source, dest) -> RigidTransform:
    """Least-squares rigid motion taking ``source`` onto ``dest``.

    Closed form: centroids plus SVD of the cross-covariance, with the
    reflection case corrected so det(R) = +1.
    """
    src = np.asarray(source, dtype=float)
    dst = np.asarray(dest, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("source and dest must be matching (n, 3) arrays")
    if len(src) < 3:
        raise DegenerateCorrespondence("degenerate correspondence set")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, s, Vt = np.linalg.svd(H)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateCorrespondence("degenerate correspondence set")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, cd - R @ cs)


def _trim(dist, fraction):
    if fraction <= 0:
        return np.ones(len(dist), dtype=bool)
    keep = len(dist) - int(np.floor(fraction * len(dist)))
    order = np.argsort(dist, kind="stable")
    mask = np.zeros(len(dist), dtype=bool)
    mask[order[:keep]] = True
    return mask


def icp_pose(sample_points, target: SpatialIndex, init: RigidTransform | None = None,
             cfg: IcpConfig | None = None) -> IcpResult:
    """Pose of the target mesh minimising sum ||p_j - (R c_j + t)||^2.

    The samples stay fixed.  Each iteration finds the closest points c_j on
    the target under the current pose, then solves the correspondence-fixed
    problem exactly; that makes the RMS non-increasing when nothing is trimmed.
    """
    cfg = cfg or IcpConfig()
    p = np.asarray(getattr(sample_points, "points", sample_points), dtype=float)
    pose = init or RigidTransform.identity()

    cp = closest_points_posed(target, p, pose)
    rms = float(np.sqrt(np.mean(cp.distances ** 2)))
    history = [rms]
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        keep = _trim(cp.distances, cfg.trim_fraction)
        # correspondences in the target's own frame
        local = (cp.points[keep] - pose.translation) @ pose.rotation
        new = best_rigid(local, p[keep])
        dt = float(np.linalg.norm(new.translation - pose.translation))
        dr = rotation_angle(new.rotation @ pose.rotation.T)
        pose = new
        cp = closest_points_posed(target, p, pose)
        rms = float(np.sqrt(np.mean(cp.distances ** 2)))
        history.append(rms)
        if dt < cfg.tol_translation and dr < cfg.tol_rotation:
            converged = True
            break
    return IcpResult(pose, it, rms, converged, history)
