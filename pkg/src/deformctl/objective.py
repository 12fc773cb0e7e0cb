"""Shape-approximation error with per-region decomposition.

    D = sum_j ||p_j - c_j||^2 + w_n * sum_j ||n(p_j) - n(c_j)||^2

where c_j is the closest point of p_j on the posed target.  D splits into
k region terms D_l whose sum is D; samples shared by two regions count
half in each.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .bspline import SampleSet
from .geometry import ClosestPoints, RigidTransform, SpatialIndex, closest_points_posed

DECOMPOSITION_RTOL = 1e-9


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class SubRegionPartition:
    """Axis-aligned uv rectangles (u0, u1, v0, v1), one per region.

    Intervals are half-open on the high side except at 1, so samples on a
    shared border belong to exactly one of the abutting rectangles.
    """

    rectangles: tuple
    names: tuple = ()

    def __post_init__(self):
        rects = tuple(tuple(float(x) for x in r) for r in self.rectangles)
        for r in rects:
            if len(r) != 4 or not (0 <= r[0] < r[1] <= 1 and 0 <= r[2] < r[3] <= 1):
                raise PartitionError(f"bad region rectangle {r}")
        object.__setattr__(self, "rectangles", rects)
        names = tuple(self.names) or tuple(f"G{i + 1}" for i in range(len(rects)))
        object.__setattr__(self, "names", names)

    @property
    def k(self) -> int:
        return len(self.rectangles)

    def membership(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        u, v = uv[:, 0:1], uv[:, 1:2]
        r = np.array(self.rectangles)
        in_u = (u >= r[:, 0]) & ((u < r[:, 1]) | ((r[:, 1] == 1.0) & (u <= 1.0)))
        in_v = (v >= r[:, 2]) & ((v < r[:, 3]) | ((r[:, 3] == 1.0) & (v <= 1.0)))
        return in_u & in_v

    @classmethod
    def mannequin(cls) -> "SubRegionPartition":
        """Chest / upper waist / lower waist by height thirds, belly overlapping both waists.

        v runs bottom to top.
        """
        return cls(((0.0, 1.0, 2 / 3, 1.0),
                    (0.0, 1.0, 1 / 3, 2 / 3),
                    (0.0, 1.0, 0.0, 1 / 3),
                    (0.25, 0.75, 0.15, 0.5)),
                   ("chest", "upper_waist", "lower_waist", "belly"))

    @classmethod
    def halves(cls) -> "SubRegionPartition":
        return cls(((0.0, 1.0, 0.5, 1.0), (0.0, 1.0, 0.0, 0.5)), ("upper", "lower"))


def assign_regions(samples: SampleSet, partition: SubRegionPartition) -> SampleSet:
    """Fill ``samples.regions`` / ``samples.weights`` (1 per region, 1/2 in overlaps)."""
    member = partition.membership(samples.uv)
    count = member.sum(axis=1)
    if np.any(count == 0):
        j = int(np.flatnonzero(count == 0)[0])
        raise PartitionError(f"uncovered sample {j} at uv={tuple(samples.uv[j])}")
    samples.regions = member
    samples.weights = member / count[:, None]
    return samples


@dataclass
class ObjectiveConfig:
    normal_weight: float = 3.0e-3
    partition: SubRegionPartition = field(default_factory=SubRegionPartition.mannequin)

    def __post_init__(self):
        if self.normal_weight < 0:
            raise ValueError("normal_weight must be >= 0")


@dataclass
class ObjectiveValue:
    total: float
    components: np.ndarray
    distances: np.ndarray  # per-sample |p_j - c_j|, mm
    normal_sq: np.ndarray  # per-sample |n(p_j) - n(c_j)|^2
    eta: np.ndarray  # per-sample 1 - n(p_j).n(c_j)
    closest: ClosestPoints | None = None

    @property
    def position_term(self) -> float:
        return float(np.sum(self.distances ** 2))

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.distances ** 2)))

    @property
    def mean_distance(self) -> float:
        return float(np.mean(self.distances))

    @property
    def max_distance(self) -> float:
        return float(np.max(self.distances))


class Target:
    """Target mesh with its spatial index and current pose."""

    def __init__(self, mesh, pose: RigidTransform | None = None):
        self.mesh = mesh
        self.index = SpatialIndex(mesh)
        self.pose = pose or RigidTransform.identity()

    def closest(self, points, pose: RigidTransform | None = None) -> ClosestPoints:
        return closest_points_posed(self.index, points, pose or self.pose)


def evaluate(samples: SampleSet, target: Target, cfg: ObjectiveConfig,
             pose: RigidTransform | None = None) -> ObjectiveValue:
    """D and its region components for ``samples`` against the posed target."""
    if samples.weights is None:
        assign_regions(samples, cfg.partition)
    cp = target.closest(samples.points, pose)
    diff = samples.points - cp.points
    dist_sq = np.einsum("ij,ij->i", diff, diff)
    dn = samples.normals - cp.normals
    normal_sq = np.einsum("ij,ij->i", dn, dn)
    per_sample = dist_sq + cfg.normal_weight * normal_sq
    total = float(np.sum(per_sample))
    components = samples.weights.T @ per_sample
    if abs(total - components.sum()) > DECOMPOSITION_RTOL * total:
        raise ArithmeticError(f"decomposition identity violated: D={total!r}, sum={components.sum()!r}")
    eta = 1.0 - np.einsum("ij,ij->i", samples.normals, cp.normals)
    return ObjectiveValue(total, components, np.sqrt(dist_sq), normal_sq, eta, cp)


def normal_histogram(samples: SampleSet, target: Target, bins: int = 20,
                     range_max: float = 2.0, mask=None, pose: RigidTransform | None = None):
    """Histogram of eta = 1 - n(p).n(c) over the samples (optionally masked).

    Returns (counts, edges, mean_eta).
    """
    cp = target.closest(samples.points, pose)
    eta = np.clip(1.0 - np.einsum("ij,ij->i", samples.normals, cp.normals), 0.0, 2.0)
    if mask is not None:
        eta = eta[np.asarray(mask, dtype=bool)]
    counts, edges = np.histogram(eta, bins=bins, range=(0.0, range_max))
    return counts, edges, float(eta.mean())


def write_sample_csv(path, samples: SampleSet, value: ObjectiveValue) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["u", "v", "x", "y", "z", "dist_mm", "eta"])
        for (u, v), p, d, e in zip(samples.uv, samples.points, value.distances, value.eta):
            w.writerow([repr(float(u)), repr(float(v)), repr(float(p[0])), repr(float(p[1])),
                        repr(float(p[2])), repr(float(d)), repr(float(e))])
