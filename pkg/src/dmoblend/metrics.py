"""Biobjective quality indicators (minimization)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ReferencePoint:
    r1: float
    r2: float

    def __post_init__(self):
        if not (self.r1 > 0 and self.r2 > 0):
            raise ValueError("reference point coordinates must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.r1, self.r2])


def reference_point_for(n_pt: int, n_periods: int) -> ReferencePoint:
    scale = n_periods * n_pt
    return ReferencePoint(0.005 * scale, 0.05 * scale)


def reference_point(inst) -> ReferencePoint:
    """HV reference point of an instance; grows linearly with horizon and product tanks."""
    return reference_point_for(inst.n_pt, inst.n_periods)


def dominates(a, b) -> bool:
    """Pareto dominance: no worse in every objective and strictly better in one."""
    a = np.asarray(a)
    b = np.asarray(b)
    return bool(np.all(a <= b) and np.any(a < b))


def dominance_matrix(points: np.ndarray) -> np.ndarray:
    """``D[p, q]`` is True when point p dominates point q."""
    p = np.asarray(points, dtype=np.float64)
    le = np.all(p[:, None, :] <= p[None, :, :], axis=-1)
    lt = np.any(p[:, None, :] < p[None, :, :], axis=-1)
    return le & lt


def nondominated_mask(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) == 0:
        return np.zeros(0, dtype=bool)
    return ~dominance_matrix(points).any(axis=0)


def nondominated_sort(points: np.ndarray) -> list[np.ndarray]:
    """Partition point indices into successive nondominated fronts."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n == 0:
        return []
    dom = dominance_matrix(points)
    counts = dom.sum(axis=0)
    fronts = []
    current = np.flatnonzero(counts == 0)
    assigned = np.zeros(n, dtype=bool)
    while current.size:
        fronts.append(current)
        assigned[current] = True
        counts = counts - dom[current].sum(axis=0)
        current = np.flatnonzero((counts == 0) & ~assigned)
    return fronts


def crowding_distance(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    n, m = points.shape
    dist = np.zeros(n)
    if n <= 2:
        dist[:] = np.inf
        return dist
    for k in range(m):
        order = np.argsort(points[:, k], kind="stable")
        col = points[order, k]
        dist[order[0]] = dist[order[-1]] = np.inf
        spread = col[-1] - col[0]
        if spread == 0:
            continue
        dist[order[1:-1]] += (col[2:] - col[:-2]) / spread
    return dist


def hypervolume(front, r: ReferencePoint) -> float:
    """Exact 2-D dominated area inside the reference box, divided by ``r1 * r2``.

    Points not strictly inside the box contribute nothing.
    """
    pts = np.asarray(front, dtype=np.float64).reshape(-1, 2)
    pts = pts[(pts[:, 0] < r.r1) & (pts[:, 1] < r.r2)]
    if len(pts) == 0:
        return 0.0
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    area = 0.0
    best_y = r.r2
    for x, y in pts:
        if y < best_y:
            area += (r.r1 - x) * (best_y - y)
            best_y = y
    return area / (r.r1 * r.r2)


def set_coverage(a, b) -> float:
    """Fraction of ``b`` dominated by at least one point of ``a``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(b) == 0:
        raise ValueError("set coverage is undefined for an empty second set")
    if len(a) == 0:
        return 0.0
    le = np.all(a[:, None, :] <= b[None, :, :], axis=-1)
    lt = np.any(a[:, None, :] < b[None, :, :], axis=-1)
    return float((le & lt).any(axis=0).mean())


SUMMARY_FIELDS = ["algorithm", "scale", "n", "seed", "hv", "runtime"]


def append_run_summary(path, algorithm: str, scale: str, n: int, seed: int, hv: float, runtime: float) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(SUMMARY_FIELDS)
        writer.writerow([algorithm, scale, n, seed, repr(float(hv)), f"{runtime:.3f}"])
