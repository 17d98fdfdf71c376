"""Comparison algorithms: NSGA-II with time-slice recombination, and the unguided generator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import heuristic_schedules
from .denoiser import DenoiserModel
from .diffusion import NoiseSchedule
from .metrics import crowding_distance, nondominated_mask, nondominated_sort
from .problem import Instance, ObjectiveValue, is_feasible, objective_arrays, standardize, total_violation
from .sampler import FrontPoint, GuidanceConfig, sample_front, unguided

NO_WEIGHT = (float("nan"), float("nan"))


@dataclass
class Nsga2Config:
    population: int = 1024
    generations: int = 500
    crossover_rate: float = 0.9
    mutation_rate: float | None = None  # default 1 / decision dimension
    eta: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.crossover_rate <= 1:
            raise ValueError("crossover_rate must lie in [0, 1]")
        if self.mutation_rate is not None and not 0 <= self.mutation_rate <= 1:
            raise ValueError("mutation_rate must lie in [0, 1]")
        if self.eta <= 0:
            raise ValueError("distribution index must be positive")
        if self.population < 2 or self.population % 2:
            raise ValueError("population must be an even number >= 2")


def time_slice_crossover(a: np.ndarray, b: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Swap one contiguous window of periods (length 1..n/2) between two parents."""
    n = a.shape[-1]
    length = int(rng.integers(1, max(1, n // 2) + 1))
    start = int(rng.integers(0, n - length + 1))
    c1, c2 = a.copy(), b.copy()
    c1[..., start:start + length] = b[..., start:start + length]
    c2[..., start:start + length] = a[..., start:start + length]
    return c1, c2


def polynomial_mutation(x: np.ndarray, rate: float, eta: float, rng: np.random.Generator) -> np.ndarray:
    """Deb's bounded polynomial mutation on [0, 1] intensities."""
    x = x.copy()
    hit = rng.random(x.shape) < rate
    if not hit.any():
        return x
    y = x[hit]
    u = rng.random(y.shape)
    d1, d2 = y, 1.0 - y
    power = 1.0 / (eta + 1.0)
    low = u < 0.5
    delta = np.empty_like(y)
    val = 2.0 * u + (1.0 - 2.0 * u) * (1.0 - d1) ** (eta + 1.0)
    delta[low] = (val[low] ** power - 1.0)
    val = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - d2) ** (eta + 1.0)
    delta[~low] = (1.0 - val[~low] ** power)
    x[hit] = np.clip(y + delta, 0.0, 1.0)
    return x


def constrained_ranking(objectives: np.ndarray, violation: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rank and crowding under constraint domination.

    Feasible points are sorted into nondominated fronts; every infeasible
    point ranks below all of them, ordered by total violation.
    """
    n = len(objectives)
    rank = np.empty(n, dtype=np.int64)
    crowd = np.zeros(n)
    feasible = np.flatnonzero(violation == 0)
    next_rank = 0
    for front in nondominated_sort(objectives[feasible]):
        idx = feasible[front]
        rank[idx] = next_rank
        crowd[idx] = crowding_distance(objectives[idx])
        next_rank += 1
    infeasible = np.flatnonzero(violation > 0)
    if infeasible.size:
        # equal violation shares a rank
        _, level = np.unique(violation[infeasible], return_inverse=True)
        rank[infeasible] = next_rank + level
    return rank, crowd


def _survivors(rank: np.ndarray, crowd: np.ndarray, k: int) -> np.ndarray:
    order = np.lexsort((-crowd, rank))
    return order[:k]


def _tournament(rank: np.ndarray, crowd: np.ndarray, rng: np.random.Generator, k: int) -> np.ndarray:
    a = rng.integers(0, len(rank), k)
    b = rng.integers(0, len(rank), k)
    a_wins = (rank[a] < rank[b]) | ((rank[a] == rank[b]) & (crowd[a] >= crowd[b]))
    return np.where(a_wins, a, b)


def _evaluate(inst: Instance, pop: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    e_blend, e_yield = objective_arrays(inst, pop)
    return np.column_stack([e_blend, e_yield]), total_violation(inst, pop)


def _front_points(inst: Instance, pop: np.ndarray, objectives: np.ndarray, violation: np.ndarray) -> list[FrontPoint]:
    feasible = np.flatnonzero(violation == 0)
    keep = feasible[nondominated_mask(objectives[feasible])]
    _, first = np.unique(objectives[keep], axis=0, return_index=True)
    keep = keep[np.sort(first)]
    return [FrontPoint(pop[k], ObjectiveValue(float(objectives[k, 0]), float(objectives[k, 1]), 0.0, True), NO_WEIGHT)
            for k in keep]


def nsga2_optimize(inst: Instance, cfg: Nsga2Config, history: list | None = None) -> list[FrontPoint]:
    """Evolve schedule tensors; returns the nondominated feasible set of the last population.

    Crossover children that break the switch budget or an inventory limit are
    repaired; mutated children are not, and compete under constraint domination.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    rng = np.random.default_rng(seeds[1])
    init_seed = int(seeds[0].generate_state(1)[0])
    pop = heuristic_schedules(inst, cfg.population, init_seed)
    objectives, violation = _evaluate(inst, pop)
    rate = cfg.mutation_rate if cfg.mutation_rate is not None else 1.0 / pop[0].size
    rank, crowd = constrained_ranking(objectives, violation)

    for gen in range(cfg.generations):
        parents = _tournament(rank, crowd, rng, cfg.population)
        children = pop[parents].copy()
        for k in range(0, cfg.population, 2):
            if rng.random() < cfg.crossover_rate:
                children[k], children[k + 1] = time_slice_crossover(children[k], children[k + 1], rng)
        broken = ~is_feasible(inst, children)
        if broken.any():
            children[broken] = standardize(inst, children[broken])
        children = polynomial_mutation(children, rate, cfg.eta, rng)

        child_obj, child_vio = _evaluate(inst, children)
        merged = np.concatenate([pop, children])
        merged_obj = np.concatenate([objectives, child_obj])
        merged_vio = np.concatenate([violation, child_vio])
        rank, crowd = constrained_ranking(merged_obj, merged_vio)
        keep = _survivors(rank, crowd, cfg.population)
        pop, objectives, violation = merged[keep], merged_obj[keep], merged_vio[keep]
        rank, crowd = rank[keep], crowd[keep]
        if history is not None:
            history.append((gen + 1, objectives.copy(), violation.copy()))

    return _front_points(inst, pop, objectives, violation)


def random_generate(model: DenoiserModel, inst: Instance, sched: NoiseSchedule, cfg: GuidanceConfig) -> list[FrontPoint]:
    """The diffusion model alone: identical to guided sampling with zero gradient scale."""
    return sample_front(model, inst, sched, unguided(cfg))
