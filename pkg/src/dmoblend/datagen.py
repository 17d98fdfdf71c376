"""Synthetic instances and "historical" schedules for training the denoiser.

Instance ranges (flow units per 2-hour period; ``n`` = period count):

============================  ===========================================
flow_max / flow_min           1.0 / 0.05 (so active flow equals intensity)
available inventory           U(0.25, 0.45) * n per component tank
cap_min                       U(0.05, 0.15) * n
cap_max                       init_inventory + U(0, 0.2) * n
total demand                  U(0.5, 0.7) * total available, split over
                              product tanks with weights U(0.7, 1.3)
prop_delta                    U(-0.2, 0.2), three properties
occupancy                     each tank, with prob. 0.5, one block of
                              1..max(1, n // 10) periods
============================  ===========================================

The heuristic lays out, per component tank, contiguous runs of at least two
periods to changing unoccupied product tanks with a per-run intensity drawn
from ``U(THRESHOLD, 0.8)``, never withdrawing below ``cap_min``.  Runs are
dropped shortest-first if the switch budget is exceeded.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DatasetFormatError
from .problem import THRESHOLD, Instance, check_constraints, drop_short_runs

BENCHMARK_SCALES = ((5, 3), (8, 5), (12, 7))
BENCHMARK_HORIZONS = (20, 100, 300)
N_PROPS = 3
MAX_INTENSITY = 0.8
MIN_RUN = 2

DATASET_MAGIC = b"DMODATA\0"
DATASET_VERSION = 1


def _occupancy(rng: np.random.Generator, rows: int, n: int) -> np.ndarray:
    occ = np.zeros((rows, n), dtype=bool)
    longest = max(1, n // 10)
    for r in range(rows):
        if rng.random() < 0.5:
            length = int(rng.integers(1, longest + 1))
            start = int(rng.integers(0, n - length + 1))
            occ[r, start:start + length] = True
    return occ


def _draw_instance(rng: np.random.Generator, n_ct: int, n_pt: int, n: int) -> Instance:
    available = rng.uniform(0.25, 0.45, n_ct) * n
    cap_min = rng.uniform(0.05, 0.15, n_ct) * n
    init = cap_min + available
    cap_max = init + rng.uniform(0.0, 0.2, n_ct) * n
    share = rng.uniform(0.7, 1.3, n_pt)
    demand = rng.uniform(0.5, 0.7) * available.sum() * share / share.sum()
    return Instance(
        init_inventory=init,
        cap_min=cap_min,
        cap_max=cap_max,
        flow_min=THRESHOLD,
        flow_max=1.0,
        comp_occupied=_occupancy(rng, n_ct, n),
        prod_occupied=_occupancy(rng, n_pt, n),
        demand=demand,
        prop_delta=rng.uniform(-0.2, 0.2, (n_ct, n_pt, N_PROPS)),
    )


def gen_instance(n_ct: int, n_pt: int, n: int, seed: int) -> Instance:
    """Random instance for which the heuristic produces a feasible, non-idle schedule."""
    if n < 2 or n % 2:
        raise ValueError("period count must be an even number >= 2")
    if n_ct < 1 or n_pt < 1:
        raise ValueError("need at least one component and one product tank")
    rng = np.random.default_rng(seed)
    for _ in range(100):
        inst = _draw_instance(rng, n_ct, n_pt, n)
        x = heuristic_schedule(inst, rng)
        if check_constraints(inst, x).feasible and np.any(x >= THRESHOLD):
            return inst
    raise ValueError(f"seed {seed}: no feasible instance after 100 draws")


def heuristic_schedule(inst: Instance, rng: np.random.Generator) -> np.ndarray:
    n_ct, n_pt, n = inst.shape
    x = np.zeros(inst.shape)
    span = inst.flow_max - inst.flow_min
    longest = max(MIN_RUN, n // 4)
    for i in range(n_ct):
        remaining = inst.init_inventory[i] - inst.cap_min[i]
        prev_j = -1
        t = int(rng.integers(0, 3))
        while t <= n - MIN_RUN:
            length = int(rng.integers(MIN_RUN, longest + 1))
            length = min(length, n - t)
            window = slice(t, t + length)
            if inst.comp_occupied[i, window].any():
                t += 1
                continue
            free = [j for j in range(n_pt) if j != prev_j and not inst.prod_occupied[j, window].any()]
            if not free:
                t += 1
                continue
            j = free[int(rng.integers(len(free)))]
            level = rng.uniform(THRESHOLD, MAX_INTENSITY)
            # highest intensity whose run still fits the remaining inventory
            fit = THRESHOLD + (remaining / length - inst.flow_min) / span * (1.0 - THRESHOLD)
            if fit < THRESHOLD:
                break
            level = min(level, fit, 1.0)
            x[i, j, window] = level
            remaining -= length * (inst.flow_min + (level - THRESHOLD) / (1.0 - THRESHOLD) * span)
            prev_j = j
            t += length + int(rng.integers(1, 5))
    x = drop_short_runs(x, inst.n_max_switches)
    # float slack from the intensity inversion
    while not check_constraints(inst, x).capacity_ok:
        x *= 1.0 - 1e-9
    return x


def heuristic_schedules(inst: Instance, count: int, seed: int) -> np.ndarray:
    """``count`` feasible schedules, one independently seeded stream per sample."""
    if count < 1:
        raise ValueError("count must be >= 1")
    seeds = np.random.SeedSequence(seed).spawn(count)
    return np.stack([heuristic_schedule(inst, np.random.default_rng(s)) for s in seeds])


def gen_training_set(inst: Instance, count: int, seed: int) -> np.ndarray:
    """Per-component-tank images ``(count * n_ct, n_pt, n)`` in [0, 1]."""
    schedules = heuristic_schedules(inst, count, seed)
    return schedules.reshape(-1, inst.n_pt, inst.n_periods)


def save_dataset(images: np.ndarray, path, seed: int) -> None:
    """Header ``magic, u32 version, u32 n_pt, u32 n, u64 count, i64 seed`` then float32 LE images."""
    images = np.asarray(images)
    count, n_pt, n = images.shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIIQq", DATASET_VERSION, n_pt, n, count, seed))
        fh.write(np.ascontiguousarray(images, dtype="<f4").tobytes())


def load_dataset(path) -> tuple[np.ndarray, int]:
    data = Path(path).read_bytes()
    head = struct.calcsize("<IIIQq")
    if data[:8] != DATASET_MAGIC or len(data) < 8 + head:
        raise DatasetFormatError(f"{path}: not a schedule dataset")
    version, n_pt, n, count, seed = struct.unpack("<IIIQq", data[8:8 + head])
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: dataset version {version} unsupported")
    payload = data[8 + head:]
    if len(payload) != 4 * count * n_pt * n:
        raise DatasetFormatError(f"{path}: payload size does not match header")
    images = np.frombuffer(payload, dtype="<f4").reshape(count, n_pt, n).astype(np.float64)
    return images, seed
