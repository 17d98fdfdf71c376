"""Discrete-time gasoline blending scheduling model.

A schedule is one real array ``x`` of shape ``(n_ct, n_pt, n_periods)`` with
entries in ``[0, 1]``.  A cell is active (``W = 1``) when ``x >= THRESHOLD``;
the flow of an active cell is affine in ``x`` between ``flow_min`` and
``flow_max``.  Every function here also accepts a stack of schedules with
arbitrary leading batch axes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeError

THRESHOLD = 0.05
GATE_WIDTH = 0.02
CAPACITY_TOL = 1e-9


def default_max_switches(n_ct: int, n_periods: int) -> int:
    # half-up rounding, not banker's
    return int(np.floor(0.5 * n_ct * n_periods + 0.5))


@dataclass
class Instance:
    """Environment variables of one scheduling problem."""

    init_inventory: np.ndarray  # (n_ct,)
    cap_min: np.ndarray  # (n_ct,)
    cap_max: np.ndarray  # (n_ct,)
    flow_min: float
    flow_max: float
    comp_occupied: np.ndarray  # (n_ct, n_periods) bool
    prod_occupied: np.ndarray  # (n_pt, n_periods) bool
    demand: np.ndarray  # (n_pt,)
    prop_delta: np.ndarray  # (n_ct, n_pt, n_props)
    n_max_switches: int | None = None

    def __post_init__(self):
        self.init_inventory = np.asarray(self.init_inventory, dtype=np.float64)
        self.cap_min = np.asarray(self.cap_min, dtype=np.float64)
        self.cap_max = np.asarray(self.cap_max, dtype=np.float64)
        self.comp_occupied = np.asarray(self.comp_occupied).astype(bool)
        self.prod_occupied = np.asarray(self.prod_occupied).astype(bool)
        self.demand = np.asarray(self.demand, dtype=np.float64)
        self.prop_delta = np.asarray(self.prop_delta, dtype=np.float64)
        self.flow_min = float(self.flow_min)
        self.flow_max = float(self.flow_max)
        if self.n_max_switches is None:
            self.n_max_switches = default_max_switches(self.n_ct, self.n_periods)
        self.n_max_switches = int(self.n_max_switches)
        self.validate()

    @property
    def n_ct(self) -> int:
        return self.init_inventory.shape[0]

    @property
    def n_pt(self) -> int:
        return self.demand.shape[0]

    @property
    def n_periods(self) -> int:
        return self.comp_occupied.shape[1]

    @property
    def n_props(self) -> int:
        return self.prop_delta.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_ct, self.n_pt, self.n_periods)

    @property
    def n_decision_variables(self) -> int:
        """Count of W plus Q variables."""
        return 2 * self.n_ct * self.n_pt * self.n_periods

    def validate(self) -> None:
        n_ct, n_pt = self.init_inventory.shape[0], self.demand.shape[0]
        if self.comp_occupied.ndim != 2 or self.comp_occupied.shape[0] != n_ct:
            raise ShapeError(f"comp_occupied must be ({n_ct}, n_periods), got {self.comp_occupied.shape}")
        n = self.comp_occupied.shape[1]
        expected = {
            "cap_min": (self.cap_min.shape, (n_ct,)),
            "cap_max": (self.cap_max.shape, (n_ct,)),
            "prod_occupied": (self.prod_occupied.shape, (n_pt, n)),
        }
        for name, (got, want) in expected.items():
            if got != want:
                raise ShapeError(f"{name} must have shape {want}, got {got}")
        if self.prop_delta.ndim != 3 or self.prop_delta.shape[:2] != (n_ct, n_pt):
            raise ShapeError(f"prop_delta must be ({n_ct}, {n_pt}, n_props), got {self.prop_delta.shape}")
        if np.any(self.cap_min > self.init_inventory) or np.any(self.init_inventory > self.cap_max):
            raise ValueError("initial inventory must lie within [cap_min, cap_max]")
        if not 0 <= self.flow_min < self.flow_max:
            raise ValueError("flow bounds must satisfy 0 <= flow_min < flow_max")

    def to_dict(self) -> dict:
        return {
            "n_ct": self.n_ct,
            "n_pt": self.n_pt,
            "n_periods": self.n_periods,
            "n_props": self.n_props,
            "init_inventory": self.init_inventory.tolist(),
            "cap_min": self.cap_min.tolist(),
            "cap_max": self.cap_max.tolist(),
            "flow_min": self.flow_min,
            "flow_max": self.flow_max,
            "comp_occupied": self.comp_occupied.astype(int).tolist(),
            "prod_occupied": self.prod_occupied.astype(int).tolist(),
            "demand": self.demand.tolist(),
            "prop_delta": self.prop_delta.tolist(),
            "n_max_switches": self.n_max_switches,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Instance":
        inst = cls(
            init_inventory=d["init_inventory"],
            cap_min=d["cap_min"],
            cap_max=d["cap_max"],
            flow_min=d["flow_min"],
            flow_max=d["flow_max"],
            comp_occupied=d["comp_occupied"],
            prod_occupied=d["prod_occupied"],
            demand=d["demand"],
            prop_delta=d["prop_delta"],
            n_max_switches=d.get("n_max_switches"),
        )
        for key in ("n_ct", "n_pt", "n_periods", "n_props"):
            if key in d and d[key] != getattr(inst, key):
                raise ShapeError(f"{key}={d[key]} disagrees with array extents ({getattr(inst, key)})")
        return inst


def save_instance(inst: Instance, path) -> None:
    Path(path).write_text(json.dumps(inst.to_dict(), indent=1))


def load_instance(path) -> Instance:
    return Instance.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ConstraintReport:
    exclusivity_ok: bool
    occupancy_ok: bool
    capacity_ok: bool
    flow_ok: bool
    switches_ok: bool
    exclusivity_violation: float
    occupancy_violation: float
    capacity_violation: float
    flow_violation: float
    n_switches: int
    switch_excess: int

    @property
    def feasible(self) -> bool:
        return (self.exclusivity_ok and self.occupancy_ok and self.capacity_ok
                and self.flow_ok and self.switches_ok)

    @property
    def total_violation(self) -> float:
        return (self.exclusivity_violation + self.occupancy_violation + self.capacity_violation
                + self.flow_violation + float(self.switch_excess))


@dataclass
class ObjectiveValue:
    e_blend: float
    e_yield: float
    e_const: float
    feasible: bool


def _check_shape(inst: Instance, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-3:] != inst.shape:
        raise ShapeError(f"schedule shape {x.shape} does not end in {inst.shape}")
    return x


def decode(inst: Instance, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return the binary assignment ``W`` and the flow ``Q`` of a schedule."""
    x = _check_shape(inst, x)
    w = x >= THRESHOLD
    span = inst.flow_max - inst.flow_min
    q = np.where(w, inst.flow_min + (x - THRESHOLD) / (1.0 - THRESHOLD) * span, 0.0)
    return w, q


def encode_flow(inst: Instance, q: np.ndarray) -> np.ndarray:
    """Inverse of ``decode`` for active cells; zero flow maps to idle."""
    q = np.asarray(q, dtype=np.float64)
    span = inst.flow_max - inst.flow_min
    x = THRESHOLD + (q - inst.flow_min) / span * (1.0 - THRESHOLD)
    return np.where(q > 0, x, 0.0)


def count_switches(w: np.ndarray) -> np.ndarray:
    """XOR transitions between consecutive periods, summed per schedule."""
    flips = w[..., 1:] != w[..., :-1]
    return flips.sum(axis=(-3, -2, -1))


def inventory_trajectory(inst: Instance, x: np.ndarray) -> np.ndarray:
    """Component-tank inventory at the end of each period, shape ``(..., n_ct, n)``."""
    _, q = decode(inst, x)
    withdrawn = np.cumsum(q.sum(axis=-2), axis=-1)
    return inst.init_inventory[:, None] - withdrawn


def constraint_terms(inst: Instance, x: np.ndarray) -> dict[str, np.ndarray]:
    """Per-constraint violation magnitudes, batched over leading axes."""
    x = _check_shape(inst, x)
    w, q = decode(inst, x)
    axes = (-2, -1)
    busy = inst.comp_occupied.astype(np.int64) + w.sum(axis=-2)
    excl = np.maximum(busy - 1, 0).sum(axis=axes).astype(np.float64)
    occ = (inst.prod_occupied * w.sum(axis=-3)).sum(axis=axes).astype(np.float64)
    v = inventory_trajectory(inst, x)
    under = np.maximum(inst.cap_min[:, None] - v - CAPACITY_TOL, 0.0)
    over = np.maximum(v - inst.cap_max[:, None] - CAPACITY_TOL, 0.0)
    cap = (under + over).sum(axis=axes)
    below = np.where(w, np.maximum(inst.flow_min - q, 0.0), 0.0)
    above = np.where(w, np.maximum(q - inst.flow_max, 0.0), 0.0)
    flow = (below + above).sum(axis=(-3, -2, -1))
    n_sw = count_switches(w)
    return {
        "exclusivity": excl,
        "occupancy": occ,
        "capacity": cap,
        "flow": flow,
        "n_switches": n_sw,
        "switch_excess": np.maximum(n_sw - inst.n_max_switches, 0),
    }


def total_violation(inst: Instance, x: np.ndarray) -> np.ndarray:
    t = constraint_terms(inst, x)
    return t["exclusivity"] + t["occupancy"] + t["capacity"] + t["flow"] + t["switch_excess"]


def is_feasible(inst: Instance, x: np.ndarray) -> np.ndarray:
    return total_violation(inst, x) == 0


def check_constraints(inst: Instance, x: np.ndarray) -> ConstraintReport:
    x = _check_shape(inst, x)
    if x.ndim != 3:
        raise ShapeError("check_constraints takes a single schedule; use constraint_terms for stacks")
    t = constraint_terms(inst, x)
    return ConstraintReport(
        exclusivity_ok=bool(t["exclusivity"] == 0),
        occupancy_ok=bool(t["occupancy"] == 0),
        capacity_ok=bool(t["capacity"] == 0),
        flow_ok=bool(t["flow"] == 0),
        switches_ok=bool(t["switch_excess"] == 0),
        exclusivity_violation=float(t["exclusivity"]),
        occupancy_violation=float(t["occupancy"]),
        capacity_violation=float(t["capacity"]),
        flow_violation=float(t["flow"]),
        n_switches=int(t["n_switches"]),
        switch_excess=int(t["switch_excess"]),
    )


def _blend_yield(inst: Instance, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    blend = np.einsum("...ijt,ijk->...jtk", q, inst.prop_delta)
    e_blend = (blend ** 2).sum(axis=(-3, -2, -1))
    shortfall = q.sum(axis=(-3, -1)) - inst.demand
    e_yield = (shortfall ** 2).sum(axis=-1)
    return e_blend, e_yield


def objective_arrays(inst: Instance, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Blend and yield error of the thresholded schedule(s)."""
    _, q = decode(inst, x)
    return _blend_yield(inst, q)


def eval_objectives(inst: Instance, x: np.ndarray) -> ObjectiveValue:
    x = _check_shape(inst, x)
    e_blend, e_yield = objective_arrays(inst, x)
    feasible = check_constraints(inst, x).feasible
    e_const = 0.0 if feasible else float(soft_penalty(inst, x))
    return ObjectiveValue(float(e_blend), float(e_yield), e_const, feasible)


# --- smooth relaxation used for guidance gradients -----------------------------

def _gate(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    u = np.clip((x - THRESHOLD) / GATE_WIDTH, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u), 6.0 * u * (1.0 - u) / GATE_WIDTH


def _penalty_and_grads(inst: Instance, x: np.ndarray, q_relaxed: np.ndarray):
    """Soft penalty, its gradient w.r.t. the gate-free relaxed flow, and w.r.t. x via gates."""
    a, da = _gate(x)
    axes2 = (-2, -1)

    # one destination per component tank, none while occupied
    excl = np.maximum(inst.comp_occupied + a.sum(axis=-2) - 1.0, 0.0)
    p = (excl ** 2).sum(axis=axes2)
    g_a = np.broadcast_to(2.0 * excl[..., :, None, :], a.shape).copy()

    # occupied product tanks receive nothing
    recv = a.sum(axis=-3)
    p = p + (inst.prod_occupied * recv ** 2).sum(axis=axes2)
    g_a += (2.0 * inst.prod_occupied * recv)[..., None, :, :]

    # inventory limits on the relaxed trajectory
    v = inst.init_inventory[:, None] - np.cumsum(q_relaxed.sum(axis=-2), axis=-1)
    under = np.maximum(inst.cap_min[:, None] - v, 0.0)
    over = np.maximum(v - inst.cap_max[:, None], 0.0)
    p = p + (under ** 2 + over ** 2).sum(axis=axes2)
    dv = 2.0 * over - 2.0 * under
    # V[t] depends on every withdrawal at tau <= t
    g_q = -np.flip(np.cumsum(np.flip(dv, axis=-1), axis=-1), axis=-1)[..., :, None, :]

    # switch budget
    diff = a[..., 1:] - a[..., :-1]
    excess = np.maximum(np.abs(diff).sum(axis=(-3, -2, -1)) - inst.n_max_switches, 0.0)
    p = p + excess ** 2
    sgn = 2.0 * excess[..., None, None, None] * np.sign(diff)
    g_a[..., 1:] += sgn
    g_a[..., :-1] -= sgn

    # box
    lo = np.maximum(-x, 0.0)
    hi = np.maximum(x - 1.0, 0.0)
    p = p + (lo ** 2 + hi ** 2).sum(axis=(-3, -2, -1))
    g_x = g_a * da - 2.0 * lo + 2.0 * hi
    return p, g_q, g_x


def soft_penalty(inst: Instance, x: np.ndarray) -> np.ndarray:
    """Smooth constraint penalty; zero when every hinge is inactive."""
    x = _check_shape(inst, x)
    q_relaxed = np.clip(x, 0.0, 1.0) * inst.flow_max
    p, _, _ = _penalty_and_grads(inst, x, q_relaxed)
    return p


def relaxed_objective_and_gradient(inst: Instance, x: np.ndarray, w,
                                   scale: tuple[float, float] = (1.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """Weighted relaxed objective ``w1*E_blend/s1 + w2*E_yield/s2 + E_const`` and its gradient.

    The relaxation drops the activity gate from the flow (``Q = clip(x, 0, 1) *
    flow_max``) so the gradient is defined on arbitrarily noisy tensors.  ``w``
    may be one pair or one pair per leading batch element.  ``scale`` divides
    each objective before weighting; the default leaves them in raw units.
    """
    x = _check_shape(inst, x)
    if not np.all(np.isfinite(x)):
        raise ValueError("schedule tensor contains non-finite entries")
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != 2 or np.any(w < 0) or np.any(np.abs(w.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("weights must be nonnegative pairs summing to 1")
    s1, s2 = scale
    if s1 <= 0 or s2 <= 0:
        raise ValueError("objective scales must be positive")
    w1, w2 = w[..., 0] / s1, w[..., 1] / s2

    inside = (x > 0.0) & (x < 1.0)
    q = np.clip(x, 0.0, 1.0) * inst.flow_max

    blend = np.einsum("...ijt,ijk->...jtk", q, inst.prop_delta)
    e_blend = (blend ** 2).sum(axis=(-3, -2, -1))
    g_blend = 2.0 * np.einsum("...jtk,ijk->...ijt", blend, inst.prop_delta)

    shortfall = q.sum(axis=(-3, -1)) - inst.demand
    e_yield = (shortfall ** 2).sum(axis=-1)
    g_yield = (2.0 * shortfall)[..., None, :, None]

    pen, g_q_pen, g_x_pen = _penalty_and_grads(inst, x, q)

    value = w1 * e_blend + w2 * e_yield + pen
    wb = np.asarray(w1)[..., None, None, None]
    wy = np.asarray(w2)[..., None, None, None]
    g_q = wb * g_blend + wy * g_yield + g_q_pen
    grad = g_q * inst.flow_max * inside + g_x_pen
    return value, grad


# --- repair --------------------------------------------------------------------

def _runs(row: np.ndarray) -> list[tuple[int, int]]:
    """(start, length) of maximal True runs in a 1-D boolean array."""
    padded = np.concatenate(([False], row, [False]))
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return [(int(s), int(e - s)) for s, e in zip(edges[::2], edges[1::2])]


def drop_short_runs(x: np.ndarray, n_max: int) -> np.ndarray:
    """Zero whole active runs, shortest first (ties: earliest start), until switches fit."""
    x = x.copy()
    w = x >= THRESHOLD
    n_sw = int(count_switches(w))
    if n_sw <= n_max:
        return x
    n = x.shape[-1]
    runs = []
    for i, j in zip(*np.nonzero(w.any(axis=-1))):
        for start, length in _runs(w[i, j]):
            cost = int(start > 0) + int(start + length < n)
            runs.append((length, start, int(i), int(j), cost))
    runs.sort()
    for length, start, i, j, cost in runs:
        if n_sw <= n_max:
            break
        if cost == 0:
            continue
        x[i, j, start:start + length] = 0.0
        n_sw -= cost
    return x


def _withdrawal(inst: Instance, x: np.ndarray) -> np.ndarray:
    return inst.init_inventory - inventory_trajectory(inst, x)[..., -1]


def standardize(inst: Instance, x: np.ndarray) -> np.ndarray:
    """Project a raw tensor onto feasible schedules.

    Order: clamp, one destination per component tank and period, blank occupied
    product tanks, scale each tank down to its inventory, then drop the shortest
    runs until the switch budget holds.  Later steps never undo earlier ones.
    """
    x = _check_shape(inst, x)
    if not np.all(np.isfinite(x)):
        raise ValueError("schedule tensor contains non-finite entries")
    shape = x.shape
    x = np.clip(x, 0.0, 1.0).reshape((-1,) + inst.shape)

    keep = np.argmax(x, axis=-2)  # ties go to the lowest product tank
    mask = np.zeros_like(x, dtype=bool)
    np.put_along_axis(mask, keep[..., None, :], True, axis=-2)
    mask &= ~inst.comp_occupied[:, None, :]
    mask &= ~inst.prod_occupied[None, :, :]
    x = np.where(mask, x, 0.0)

    available = inst.init_inventory - inst.cap_min
    short = _withdrawal(inst, x) > available
    if short.any():
        rows = x[short]
        rows *= _capacity_scale(inst, rows, available[np.nonzero(short)[1]])[:, None, None]
        # guard against the last ulp of the bisection
        while np.any(over := _row_withdrawal(inst, rows) > available[np.nonzero(short)[1]]):
            rows[over] *= 1.0 - 1e-12
        x[short] = rows

    over_budget = np.flatnonzero(count_switches(x >= THRESHOLD) > inst.n_max_switches)
    for b in over_budget:
        x[b] = drop_short_runs(x[b], inst.n_max_switches)
    return x.reshape(shape)


def _row_withdrawal(inst: Instance, rows: np.ndarray) -> np.ndarray:
    """Total withdrawal of stacked single-tank rows ``(k, n_pt, n)``."""
    span = inst.flow_max - inst.flow_min
    q = np.where(rows >= THRESHOLD, inst.flow_min + (rows - THRESHOLD) / (1.0 - THRESHOLD) * span, 0.0)
    return np.cumsum(q.sum(axis=-2), axis=-1)[:, -1]


def _capacity_scale(inst: Instance, rows: np.ndarray, available: np.ndarray) -> np.ndarray:
    """Largest factor per row keeping its total withdrawal within ``available``."""
    lo = np.zeros(len(rows))
    hi = np.ones(len(rows))
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        fits = _row_withdrawal(inst, rows * mid[:, None, None]) <= available
        lo = np.where(fits, mid, lo)
        hi = np.where(fits, hi, mid)
    return lo


def relaxed_terms(inst: Instance, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gate-free blend error, yield error and soft penalty (no gradients)."""
    x = _check_shape(inst, x)
    q = np.clip(x, 0.0, 1.0) * inst.flow_max
    e_blend, e_yield = _blend_yield(inst, q)
    pen, _, _ = _penalty_and_grads(inst, x, q)
    return e_blend, e_yield, pen
