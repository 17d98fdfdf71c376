"""Population-level guided reverse diffusion producing a front of feasible schedules.

Every member of the population is ``n_ct`` images of shape ``(n_pt, n)`` in
the model's ``[-1, 1]`` coordinates.  At each reverse step the posterior mean
is shifted against the gradient of the member's weighted relaxed objective,
carried through the affine map ``x01 = (x + 1) / 2``.

By default the objective is evaluated at the denoised estimate
``x0 = (x - sqrt(1 - abar) * eps) / sqrt(abar)`` with the predicted noise held
fixed, each objective is divided by its reference-point coordinate so the two
weights act on comparable numbers, and each coordinate of the shift is clamped
to ``step_clip``.  The shift is further multiplied by ``reference_steps / T``
so the total guidance over a run does not grow with the step count.  At high
noise the iterate itself is meaningless as a schedule, and its raw gradient
drives every cell to idle within a few steps.  ``guide_at="iterate"``,
``normalize=False``, ``step_clip=None`` and ``reference_steps=None`` give the
literal rule.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .denoiser import DenoiserModel, predict_noise
from .diffusion import NoiseSchedule, posterior_mean, posterior_variance
from .errors import ShapeError
from .metrics import nondominated_mask, reference_point
from .problem import (
    Instance,
    ObjectiveValue,
    constraint_terms,
    objective_arrays,
    relaxed_objective_and_gradient,
    relaxed_terms,
    soft_penalty,
    standardize,
)


@dataclass
class GuidanceConfig:
    gradient_scale: float = 1.0
    population: int = 1024
    T: int = 200
    weight_low: float = 0.3
    weight_high: float = 0.7
    seed: int = 0
    chunk: int = 4096  # images per denoiser call
    guide_at: str = "denoised"  # or "iterate"
    step_clip: float | None = 0.05
    normalize: bool = True
    reference_steps: int | None = 200

    def __post_init__(self):
        if self.gradient_scale < 0:
            raise ValueError("gradient_scale must be nonnegative")
        if self.guide_at not in ("denoised", "iterate"):
            raise ValueError("guide_at must be 'denoised' or 'iterate'")
        if self.step_clip is not None and self.step_clip <= 0:
            raise ValueError("step_clip must be positive or None")
        if self.reference_steps is not None and self.reference_steps < 1:
            raise ValueError("reference_steps must be positive or None")
        if self.population < 2:
            raise ValueError("population must be at least 2")
        if not 0 < self.weight_low < self.weight_high < 1:
            raise ValueError("need 0 < weight_low < weight_high < 1")


@dataclass
class FrontPoint:
    schedule: np.ndarray
    objectives: ObjectiveValue
    weight: tuple[float, float]


@dataclass
class Population:
    """Everything a sampling run produced, in population order."""

    raw: np.ndarray  # X_1 mapped to [0, 1], before repair
    repaired: np.ndarray
    weights: np.ndarray  # (pop, 2)
    e_blend: np.ndarray
    e_yield: np.ndarray
    feasible: np.ndarray
    front_index: np.ndarray  # indices into the population

    @property
    def n_infeasible(self) -> int:
        return int((~self.feasible).sum())

    def objectives(self) -> np.ndarray:
        return np.column_stack([self.e_blend, self.e_yield])

    def front(self, inst: Instance) -> list[FrontPoint]:
        points = []
        for k in self.front_index:
            obj = ObjectiveValue(float(self.e_blend[k]), float(self.e_yield[k]), 0.0, True)
            points.append(FrontPoint(self.repaired[k], obj, (float(self.weights[k, 0]), float(self.weights[k, 1]))))
        return points


@dataclass
class Trace:
    """Population means of the relaxed terms after every reverse step."""

    steps: list[int] = field(default_factory=list)
    e_blend: list[float] = field(default_factory=list)
    e_yield: list[float] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    penalty: list[float] = field(default_factory=list)
    initial: dict = field(default_factory=dict)
    snapshots: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.steps)


def assign_weights(cfg: GuidanceConfig) -> np.ndarray:
    """Per-member objective weights; rows 0 and 1 are the two extreme pairs."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[0])
    w1 = rng.uniform(cfg.weight_low, cfg.weight_high, cfg.population)
    w = np.column_stack([w1, 1.0 - w1])
    # set both coordinates so the endpoints are exact, not 1 - 0.7
    w[0] = cfg.weight_low, cfg.weight_high
    w[1] = cfg.weight_high, cfg.weight_low
    return w


def _member_streams(cfg: GuidanceConfig) -> list[np.random.Generator]:
    noise = np.random.SeedSequence(cfg.seed).spawn(2)[1]
    return [np.random.default_rng(s) for s in noise.spawn(cfg.population)]


def _draw(streams, shape) -> np.ndarray:
    return np.stack([g.standard_normal(shape) for g in streams])


def _check_inputs(model: DenoiserModel, inst: Instance, sched: NoiseSchedule, cfg: GuidanceConfig) -> None:
    if model.config.n_pt != inst.n_pt:
        raise ShapeError(f"model expects {model.config.n_pt} product tanks, instance has {inst.n_pt}")
    if inst.n_periods % 2:
        raise ShapeError("period count must be even for the denoiser's down/up-sampling pair")
    if sched.T != cfg.T or model.config.steps != cfg.T:
        raise ShapeError(f"T mismatch: schedule {sched.T}, model {model.config.steps}, config {cfg.T}")


def _model_eps(model: DenoiserModel, x: np.ndarray, t: int, chunk: int) -> np.ndarray:
    images = x.reshape((-1,) + x.shape[-2:])
    out = np.concatenate([predict_noise(model, images[k:k + chunk], t) for k in range(0, len(images), chunk)])
    return out.reshape(x.shape)


def _record(trace: Trace, inst: Instance, x: np.ndarray, weights: np.ndarray, t: int) -> None:
    eb, ey, pen = relaxed_terms(inst, (x + 1.0) / 2.0)
    obj = weights[:, 0] * eb + weights[:, 1] * ey
    row = (float(eb.mean()), float(ey.mean()), float(obj.mean()), float(pen.mean()))
    if t == -1:
        trace.initial = dict(zip(("e_blend", "e_yield", "objective", "penalty"), row))
        return
    trace.steps.append(t)
    trace.e_blend.append(row[0])
    trace.e_yield.append(row[1])
    trace.objective.append(row[2])
    trace.penalty.append(row[3])


def _guidance_step(inst: Instance, sched: NoiseSchedule, cfg: GuidanceConfig, x: np.ndarray,
                   eps: np.ndarray, t: int, weights: np.ndarray) -> np.ndarray:
    at = x
    if cfg.guide_at == "denoised":
        abar = sched.alpha_bar[t]
        at = (x - math.sqrt(1.0 - abar) * eps) / math.sqrt(abar)
    scale = (1.0, 1.0)
    if cfg.normalize:
        ref = reference_point(inst)
        scale = (ref.r1, ref.r2)
    _, g01 = relaxed_objective_and_gradient(inst, (at + 1.0) / 2.0, weights, scale)
    # descend; d/dx of f((x+1)/2) is f'/2
    step = cfg.gradient_scale * 0.5 * g01
    if cfg.step_clip is not None:
        step = np.clip(step, -cfg.step_clip, cfg.step_clip)
    if cfg.reference_steps is not None:
        step = step * (cfg.reference_steps / cfg.T)
    return step


def reverse_diffusion(model: DenoiserModel, inst: Instance, sched: NoiseSchedule, cfg: GuidanceConfig,
                      trace: Trace | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Run the guided loop t = T..2 and return (X_1 in [0, 1], weights)."""
    _check_inputs(model, inst, sched, cfg)
    weights = assign_weights(cfg)
    streams = _member_streams(cfg)
    x = _draw(streams, inst.shape)
    snap_at = {cfg.T, (3 * cfg.T) // 4, cfg.T // 2, cfg.T // 4, 1}
    if trace is not None:
        _record(trace, inst, x, weights, -1)
        trace.snapshots[cfg.T] = (x[0] + 1.0) / 2.0
    for t in range(cfg.T, 1, -1):
        eps = _model_eps(model, x, t, cfg.chunk)
        mean = posterior_mean(sched, x, eps, t)
        if cfg.gradient_scale > 0:
            mean = mean - _guidance_step(inst, sched, cfg, x, eps, t, weights)
        z = _draw(streams, inst.shape)
        x = mean + math.sqrt(posterior_variance(sched, t)) * z
        if trace is not None:
            _record(trace, inst, x, weights, t - 1)
            if t - 1 in snap_at:
                trace.snapshots[t - 1] = (x[0] + 1.0) / 2.0
    return (x + 1.0) / 2.0, weights


def finish_population(inst: Instance, raw: np.ndarray, weights: np.ndarray) -> Population:
    repaired = standardize(inst, raw)
    e_blend, e_yield = objective_arrays(inst, repaired)
    t = constraint_terms(inst, repaired)
    feasible = (t["exclusivity"] + t["occupancy"] + t["capacity"] + t["flow"] + t["switch_excess"]) == 0
    idx = np.flatnonzero(feasible)
    keep = nondominated_mask(np.column_stack([e_blend[idx], e_yield[idx]]))
    front_index = idx[keep]
    # duplicates in objective space are all nondominated; keep the first
    _, first = np.unique(np.column_stack([e_blend[front_index], e_yield[front_index]]), axis=0, return_index=True)
    front_index = front_index[np.sort(first)]
    return Population(raw, repaired, weights, e_blend, e_yield, feasible, front_index)


def run_population(model: DenoiserModel, inst: Instance, sched: NoiseSchedule, cfg: GuidanceConfig) -> Population:
    raw, weights = reverse_diffusion(model, inst, sched, cfg)
    return finish_population(inst, raw, weights)


def sample_front(model: DenoiserModel, inst: Instance, sched: NoiseSchedule, cfg: GuidanceConfig) -> list[FrontPoint]:
    return run_population(model, inst, sched, cfg).front(inst)


def trace_run(model: DenoiserModel, inst: Instance, sched: NoiseSchedule, cfg: GuidanceConfig) -> Trace:
    trace = Trace()
    reverse_diffusion(model, inst, sched, cfg, trace=trace)
    return trace


def unguided(cfg: GuidanceConfig) -> GuidanceConfig:
    return replace(cfg, gradient_scale=0.0)


# --- result files -----------------------------------------------------------------

FRONT_FIELDS = ["w1", "w2", "e_blend", "e_yield", "feasible", "schedule"]


def save_schedule(x: np.ndarray, path) -> None:
    """Row-major float64 little-endian in (component, product, period) order."""
    Path(path).write_bytes(np.ascontiguousarray(x, dtype="<f8").tobytes())


def load_schedule(path, shape) -> np.ndarray:
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f8")
    if data.size != int(np.prod(shape)):
        raise ShapeError(f"{path}: {data.size} values, expected shape {tuple(shape)}")
    return data.reshape(shape).copy()


def write_front(points: list[FrontPoint], out_dir, prefix: str = "front") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{prefix}.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FRONT_FIELDS)
        for k, p in enumerate(points):
            name = f"{prefix}_{k:04d}.f64"
            save_schedule(p.schedule, out_dir / name)
            w1, w2 = p.weight
            writer.writerow([repr(w1), repr(w2), repr(p.objectives.e_blend), repr(p.objectives.e_yield),
                             int(p.objectives.feasible), name])
    return csv_path


def read_front(csv_path) -> np.ndarray:
    """Objective pairs of a front CSV."""
    with Path(csv_path).open() as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r["e_blend"]), float(r["e_yield"])] for r in rows]).reshape(-1, 2)


def write_trace(trace: Trace, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "mean_e_blend", "mean_e_yield", "mean_objective", "mean_penalty"])
        for row in zip(trace.steps, trace.e_blend, trace.e_yield, trace.objective, trace.penalty):
            writer.writerow([row[0]] + [repr(v) for v in row[1:]])
