"""Command-line entry point: ``dmoblend <command> [options]``.

Every command writes ``manifest.json`` next to its outputs.  The manifest's
``args`` block has the same keys as the command's long options, so passing the
manifest back with ``--config`` repeats the run; explicit flags still win.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from .errors import DMOError

log = logging.getLogger("dmoblend")

OUTPUT_ENV = "DMO_OUTPUT_DIR"


def _default_out() -> str:
    return os.environ.get(OUTPUT_ENV, "dmo_output")


def _versions() -> dict:
    out = {"python": platform.python_version(), "numpy": np.__version__}
    for name in ("dmoblend", "torch"):
        try:
            out[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            out[name] = None
    return out


def _write_manifest(out_dir: Path, command: str, args: dict, wall: float) -> None:
    manifest = {
        "command": command,
        "args": args,
        "seed": args.get("seed"),
        "versions": _versions(),
        "wall_time_s": round(wall, 3),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _need(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


# --- commands ----------------------------------------------------------------

def cmd_gen_instance(a) -> dict:
    from .datagen import gen_instance
    from .problem import save_instance

    inst = gen_instance(a.n_ct, a.n_pt, a.n, a.seed)
    path = a.out_dir / "instance.json"
    save_instance(inst, path)
    print(f"instance {a.n_ct}x{a.n_pt}x{a.n}: {inst.n_decision_variables} decision variables -> {path}")
    return {"decision_variables": inst.n_decision_variables}


def cmd_gen_data(a) -> dict:
    from .datagen import gen_training_set, save_dataset
    from .problem import load_instance

    inst = load_instance(_need(a.instance))
    images = gen_training_set(inst, a.count, a.seed)
    path = a.out_dir / "dataset.bin"
    save_dataset(images, path, a.seed)
    print(f"{len(images)} images of shape {images.shape[1:]} -> {path}")
    return {"images": len(images)}


def cmd_train(a) -> dict:
    from .datagen import load_dataset
    from .denoiser import DenoiserConfig, build_model, save_checkpoint
    from .diffusion import TrainConfig, build_cosine_schedule, train, write_loss_csv

    images, _ = load_dataset(_need(a.data))
    model = build_model(DenoiserConfig(n_pt=images.shape[1], steps=a.T, channels=a.channels), seed=a.seed)
    cfg = TrainConfig(batch_size=a.batch_size, learning_rate=a.lr, epochs=a.epochs, seed=a.seed)
    model, losses = train(model, images, build_cosine_schedule(a.T), cfg,
                          callback=lambda e, v: log.info("epoch %d loss %.5f", e, v))
    save_checkpoint(model, a.out_dir / "model.ckpt")
    write_loss_csv(losses, a.out_dir / "loss.csv")
    print(f"trained {a.epochs} epochs, final loss {losses[-1]:.5f} -> {a.out_dir / 'model.ckpt'}")
    return {"final_loss": losses[-1]}


def _finish_front(a, inst, points, label: str, started: float) -> dict:
    from .metrics import append_run_summary, hypervolume, reference_point
    from .sampler import write_front

    write_front(points, a.out_dir, "front")
    pts = np.array([[p.objectives.e_blend, p.objectives.e_yield] for p in points]).reshape(-1, 2)
    hv = hypervolume(pts, reference_point(inst))
    runtime = time.perf_counter() - started
    scale = f"{inst.n_ct}x{inst.n_pt}"
    append_run_summary(a.out_dir / "summary.csv", label, scale, inst.n_periods, a.seed, hv, runtime)
    print(f"{label}: {len(points)} front points, HV {hv:.6f} -> {a.out_dir / 'front.csv'}")
    return {"front_size": len(points), "hv": hv}


def _sampling_inputs(a):
    from .denoiser import load_checkpoint
    from .diffusion import build_cosine_schedule
    from .problem import load_instance
    from .sampler import GuidanceConfig

    inst = load_instance(_need(a.instance))
    model = load_checkpoint(_need(a.model), expect_n_pt=inst.n_pt, expect_steps=a.T)
    cfg = GuidanceConfig(gradient_scale=a.scale_s, population=a.pop, T=a.T, seed=a.seed)
    return inst, model, build_cosine_schedule(a.T), cfg


def cmd_optimize(a) -> dict:
    from .sampler import finish_population, reverse_diffusion, Trace, write_trace

    started = time.perf_counter()
    inst, model, sched, cfg = _sampling_inputs(a)
    trace = Trace() if a.trace else None
    raw, weights = reverse_diffusion(model, inst, sched, cfg, trace)
    population = finish_population(inst, raw, weights)
    if trace is not None:
        write_trace(trace, a.out_dir / "trace.csv")
    label = "random" if a.scale_s == 0 else "dmo"
    return _finish_front(a, inst, population.front(inst), label, started)


def cmd_baseline(a) -> dict:
    from .baselines import Nsga2Config, nsga2_optimize, random_generate
    from .problem import load_instance

    started = time.perf_counter()
    if a.algorithm == "nsga2":
        inst = load_instance(_need(a.instance))
        points = nsga2_optimize(inst, Nsga2Config(population=a.pop, generations=a.generations, seed=a.seed))
    else:
        if a.model is None:
            raise ValueError("the random baseline needs --model")
        inst, model, sched, cfg = _sampling_inputs(a)
        points = random_generate(model, inst, sched, cfg)
    return _finish_front(a, inst, points, a.algorithm, started)


def cmd_evaluate(a) -> dict:
    from .metrics import ReferencePoint, hypervolume, reference_point, set_coverage
    from .problem import load_instance
    from .sampler import read_front

    if a.ref is not None:
        ref = ReferencePoint(*a.ref)
    elif a.instance is not None:
        ref = reference_point(load_instance(_need(a.instance)))
    else:
        raise ValueError("evaluate needs --instance or --ref")
    fronts = {str(f): read_front(_need(f)) for f in a.fronts}
    result = {"reference": [ref.r1, ref.r2], "hv": {}, "coverage": {}}
    for name, pts in fronts.items():
        result["hv"][name] = hypervolume(pts, ref)
        print(f"HV {name}: {result['hv'][name]:.6f}")
    for na, pa in fronts.items():
        for nb, pb in fronts.items():
            if na != nb and len(pb):
                c = set_coverage(pa, pb)
                result["coverage"][f"{na} -> {nb}"] = c
                print(f"C({na}, {nb}) = {c:.4f}")
    (a.out_dir / "evaluation.json").write_text(json.dumps(result, indent=2) + "\n")
    return {}


def cmd_render(a) -> dict:
    import csv

    from .metrics import reference_point
    from .problem import load_instance
    from .render import gantt_svg, scatter_svg, write_svg
    from .sampler import load_schedule, read_front

    inst = load_instance(_need(a.instance))
    written = 0
    for sched_path in a.schedule or []:
        x = load_schedule(_need(sched_path), inst.shape)
        write_svg(gantt_svg(inst, x, Path(sched_path).stem), a.out_dir / f"{Path(sched_path).stem}.svg")
        written += 1
    series = {}
    for front in a.front or []:
        front = _need(front)
        series[front.stem if len(a.front) == 1 else str(front)] = read_front(front)
        with front.open() as fh:
            rows = list(csv.DictReader(fh))
        for k, row in enumerate(rows[: a.max_gantt]):
            x = load_schedule(_need(front.parent / row["schedule"]), inst.shape)
            title = f"w=({row['w1']}, {row['w2']}) E_blend={float(row['e_blend']):.4g} E_yield={float(row['e_yield']):.4g}"
            write_svg(gantt_svg(inst, x, title), a.out_dir / f"gantt_{front.stem}_{k:04d}.svg")
            written += 1
    if series:
        write_svg(scatter_svg(series, reference_point(inst)), a.out_dir / "front.svg")
        written += 1
    print(f"wrote {written} SVG files to {a.out_dir}")
    return {"svg_files": written}


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmoblend", description="Diffusion-guided biobjective blend scheduling.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="JSON file of option defaults (a manifest also works)")
        p.add_argument("--out-dir", type=Path, default=None, help=f"output directory (default ${OUTPUT_ENV} or ./dmo_output)")
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)
        return p

    p = command("gen-instance", cmd_gen_instance, "generate a synthetic instance")
    p.add_argument("--n-ct", type=int, default=5)
    p.add_argument("--n-pt", type=int, default=3)
    p.add_argument("--n", type=int, default=20)

    p = command("gen-data", cmd_gen_data, "generate heuristic training schedules")
    p.add_argument("--instance", required=True)
    p.add_argument("--count", type=int, default=2000, help="schedules (each gives n_ct images)")

    p = command("train", cmd_train, "train the denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--T", type=int, default=200)
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=4096)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--channels", type=int, default=32)

    def sampling(p):
        p.add_argument("--instance", required=True)
        p.add_argument("--model")
        p.add_argument("--T", type=int, choices=(200, 500, 1000), default=200)
        p.add_argument("--pop", type=int, default=1024)

    p = command("optimize", cmd_optimize, "guided sampling of a Pareto front")
    sampling(p)
    p.add_argument("--scale-s", type=float, default=1.0)
    p.add_argument("--trace", action="store_true", help="also write per-step population means")

    p = command("baseline", cmd_baseline, "run NSGA-II or the unguided generator")
    sampling(p)
    p.add_argument("--algorithm", choices=("nsga2", "random"), required=True)
    p.add_argument("--generations", type=int, default=500)
    p.set_defaults(scale_s=0.0)

    p = command("evaluate", cmd_evaluate, "hypervolume and set coverage of front files")
    p.add_argument("fronts", nargs="+")
    p.add_argument("--instance")
    p.add_argument("--ref", type=float, nargs=2, metavar=("R1", "R2"))

    p = command("render", cmd_render, "SVG Gantt charts and front scatter")
    p.add_argument("--instance", required=True)
    p.add_argument("--front", action="append", help="front CSV; its schedules get Gantt charts")
    p.add_argument("--schedule", action="append", help="a single .f64 schedule file")
    p.add_argument("--max-gantt", type=int, default=20)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    commands = parser._subparsers._group_actions[0].choices
    name = next((a for a in argv if a in commands), None)
    if known.config is None or name is None:
        return parser.parse_args(argv)
    try:
        raw = json.loads(_need(known.config).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{known.config}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ValueError(f"{known.config}: expected a JSON object")
    values = {k: v for k, v in raw.get("args", raw).items() if k not in ("config", "command", "out_dir")}
    sub = commands[name]
    dests = {a.dest for a in sub._actions}
    unknown = sorted(set(values) - dests)
    if unknown:
        raise ValueError(f"{known.config}: unknown keys {', '.join(unknown)}")
    # the file supplies defaults; explicit flags still win
    sub.set_defaults(**values)
    for action in sub._actions:
        if action.dest in values:
            action.required = False
    return parser.parse_args(argv)


def _jsonable(args: argparse.Namespace) -> dict:
    out = {}
    for k, v in vars(args).items():
        if k in ("func", "config", "verbose"):
            continue
        out[k] = str(v) if isinstance(v, Path) else v
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        args.out_dir = Path(args.out_dir if args.out_dir is not None else _default_out())
        args.out_dir.mkdir(parents=True, exist_ok=True)
        started = time.perf_counter()
        args.func(args)
        _write_manifest(args.out_dir, args.command, _jsonable(args), time.perf_counter() - started)
    except (DMOError, ValueError, OSError, KeyError) as exc:
        print(f"dmoblend: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
