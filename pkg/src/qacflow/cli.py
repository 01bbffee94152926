"""Command line: generate | train | sample | eval | edit | sweep | plot.

Every verb accepts ``--config FILE`` (key=value lines) and repeated
``--set key=value`` overrides; explicit flags win over both. Relative output
paths land under ``$QACFLOW_OUTPUT_ROOT`` when it is set.

Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import ConfigError, from_kv, parse_kv, read_kv

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("qacflow")


class ValidationError(ValueError):
    pass


def _out(path: str | Path) -> Path:
    p = Path(path)
    root = os.environ.get("QACFLOW_OUTPUT_ROOT")
    if root and not p.is_absolute():
        p = Path(root) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _settings(args) -> dict[str, str]:
    values: dict[str, str] = {}
    if args.config:
        values.update(read_kv(args.config))
    for item in args.set or []:
        values.update(parse_kv(item, "--set"))
    return values


def _build(cls, args, flags: dict):
    values = _settings(args)
    values.update({k: str(v) for k, v in flags.items() if v is not None})
    return from_kv(cls, values)


def _emit(rows: list[list], header: list[str]) -> None:
    w = csv.writer(sys.stdout)
    w.writerow(header)
    w.writerows(rows)


# --------------------------------------------------------------------------
# verbs

def cmd_generate(args) -> int:
    from .datasets import ToySpec, generate
    from .flows import save_points
    spec = _build(ToySpec, args, {"kind": args.kind, "n": args.n, "seed": args.seed})
    data = generate(spec)
    out = _out(args.out)
    save_points(out, data)
    _emit([[spec.kind, len(data), "x".join(map(str, data.point_shape)), str(out)]],
          ["kind", "n", "shape", "path"])
    return EXIT_OK


def cmd_train(args) -> int:
    from .flows import load_points
    from .training import TrainConfig, load_state, save_state, train
    cfg = _build(TrainConfig, args, {"steps": args.steps, "seed": args.seed, "d": args.d})
    data = load_points(args.data)
    out = _out(args.out)
    state = load_state(out, expect_config=cfg) if args.resume and out.exists() else None
    state = train(cfg, data, state=state, log_path=_out(args.log) if args.log else None)
    save_state(state, out)
    _emit([[state.config_hash(), state.step, str(out)]], ["config_hash", "step", "checkpoint"])
    return EXIT_OK


def _sampler_settings(args):
    from .samplers import SolverConfig
    base = _settings(args)
    kind = args.solver or base.pop("kind", "euler")
    base.pop("kind", None)
    nfe = args.nfe if args.nfe is not None else int(base.pop("nfe", 4))
    base.pop("nfe", None)
    extra = from_kv(SolverConfig, base, strict=False)
    kw = {f.name: getattr(extra, f.name) for f in dataclasses.fields(SolverConfig)
          if f.name in base and f.name not in ("kind", "steps")}
    if kind == "rk45":
        return SolverConfig(kind="rk45", **kw)
    return SolverConfig.for_nfe(kind, nfe, **kw)


def cmd_sample(args) -> int:
    from .experiment import sampling_weights
    from .flows import FiniteDataset, load_points, save_points
    from .samplers import conditional_sample
    from .training import load_state
    state = load_state(args.checkpoint)
    den, _ = state.ema_model()
    if args.collection == "offline":
        if not args.data:
            raise ValidationError("offline sampling weights need --data")
        weights = sampling_weights(state, load_points(args.data), "offline")
    else:
        weights = state.weights
    solver = _sampler_settings(args)
    res = conditional_sample(den, weights, state.flow, solver, args.n, args.seed)
    out = _out(args.out)
    save_points(out, FiniteDataset(res.samples, res.codes if den.conditional else None))
    rec = res.record
    run = {"checkpoint": str(args.checkpoint), "config_hash": state.config_hash(), "solver": solver.kind,
           "nfe": rec.nfe, "seed": args.seed, "n": args.n, "collection": args.collection,
           "solver_config": dataclasses.asdict(solver), "times": [float(t) for t in rec.times]}
    if solver.kind != "rk45":
        run["schedule"] = dataclasses.asdict(solver.schedule_for(state.flow))
    out.with_name(out.name + ".run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
    if args.trajectory_csv:
        write_trajectory_csv(_out(args.trajectory_csv), rec.times, rec.states)
    if args.trajectory_svg:
        from .plotting import trajectory_plot
        trajectory_plot(res.record.states, res.record.times, _out(args.trajectory_svg))
    _emit([[solver.kind, res.record.nfe, args.n, args.seed, str(out)]],
          ["solver", "nfe", "n", "seed", "path"])
    return EXIT_OK


def write_trajectory_csv(path: Path, times, states) -> None:
    """One row per (grid point, sample): step, t, sample, x0, x1, ..."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        dim = int(np.prod(states[0].shape[1:]))
        w.writerow(["step", "t", "sample"] + [f"x{j}" for j in range(dim)])
        for i, (t, x) in enumerate(zip(times, states)):
            flat = np.asarray(x).reshape(len(x), -1)
            for k, row in enumerate(flat):
                w.writerow([i, repr(float(t)), k] + [repr(float(v)) for v in row])


def cmd_eval(args) -> int:
    from .experiment import ExperimentManifest, RESULT_COLUMNS, run_experiment
    path = Path(args.manifest)
    manifest = ExperimentManifest.load(path)
    base = Path(args.base) if args.base else path.parent
    run_experiment(manifest, base, manifest_path=path)
    from .experiment import read_results
    rows = [r for r in read_results(manifest.resolve(manifest.results, base))
            if r.config_hash == manifest.config_hash]
    _emit([r.as_list() for r in rows], list(RESULT_COLUMNS))
    return EXIT_OK


def cmd_edit(args) -> int:
    from .editing import DegradationOp, EditTask, read_grid, write_grid, zero_shot_edit
    from .training import load_state
    state = load_state(args.checkpoint)
    den, enc = state.ema_model()
    z = read_grid(args.reference)
    if z.shape != tuple(state.data_shape):
        raise ValidationError(f"reference image shaped {z.shape}, model expects {state.data_shape}")
    omega = read_grid(args.mask)
    op = DegradationOp(args.op, args.factor)
    task = EditTask(z[None], op, omega[None], steps=args.steps, seed=args.seed)
    res = zero_shot_edit(den, enc, state.codebook, state.flow, task)
    write_grid(_out(args.out), res.x[0])
    trace = _out(args.trace) if args.trace else None
    rows = [[i, repr(float(t)), int(c[0])] for i, (t, c) in enumerate(zip(res.times, res.code_trace))]
    if trace is not None:
        with open(trace, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "t", "code"])
            w.writerows(rows)
    _emit(rows, ["step", "t", "code"])
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .experiment import ExperimentManifest, RESULT_COLUMNS, run_sweep, sweep_cells
    base_path = Path(args.manifest)
    base = ExperimentManifest.load(base_path)
    field = {f.name: f for f in dataclasses.fields(type(base.train))}.get(args.axis)
    if field is None:
        raise ValidationError(f"unknown sweep axis {args.axis!r}")
    caster = {"int": int, "float": float}.get(field.type if isinstance(field.type, str) else field.type.__name__, str)
    try:
        values = [caster(v) for v in args.values.split(",")]
    except ValueError as exc:
        raise ValidationError(f"bad sweep values: {exc}") from None
    cells = sweep_cells(base, args.axis, values)
    root = Path(args.base) if args.base else base_path.parent
    run_sweep(cells, root, jobs=args.jobs)
    for cell in cells:
        cell.save(root / f"{cell.name}.json")
    # report every cell's rows, including ones an earlier run already produced
    from .experiment import read_results
    hashes = {c.config_hash for c in cells}
    rows = [r for r in read_results(base.resolve(base.results, root)) if r.config_hash in hashes]
    _emit([r.as_list() for r in rows], list(RESULT_COLUMNS))
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import PlotSpec, emit_plots
    spec = PlotSpec(kind=args.kind, metrics=tuple(args.metric or ()), solver=args.solver or "",
                    collection=args.collection or "", label_contains=args.label or "")
    out_dir = _out(Path(args.out_dir) / "_")
    paths = emit_plots(args.results, out_dir.parent, spec)
    if not paths:
        print("warning: no result rows match the filter; no plots written", file=sys.stderr)
    _emit([[str(p)] for p in paths], ["svg"])
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qacflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.set_defaults(func=func)
        return sp

    g = verb("generate", cmd_generate, "write a toy dataset")
    g.add_argument("--kind", choices=["gaussian-ring", "checkerboard", "two-moons", "tiny-shapes"])
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)

    t = verb("train", cmd_train, "train a (conditional) flow model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--d", type=int, help="code length (0 = unconditional)")
    t.add_argument("--log", help="CSV training log")
    t.add_argument("--resume", action="store_true")

    s = verb("sample", cmd_sample, "draw samples with a backward ODE solver")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--solver", choices=["euler", "heun", "rk45", "ipndm"])
    s.add_argument("--nfe", type=int)
    s.add_argument("--n", type=int, default=1024)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--collection", choices=["online", "offline"], default="online")
    s.add_argument("--data", help="training points (offline weights)")
    s.add_argument("--out", required=True)
    s.add_argument("--trajectory-csv", help="write every intermediate state as CSV")
    s.add_argument("--trajectory-svg", help="scatter panels of the intermediate states (2-D data)")

    e = verb("eval", cmd_eval, "run a manifest: train, sample, evaluate")
    e.add_argument("--manifest", required=True)
    e.add_argument("--base", help="directory for relative manifest paths (default: manifest's)")

    ed = verb("edit", cmd_edit, "zero-shot editing of one image")
    ed.add_argument("--checkpoint", required=True)
    ed.add_argument("--op", choices=["mask", "downsample", "channel-average"], default="mask")
    ed.add_argument("--factor", type=int, default=2)
    ed.add_argument("--mask", required=True, help="0/1 grid in the degraded domain (1 = synthesize)")
    ed.add_argument("--reference", required=True, help="reference image grid")
    ed.add_argument("--steps", type=int, default=40)
    ed.add_argument("--seed", type=int, default=0)
    ed.add_argument("--out", required=True)
    ed.add_argument("--trace", help="CSV of the per-step code indices")

    sw = verb("sweep", cmd_sweep, "run a manifest over values of one training field")
    sw.add_argument("--manifest", required=True)
    sw.add_argument("--axis", required=True)
    sw.add_argument("--values", required=True, help="comma separated")
    sw.add_argument("--jobs", type=int, default=1)
    sw.add_argument("--base")

    pl = verb("plot", cmd_plot, "render SVG plots from a results table")
    pl.add_argument("--results", required=True)
    pl.add_argument("--out-dir", required=True)
    pl.add_argument("--kind", choices=["nfe", "codebook"], default="nfe")
    pl.add_argument("--metric", action="append")
    pl.add_argument("--solver")
    pl.add_argument("--collection")
    pl.add_argument("--label")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .training import StaleCheckpointError
    try:
        return args.func(args)
    except (ValidationError, ConfigError, StaleCheckpointError, CheckpointError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # runtime failure: solver blow-up, experiment stage failure, ...
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
