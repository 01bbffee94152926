"""Experiment manifests, the train -> sample -> evaluate pipeline and the results table."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock

from . import metrics
from .config import config_hash
from .datasets import ToySpec, generate
from .flows import FiniteDataset
from .samplers import SolverConfig, conditional_sample
from .training import (StaleCheckpointError, TrainConfig, TrainState, collect_weights_offline,
                       dataset_codes, decompose_loss, load_state, model_velocity, save_state,
                       total_variation, train)

log = logging.getLogger(__name__)

OUTPUT_ENV = "QACFLOW_OUTPUT_ROOT"
RESULT_COLUMNS = ("metric", "config_hash", "run_hash", "value", "error", "seed",
                  "solver", "nfe", "d", "collection", "label")
METRICS = ("w2", "curvature", "decomposition", "bound", "weights_tv", "code_entropy")


class ExperimentError(RuntimeError):
    pass


def output_root(default: str | Path = "qacflow-out") -> Path:
    return Path(os.environ.get(OUTPUT_ENV, default))


@dataclass(frozen=True)
class EvalRun:
    metric: str = "w2"
    solver: str = "euler"
    nfe: int = 4
    seed: int = 0
    n: int = 1024            # samples per repeat
    repeats: int = 4         # independent sample sets averaged into one row
    collection: str = "offline"
    trials: int = 100        # bound checks only
    afs: bool = False        # ipndm only: analytic first step
    label: str = ""

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}; expected one of {METRICS}")
        if self.collection not in ("online", "offline"):
            raise ValueError("collection must be online or offline")
        if self.repeats < 1 or self.n < 1:
            raise ValueError("n and repeats must be >= 1")
        if self.afs and self.solver != "ipndm":
            raise ValueError("the analytic first step applies to ipndm only")

    def solver_config(self) -> SolverConfig:
        if self.solver == "rk45":
            return SolverConfig(kind="rk45")
        if self.solver == "ipndm":
            return SolverConfig.for_nfe("ipndm", self.nfe, afs=self.afs)
        return SolverConfig.for_nfe(self.solver, self.nfe)

    def run_hash(self) -> str:
        return config_hash(self)


@dataclass
class ExperimentManifest:
    name: str
    dataset: ToySpec
    heldout: ToySpec
    train: TrainConfig
    checkpoint: str
    results: str
    evals: list[EvalRun] = field(default_factory=list)
    status: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.dataset, self.train)

    def to_json(self) -> str:
        body = {"name": self.name, "config_hash": self.config_hash,
                "dataset": asdict(self.dataset), "heldout": asdict(self.heldout),
                "train": asdict(self.train), "checkpoint": self.checkpoint, "results": self.results,
                "evals": [asdict(e) for e in self.evals], "status": self.status}
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, body: dict, base: Path | None = None) -> "ExperimentManifest":
        try:
            m = cls(name=body["name"], dataset=ToySpec(**body["dataset"]),
                    heldout=ToySpec(**body["heldout"]), train=TrainConfig(**body["train"]),
                    checkpoint=body["checkpoint"], results=body["results"],
                    evals=[EvalRun(**e) for e in body.get("evals", [])],
                    status=body.get("status", {}))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed manifest: {exc}") from None
        stored = body.get("config_hash")
        if stored is not None and stored != m.config_hash:
            raise ValueError(f"manifest hash {stored} does not match its contents ({m.config_hash})")
        return m

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentManifest":
        path = Path(path)
        try:
            body = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from None
        m = cls.from_dict(body)
        m.verify_files(path.parent)
        return m

    def resolve(self, rel: str, base: Path | None = None) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or base is None else base / p

    def verify_files(self, base: Path | None = None) -> None:
        """Files the status claims exist must exist and carry this manifest's hash."""
        if self.status.get("trained"):
            ckpt = self.resolve(self.checkpoint, base)
            if not ckpt.exists():
                raise ValueError(f"manifest references missing checkpoint {ckpt}")
            from .checkpoint import load
            _, meta = load(ckpt)
            if meta.get("config_hash") != config_hash(self.train):
                raise StaleCheckpointError(f"{ckpt} was written for a different training config")
        if self.status.get("evaluated"):
            res = self.resolve(self.results, base)
            if not res.exists():
                raise ValueError(f"manifest references missing results table {res}")
            read_results(res)


# --------------------------------------------------------------------------
# results table

@dataclass
class ResultRow:
    metric: str
    config_hash: str
    run_hash: str
    value: float
    error: float
    seed: int
    solver: str = ""
    nfe: int = 0
    d: int = 0
    collection: str = ""
    label: str = ""

    def key(self) -> tuple:
        return (self.metric, self.config_hash, self.run_hash)

    def as_list(self) -> list[str]:
        return [self.metric, self.config_hash, self.run_hash, repr(float(self.value)),
                repr(float(self.error)), str(self.seed), self.solver, str(self.nfe), str(self.d),
                self.collection, self.label]


def read_results(path: str | Path) -> list[ResultRow]:
    """Parse a results CSV; malformed lines are reported with their line number."""
    path = Path(path)
    if not path.exists():
        return []
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(header) != RESULT_COLUMNS:
            raise ValueError(f"{path}:1: unexpected header {header}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(RESULT_COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {len(RESULT_COLUMNS)} fields, got {len(rec)}")
            try:
                rows.append(ResultRow(rec[0], rec[1], rec[2], float(rec[3]), float(rec[4]), int(rec[5]),
                                      rec[6], int(rec[7]), int(rec[8]), rec[9], rec[10]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return rows


def append_results(path: str | Path, rows: list[ResultRow]) -> int:
    """Append rows under a file lock, skipping keys already present. Returns rows written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with FileLock(str(path) + ".lock"):
        seen = {r.key() for r in read_results(path)}
        fresh = [r for r in rows if r.key() not in seen]
        new_file = not path.exists() or path.stat().st_size == 0
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new_file:
                w.writerow(RESULT_COLUMNS)
            for r in fresh:
                w.writerow(r.as_list())
    return len(fresh)


# --------------------------------------------------------------------------
# pipeline

def obtain_state(manifest: ExperimentManifest, data: FiniteDataset, base: Path) -> TrainState:
    """Load the checkpoint when it matches the config, train (or resume) otherwise."""
    ckpt = manifest.resolve(manifest.checkpoint, base)
    state = None
    if ckpt.exists():
        state = load_state(ckpt, expect_config=manifest.train)
        if state.step >= manifest.train.steps:
            return state
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    state = train(manifest.train, data, state=state)
    save_state(state, ckpt)
    return state


def sampling_weights(state: TrainState, data: FiniteDataset, collection: str):
    if collection == "online":
        return state.weights
    _, enc = state.ema_model()
    return collect_weights_offline(enc, data, state.codebook, state.config.ema_decay)


def evaluate(state: TrainState, data: FiniteDataset, heldout: FiniteDataset, run: EvalRun,
             chash: str) -> list[ResultRow]:
    den, enc = state.ema_model()
    flow = state.flow
    d = state.config.d
    common = dict(config_hash=chash, run_hash=run.run_hash(), seed=run.seed, solver=run.solver,
                  nfe=run.nfe, d=d, collection=run.collection, label=run.label)
    if run.metric in ("w2", "curvature"):
        weights = sampling_weights(state, data, run.collection)
        solver = run.solver_config()
        ref = heldout.points[:run.n]
        vals = []
        for r in range(run.repeats):
            res = conditional_sample(den, weights, flow, solver, len(ref), run.seed * 1000 + r)
            if run.metric == "w2":
                vals.append(metrics.wasserstein2(res.samples, ref))
            else:
                vals.append(metrics.curvature(res.record).mean)
        vals = np.array(vals)
        err = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
        return [ResultRow(run.metric, value=float(vals.mean()), error=err, **common)]
    if run.metric == "decomposition":
        coded = data if enc is None else data.with_codes(dataset_codes(enc, data, state.codebook))
        dec = decompose_loss(model_velocity(den, flow), flow, coded, n_samples=max(run.n, 1000),
                             seed=run.seed)
        return [ResultRow("L_CFM", value=dec.l_cfm, error=dec.se_cfm, **common),
                ResultRow("L_FM", value=dec.l_fm, error=dec.se_fm, **common),
                ResultRow("V", value=dec.v, error=dec.se_v, **common)]
    if run.metric == "bound":
        coded = data if enc is None else data.with_codes(dataset_codes(enc, data, state.codebook))
        reports = bound_trials(model_velocity(den, flow), flow, coded, run.trials, run.seed)
        valid = [r for r in reports if r.valid]
        rate = float(np.mean([r.passed for r in valid])) if valid else float("nan")
        err = float(np.sqrt(rate * (1 - rate) / len(valid))) if valid else float("nan")
        return [ResultRow("bound_pass_rate", value=rate, error=err, **common)]
    if run.metric == "weights_tv":
        online = state.weights.dense() if state.weights.size <= 2 ** 16 else None
        offline = sampling_weights(state, data, "offline")
        if online is None:
            raise ExperimentError("total variation needs a dense codebook")
        return [ResultRow("weights_tv", value=total_variation(online, offline.dense()), error=0.0, **common)]
    from .training import code_entropy
    w = sampling_weights(state, data, run.collection)
    return [ResultRow("code_entropy", value=code_entropy(w), error=0.0, **common)]


def bound_trials(model, flow, data: FiniteDataset, trials: int, seed: int, **kw):
    """Randomized (t, dt) bound checks; t uniform on [0.1, 1] times t_max, dt a fraction of t."""
    rng = np.random.default_rng([seed, 31])
    out = []
    for i in range(trials):
        t = float(rng.uniform(0.1, 1.0)) * flow.t_max
        dt = float(rng.uniform(0.05, 0.5)) * t
        out.append(metrics.check_theorem_bound(model, flow, data, t, dt, seed=int(rng.integers(2 ** 31)), **kw))
    return out


def run_experiment(manifest: ExperimentManifest, base: str | Path | None = None,
                   manifest_path: str | Path | None = None) -> list[ResultRow]:
    """train -> sample -> evaluate; rows already in the results table are not recomputed."""
    base = Path(base) if base is not None else output_root()
    base.mkdir(parents=True, exist_ok=True)
    chash = manifest.config_hash
    results_path = manifest.resolve(manifest.results, base)
    done = {r.key() for r in read_results(results_path)}
    todo = [e for e in manifest.evals
            if not any(k[1] == chash and k[2] == e.run_hash() for k in done)]
    manifest.status.pop("error", None)
    stage = "data"
    rows: list[ResultRow] = []
    try:
        data = generate(manifest.dataset)
        heldout = generate(manifest.heldout)
        if todo or not manifest.status.get("trained"):
            stage = "train"
            state = obtain_state(manifest, data, base)
            manifest.status["trained"] = True
            for run in todo:
                stage = f"eval:{run.metric}:{run.label or run.run_hash()}"
                new = evaluate(state, data, heldout, run, chash)
                append_results(results_path, new)
                rows.extend(new)
        manifest.status["evaluated"] = True
    except StaleCheckpointError:
        raise
    except Exception as exc:
        manifest.status["error"] = {"stage": stage, "message": str(exc),
                                    "traceback": traceback.format_exc(limit=5)}
        if manifest_path is not None:
            manifest.save(manifest_path)
        raise ExperimentError(f"{manifest.name}: failed at {stage}: {exc}") from exc
    if manifest_path is not None:
        manifest.save(manifest_path)
    return rows


# --------------------------------------------------------------------------
# sweeps

def sweep_cells(base: ExperimentManifest, axis: str, values) -> list[ExperimentManifest]:
    """One manifest per value of a TrainConfig field; each cell gets its own checkpoint path."""
    if axis not in {f.name for f in dataclasses.fields(TrainConfig)}:
        raise ValueError(f"cannot sweep unknown training field {axis!r}")
    cells = []
    for v in values:
        cfg = dataclasses.replace(base.train, **{axis: v})
        h = config_hash(base.dataset, cfg)
        cells.append(dataclasses.replace(
            base, name=f"{base.name}-{axis}{v}", train=cfg,
            checkpoint=str(Path(f"cell-{h}") / "state.ckpt"),
            evals=list(base.evals), status={}))
    return cells


def run_sweep(cells: list[ExperimentManifest], base: str | Path | None = None,
              jobs: int = 1) -> list[ResultRow]:
    base = Path(base) if base is not None else output_root()
    if jobs <= 1:
        out = []
        for cell in cells:
            out.extend(run_experiment(cell, base))
        return out
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(run_experiment, cells, [base] * len(cells)))
    return [r for part in parts for r in part]


def reference_manifest(name: str = "ring", *, d: int = 12, steps: int = 5000, seed: int = 0,
                       n_train: int = 8192, nfes=(2, 3, 4, 8), results: str = "results.csv",
                       **train_kw) -> ExperimentManifest:
    """The 8-ring benchmark with Euler W2 evaluations at the given NFEs."""
    dataset = ToySpec("gaussian-ring", n_train, seed)
    heldout = ToySpec("gaussian-ring", 1024, seed + 1000)
    cfg = TrainConfig(d=d, steps=steps, seed=seed, **train_kw)
    h = config_hash(dataset, cfg)
    evals = [EvalRun("w2", "euler", nfe, seed=seed, label=f"euler-{nfe}") for nfe in nfes]
    return ExperimentManifest(name, dataset, heldout, cfg, str(Path(f"cell-{h}") / "state.ckpt"),
                              results, evals)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
