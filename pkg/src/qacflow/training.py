"""Joint training of the condition encoder and the denoiser under the conditional CFM loss.

One :func:`train_step` is one pass of the training loop: sample (x, t, z),
encode and quantize x with straight-through gradients, noise, take a gradient
step on both networks, update the EMA shadows, then fold the batch's code
histogram into the running sampling weights.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from . import tensor as T
from .config import config_hash
from .denoiser import DenoiserNet, Preconditioning, denoise, loss_weight_edm, velocity
from .flows import (ORACLE_FLOOR, FiniteDataset, FlowSpec, flow_velocity, interpolate,
                    oracle_velocity, oracle_velocity_conditional)
from .fsq import CodebookConfig, EncoderNet, encode, encode_indices
from .optim import ema_update, make_optimizer

log = logging.getLogger(__name__)

DENSE_LIMIT = 2 ** 16


@dataclass(frozen=True)
class TrainConfig:
    flow: str = "rf"
    parameterization: str = "velocity"
    t_dist: str = "uniform"        # uniform on [t_eps, t_max] | lognormal
    t_eps: float = 1e-3
    p_mean: float = -1.2
    p_std: float = 1.2
    loss_weighting: str = "unit"   # unit | edm
    sigma_data: float = 0.5
    edm_t_max: float = 80.0
    lr: float = 2e-3
    lr_schedule: str = "cosine"    # cosine | constant
    optimizer: str = "adam"
    ema_decay: float = 0.999
    batch_size: int = 256
    steps: int = 5000
    seed: int = 0
    L: int = 2
    d: int = 12
    hidden: int = 128
    depth: int = 3
    enc_hidden: int = 16
    log_every: int = 0

    def __post_init__(self):
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if self.t_dist not in ("uniform", "lognormal"):
            raise ValueError(f"t_dist must be uniform or lognormal, got {self.t_dist!r}")
        if self.loss_weighting not in ("unit", "edm"):
            raise ValueError(f"loss_weighting must be unit or edm, got {self.loss_weighting!r}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")

    @classmethod
    def edm_defaults(cls, **kw) -> "TrainConfig":
        base = dict(flow="edm", parameterization="denoiser", t_dist="lognormal", loss_weighting="edm")
        base.update(kw)
        return cls(**base)

    @property
    def codebook(self) -> CodebookConfig | None:
        return CodebookConfig(self.L, self.d) if self.d > 0 else None

    def flow_spec(self) -> FlowSpec:
        if self.flow == "rf":
            return FlowSpec.rectified()
        if self.flow == "edm":
            return FlowSpec.edm(self.edm_t_max, self.sigma_data)
        if self.flow == "vp":
            return FlowSpec.vp()
        if self.flow == "ve":
            return FlowSpec.ve()
        raise ValueError(f"unknown flow {self.flow!r}")

    def sample_t(self, rng: np.random.Generator, n: int) -> np.ndarray:
        flow = self.flow_spec()
        if self.t_dist == "uniform":
            return rng.uniform(self.t_eps, flow.t_max, size=n)
        t = np.exp(self.p_mean + self.p_std * rng.standard_normal(n))
        return np.clip(t, flow.t_floor, flow.t_max)

    def weight(self, t: np.ndarray) -> np.ndarray:
        if self.loss_weighting == "edm":
            return loss_weight_edm(t, self.sigma_data)
        return np.ones_like(np.asarray(t, dtype=np.float64))

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "constant" or self.steps == 0:
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * min(step, self.steps) / self.steps))


# --------------------------------------------------------------------------
# sampling weights

class SamplingWeights:
    """EMA of per-batch code frequencies over a codebook of ``size`` codes.

    Dense storage up to ``DENSE_LIMIT`` codes; beyond that only touched codes
    are stored and every other code has weight zero.
    """

    def __init__(self, size: int, mu: float = 0.999):
        if size < 1:
            raise ValueError("codebook size must be >= 1")
        if not 0.0 <= mu < 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {mu}")
        self.size = int(size)
        self.mu = float(mu)
        self.sparse = self.size > DENSE_LIMIT
        self._dense = None if self.sparse else np.zeros(self.size)
        self._sparse: dict[int, float] = {}

    def _check(self, codes) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64).reshape(-1)
        if codes.size == 0:
            raise ValueError("empty batch of codes")
        if np.any(codes < 0) or np.any(codes >= self.size):
            bad = codes[(codes < 0) | (codes >= self.size)][0]
            raise ValueError(f"code index {int(bad)} outside [0, {self.size})")
        return codes

    def update(self, codes) -> "SamplingWeights":
        """w <- mu * w + (1 - mu) * counts / batch_size."""
        codes = self._check(codes)
        uniq, counts = np.unique(codes, return_counts=True)
        freq = counts / codes.size
        if self.sparse:
            for k in self._sparse:
                self._sparse[k] *= self.mu
            for k, f in zip(uniq.tolist(), freq.tolist()):
                self._sparse[k] = self._sparse.get(k, 0.0) + (1.0 - self.mu) * f
        else:
            self._dense *= self.mu
            self._dense[uniq] += (1.0 - self.mu) * freq
        return self

    @classmethod
    def from_histogram(cls, codes, size: int, mu: float = 0.999) -> "SamplingWeights":
        w = cls(size, mu)
        codes = w._check(codes)
        uniq, counts = np.unique(codes, return_counts=True)
        freq = counts / codes.size
        if w.sparse:
            w._sparse = dict(zip(uniq.tolist(), freq.tolist()))
        else:
            w._dense[uniq] = freq
        return w

    def raw(self) -> tuple[np.ndarray, np.ndarray]:
        """(indices, unnormalized weights) of the nonzero entries."""
        if self.sparse:
            idx = np.array(sorted(self._sparse), dtype=np.int64)
            return idx, np.array([self._sparse[i] for i in idx.tolist()])
        idx = np.flatnonzero(self._dense)
        return idx, self._dense[idx].copy()

    def total(self) -> float:
        return float(self.raw()[1].sum())

    def probabilities(self) -> tuple[np.ndarray, np.ndarray]:
        idx, w = self.raw()
        s = w.sum()
        if s <= 0:
            raise ValueError("sampling weights are all zero")
        return idx, w / s

    def dense(self) -> np.ndarray:
        out = np.zeros(self.size)
        idx, p = self.probabilities()
        out[idx] = p
        return out

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx, p = self.probabilities()
        return idx[rng.choice(len(idx), size=n, p=p)]

    def state_arrays(self) -> dict[str, np.ndarray]:
        idx, w = self.raw()
        return {"weights/index": idx.astype(np.float64), "weights/value": w,
                "weights/header": np.array([float(self.size), self.mu])}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "SamplingWeights":
        size, mu = arrays["weights/header"]
        w = cls(int(size), float(mu))
        idx = arrays["weights/index"].astype(np.int64)
        if w.sparse:
            w._sparse = dict(zip(idx.tolist(), arrays["weights/value"].tolist()))
        else:
            w._dense[idx] = arrays["weights/value"]
        return w


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def code_entropy(weights: SamplingWeights) -> float:
    _, p = weights.probabilities()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


# --------------------------------------------------------------------------
# loss

def cfm_loss(net: DenoiserNet, flow: FlowSpec, x0: np.ndarray, noise: np.ndarray, t: np.ndarray,
             cond=None, weight: np.ndarray | None = None) -> T.Tensor:
    """Batch mean of the weighted regression loss, differentiable into net and encoder.

    Denoiser form: weight(t) * ||x0 - D(x_t, t, y)||^2.
    Velocity form: weight(t) * ||dX_t/dt - v(x_t, t, y)||^2.
    """
    b = len(x0)
    if b == 0:
        raise ValueError("empty batch")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    weight = np.ones(b) if weight is None else np.broadcast_to(weight, (b,))
    x0f = x0.reshape(b, -1)
    xt = interpolate(flow, x0, noise, t).reshape(b, -1)
    if net.parameterization == "denoiser":
        pred = denoise(net, xt, t, cond, flow)
        target = x0f
    else:
        pred = velocity(net, flow, xt, t, cond)
        target = flow_velocity(flow, x0, noise, t).reshape(b, -1)
    per = T.sum(T.square(T.sub(pred, T.Tensor(target))), axis=1)
    loss = T.mean(T.scale_rows(per, weight))
    if not np.isfinite(loss.item()):
        raise FloatingPointError("non-finite loss")
    return loss


# --------------------------------------------------------------------------
# training state

@dataclass
class Batch:
    x0: np.ndarray
    t: np.ndarray
    noise: np.ndarray


@dataclass
class TrainState:
    config: TrainConfig
    data_shape: tuple[int, ...]
    denoiser: DenoiserNet
    encoder: EncoderNet | None
    optimizer: object
    ema_denoiser: dict[str, np.ndarray]
    ema_encoder: dict[str, np.ndarray] | None
    weights: SamplingWeights
    rng: np.random.Generator
    step: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def flow(self) -> FlowSpec:
        return self.config.flow_spec()

    @property
    def codebook(self) -> CodebookConfig | None:
        return self.config.codebook

    def live_params(self) -> dict[str, T.Tensor]:
        out = {f"denoiser/{k}": v for k, v in self.denoiser.named_parameters().items()}
        if self.encoder is not None:
            out.update({f"encoder/{k}": v for k, v in self.encoder.named_parameters().items()})
        return out

    def ema_model(self) -> tuple[DenoiserNet, EncoderNet | None]:
        """Fresh networks carrying the EMA parameters."""
        den, enc = build_networks(self.config, self.data_shape)
        den.load_state_dict(self.ema_denoiser)
        if enc is not None:
            enc.load_state_dict(self.ema_encoder)
        return den, enc

    def config_hash(self) -> str:
        return config_hash(self.config)


def build_networks(config: TrainConfig, data_shape: tuple[int, ...]):
    rng = np.random.default_rng([config.seed, 1])
    cb = config.codebook
    precond = Preconditioning("edm", config.sigma_data) if config.parameterization == "denoiser" \
        else Preconditioning("identity")
    den = DenoiserNet(data_shape, rng, codebook=cb, hidden=config.hidden, depth=config.depth,
                      parameterization=config.parameterization, precond=precond)
    enc = None
    if cb is not None:
        enc_shape = data_shape if len(data_shape) != 1 else (data_shape[0],)
        enc = EncoderNet(enc_shape, cb.d, np.random.default_rng([config.seed, 2]),
                         hidden=config.enc_hidden)
    return den, enc


def init_state(config: TrainConfig, data_shape: tuple[int, ...]) -> TrainState:
    data_shape = tuple(data_shape)
    den, enc = build_networks(config, data_shape)
    cb = config.codebook
    state = TrainState(
        config=config, data_shape=data_shape, denoiser=den, encoder=enc, optimizer=None,
        ema_denoiser=den.state_dict(),
        ema_encoder=enc.state_dict() if enc is not None else None,
        weights=SamplingWeights(cb.size if cb else 1, config.ema_decay),
        rng=np.random.default_rng([config.seed, 3]),
    )
    state.optimizer = make_optimizer(config.optimizer, state.live_params(), config.lr)
    return state


def sample_batch(state: TrainState, data: FiniteDataset) -> Batch:
    rng = state.rng
    b = state.config.batch_size
    x0 = data.points[data.sample_indices(rng, b)]
    t = state.config.sample_t(rng, b)
    noise = rng.standard_normal(x0.shape)
    return Batch(x0, t, noise)


def train_step(state: TrainState, batch: Batch) -> float:
    """One optimization step; returns the batch loss."""
    cfg = state.config
    flow = state.flow
    enc_out = None
    if state.encoder is not None:
        enc_out = encode(state.encoder, batch.x0, state.codebook)
    cond = enc_out.ste if enc_out is not None else None
    loss = cfm_loss(state.denoiser, flow, batch.x0, batch.noise, batch.t, cond, cfg.weight(batch.t))

    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.lr = cfg.lr_at(state.step)
    state.optimizer.step()

    ema_update(state.ema_denoiser, state.denoiser.named_parameters(), cfg.ema_decay)
    if state.encoder is not None:
        ema_update(state.ema_encoder, state.encoder.named_parameters(), cfg.ema_decay)
        state.weights.update(enc_out.index)
    else:
        state.weights.update(np.zeros(len(batch.x0), dtype=np.int64))
    state.step += 1
    return loss.item()


def collect_weights_online(weights: SamplingWeights, codes) -> SamplingWeights:
    return weights.update(codes)


def dataset_codes(encoder: EncoderNet | None, data: FiniteDataset, codebook: CodebookConfig | None,
                  chunk: int = 4096) -> np.ndarray:
    if encoder is None:
        return np.zeros(len(data), dtype=np.int64)
    return np.concatenate([encode_indices(encoder, data.points[i:i + chunk], codebook)
                           for i in range(0, len(data), chunk)])


def collect_weights_offline(encoder: EncoderNet | None, data: FiniteDataset,
                            codebook: CodebookConfig | None, mu: float = 0.999) -> SamplingWeights:
    """Exact normalized code histogram of the dataset under a (typically EMA) encoder."""
    size = codebook.size if codebook else 1
    return SamplingWeights.from_histogram(dataset_codes(encoder, data, codebook), size, mu)


def train(config: TrainConfig, data: FiniteDataset, *, state: TrainState | None = None,
          log_path: str | Path | None = None,
          callback: Callable[[TrainState, float], None] | None = None) -> TrainState:
    """Run (or resume) training up to ``config.steps`` steps."""
    state = state or init_state(config, data.point_shape)
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if fh.tell() == 0:
            writer.writerow(["step", "L_CFM", "L_FM", "V", "code_entropy", "wall_time"])
    t_start = time.perf_counter()
    try:
        while state.step < config.steps:
            loss = train_step(state, sample_batch(state, data))
            if callback is not None:
                callback(state, loss)
            if config.log_every and (state.step % config.log_every == 0 or state.step == config.steps):
                row = {"step": state.step, "L_CFM": loss, "code_entropy": code_entropy(state.weights)}
                try:
                    dec = decompose_loss(model_velocity(state.denoiser, state.flow), state.flow,
                                         _coded(state, data), n_samples=1000, seed=state.step,
                                         t_sampler=config.sample_t)
                    row.update(L_FM=dec.l_fm, V=dec.v)
                except ValueError:
                    row.update(L_FM=float("nan"), V=float("nan"))
                row["wall_time"] = time.perf_counter() - t_start
                state.history.append(row)
                if writer is not None:
                    writer.writerow([row["step"], row["L_CFM"], row["L_FM"], row["V"],
                                     row["code_entropy"], row["wall_time"]])
                log.info("step %d loss %.5f", state.step, loss)
    finally:
        if fh is not None:
            fh.close()
    return state


def _coded(state: TrainState, data: FiniteDataset) -> FiniteDataset:
    if state.encoder is None:
        return data
    return data.with_codes(dataset_codes(state.encoder, data, state.codebook))


# --------------------------------------------------------------------------
# persistence

def save_state(state: TrainState, path: str | Path) -> None:
    arrays: dict[str, np.ndarray] = {}
    arrays.update({k: v.data for k, v in state.live_params().items()})
    arrays.update({f"ema/denoiser/{k}": v for k, v in state.ema_denoiser.items()})
    if state.ema_encoder is not None:
        arrays.update({f"ema/encoder/{k}": v for k, v in state.ema_encoder.items()})
    arrays.update({f"opt/{k}": v for k, v in state.optimizer.state_dict().items()})
    arrays.update(state.weights.state_arrays())
    meta = {"config": asdict(state.config), "config_hash": state.config_hash(),
            "data_shape": list(state.data_shape), "step": state.step,
            "rng": state.rng.bit_generator.state, "format": "qacflow-train-state"}
    checkpoint.save(path, arrays, meta)


class StaleCheckpointError(ValueError):
    pass


def load_state(path: str | Path, expect_config: TrainConfig | None = None) -> TrainState:
    arrays, meta = checkpoint.load(path)
    config = TrainConfig(**meta["config"])
    if config_hash(config) != meta["config_hash"]:
        raise StaleCheckpointError(f"{path}: stored config hash does not match stored config")
    if expect_config is not None and config_hash(expect_config) != meta["config_hash"]:
        # only the step budget may differ (resuming a longer run)
        if config_hash(_with_steps(expect_config, config.steps)) != meta["config_hash"]:
            raise StaleCheckpointError(f"{path}: checkpoint was trained with a different config")
        config = expect_config
    state = init_state(config, tuple(meta["data_shape"]))
    for k, p in state.live_params().items():
        p.data = arrays[k].copy()
    state.ema_denoiser = {k: arrays[f"ema/denoiser/{k}"].copy() for k in state.ema_denoiser}
    if state.ema_encoder is not None:
        state.ema_encoder = {k: arrays[f"ema/encoder/{k}"].copy() for k in state.ema_encoder}
    state.optimizer.load_state_dict({k[4:]: v for k, v in arrays.items() if k.startswith("opt/")})
    state.weights = SamplingWeights.from_arrays(arrays)
    state.rng.bit_generator.state = meta["rng"]
    state.step = int(meta["step"])
    return state


def _with_steps(config: TrainConfig, steps: int) -> TrainConfig:
    d = asdict(config)
    d["steps"] = steps
    return TrainConfig(**d)


# --------------------------------------------------------------------------
# bias-variance decomposition

VelocityModel = Callable[[np.ndarray, np.ndarray, np.ndarray | None], np.ndarray]


def model_velocity(net: DenoiserNet, flow: FlowSpec) -> VelocityModel:
    """``f(x, t, codes) -> v`` for a network, evaluated without a graph in chunks."""

    def f(x, t, codes=None, chunk: int = 8192):
        out = []
        for lo in range(0, len(x), chunk):
            sl = slice(lo, lo + chunk)
            c = None if codes is None or not net.conditional else np.asarray(codes)[sl]
            tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x),))[sl]
            with T.no_grad():
                out.append(velocity(net, flow, x[sl].reshape(len(x[sl]), -1), tt, c).data)
        return np.concatenate(out).reshape(x.shape)

    return f


def oracle_model(flow: FlowSpec, data: FiniteDataset, conditional: bool | None = None) -> VelocityModel:
    """The exact posterior velocity as a model (conditional when the dataset has codes)."""
    use_codes = data.codes is not None if conditional is None else conditional

    def f(x, t, codes=None):
        if use_codes:
            return oracle_velocity_conditional(flow, data, x, t, codes)
        return oracle_velocity(flow, data, x, t)

    return f


@dataclass(frozen=True)
class LossDecomposition:
    l_cfm: float
    l_fm: float
    v: float
    se_cfm: float
    se_fm: float
    se_v: float
    residual: float
    residual_se: float
    n_samples: int

    @property
    def combined_se(self) -> float:
        return math.sqrt(self.se_cfm ** 2 + self.se_fm ** 2 + self.se_v ** 2)

    def identity_holds(self, k: float = 3.0) -> bool:
        return abs(self.residual) < k * self.residual_se if self.residual_se > 0 else abs(self.residual) < 1e-12


def default_t_sampler(flow: FlowSpec) -> Callable[[np.random.Generator, int], np.ndarray]:
    lo = max(ORACLE_FLOOR * flow.t_max, flow.t_floor)
    if flow.family == "edm":
        def sampler(rng, n):
            return np.clip(np.exp(-1.2 + 1.2 * rng.standard_normal(n)), lo, flow.t_max)
        return sampler
    return lambda rng, n: rng.uniform(lo, flow.t_max, size=n)


def decompose_loss(model: VelocityModel, flow: FlowSpec, data: FiniteDataset, *,
                   n_samples: int = 100_000, seed: int = 0,
                   t_sampler: Callable[[np.random.Generator, int], np.ndarray] | None = None,
                   conditional: bool | None = None) -> LossDecomposition:
    """Monte-Carlo estimates of L_CFM, L_FM and V with unit time weighting.

    Time is drawn from ``t_sampler``, so each term is an expectation over that
    density. With ``conditional`` (default: the dataset has codes) the
    posterior is restricted to the code of each sample's clean point.
    """
    if n_samples < 1000:
        raise ValueError(f"decompose_loss needs at least 1000 MC samples, got {n_samples}")
    use_codes = data.codes is not None if conditional is None else conditional
    rng = np.random.default_rng(seed)
    sampler = t_sampler or default_t_sampler(flow)
    floor = ORACLE_FLOOR * flow.t_max
    idx = data.sample_indices(rng, n_samples)
    x0 = data.points[idx]
    noise = rng.standard_normal(x0.shape)
    t = np.clip(sampler(rng, n_samples), floor, flow.t_max)
    xt = interpolate(flow, x0, noise, t)
    target = flow_velocity(flow, x0, noise, t)
    codes = data.codes[idx] if use_codes else None
    if use_codes:
        u = oracle_velocity_conditional(flow, data, xt, t, codes)
    else:
        u = oracle_velocity(flow, data, xt, t)
    v = model(xt, t, codes)
    axes = tuple(range(1, x0.ndim))
    a = np.sum((target - v) ** 2, axis=axes)
    b = np.sum((u - v) ** 2, axis=axes)
    c = np.sum((target - u) ** 2, axis=axes)
    r = a - b - c
    rt = math.sqrt(n_samples)
    return LossDecomposition(
        l_cfm=float(a.mean()), l_fm=float(b.mean()), v=float(c.mean()),
        se_cfm=float(a.std(ddof=1) / rt), se_fm=float(b.std(ddof=1) / rt), se_v=float(c.std(ddof=1) / rt),
        residual=float(r.mean()), residual_se=float(r.std(ddof=1) / rt), n_samples=n_samples,
    )
