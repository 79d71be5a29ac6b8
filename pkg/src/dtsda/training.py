"""Three-phase adversarial training loop.

Every epoch: (1) fine-grained updates of ``h_f`` and its head on pseudo
class/state labels, then a relabelling of temporal states, then (2)
temporal-state updates and (3) cross-user updates, both on top of the
extractor learned in (1).
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, OptimizerState
from .data import PreparedTask, WindowedDataset
from .labeling import relabel_dataset
from .networks import (
    Architecture,
    DTSDAModel,
    cross_user_loss,
    extract_features,
    features_eval,
    fine_grained_loss,
    temporal_bottleneck_eval,
    temporal_component_loss,
    temporal_state_probs_eval,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(f"{message}: {snapshot}")
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    num_states: int = 3
    gamma: float = 0.2
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    lambda_max: float = 1.0
    seed: int = 0
    update_extractor_in_phases_2_3: bool = False
    conv_channels: tuple[int, int] = (32, 64)
    kernel: int = 5
    bottleneck: int = 64
    hidden: int = 64

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        if self.num_states < 1:
            raise ValueError("num_states must be >= 1")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batchnorm needs two samples)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lambda_max < 0:
            raise ValueError("lambda_max must be >= 0")

    def architecture(self, ds: WindowedDataset) -> Architecture:
        return Architecture(
            ds.num_channels, ds.window_len, ds.num_classes, self.num_states,
            self.conv_channels, self.kernel, self.bottleneck, self.hidden,
        )


@dataclass
class EpochState:
    epoch: int
    lam: float
    loss_f: float = math.nan
    loss_t: float = math.nan
    loss_c: float = math.nan
    ts_change_fraction: float = 0.0
    wall_seconds: float = 0.0
    source_windows: int = 0
    target_windows: int = 0

    def row(self) -> dict:
        return {
            "epoch": self.epoch,
            "lambda": self.lam,
            "L_f": self.loss_f,
            "L_t": self.loss_t,
            "L_c": self.loss_c,
            "ts_change_fraction": self.ts_change_fraction,
            "wall_seconds": self.wall_seconds,
        }


def lambda_schedule(progress: float, lambda_max: float = 1.0) -> float:
    """``lambda_max * (2 / (1 + exp(-10 p)) - 1)``"""
    if not 0.0 <= progress <= 1.0:
        raise ValueError("progress must lie in [0, 1]")
    return lambda_max * (2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0)


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch of one is folded into the previous one."""
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


@dataclass
class Trainer:
    """Model, data and optimiser state for one DTSDA run."""

    model: DTSDAModel
    dataset: WindowedDataset
    config: TrainConfig
    rng: np.random.Generator
    optimizers: dict[str, OptimizerState] = field(default_factory=dict)
    epoch: int = 0
    history: list[EpochState] = field(default_factory=list)

    def phase_params(self, phase: str):
        m = self.model
        head = {"fine": m.fine_grained, "temporal": m.temporal_state, "cross": m.cross_user}[phase]
        params = head.parameters()
        if phase == "fine" or self.config.update_extractor_in_phases_2_3:
            params = m.feature_extractor.parameters() + params
        return params

    def step(self, phase: str, loss) -> None:
        params = self.phase_params(phase)
        for p in params:
            p.zero_grad()
        ad.backward(loss)
        ad.optimizer_step(params, self.optimizers[phase])


def initialize(task: PreparedTask | WindowedDataset, config: TrainConfig) -> Trainer:
    """Fresh model and all temporal states set to 0, so every pseudo label equals its class."""
    ds = task.dataset if isinstance(task, PreparedTask) else task
    if len(ds) == 0:
        raise ValueError("empty dataset")
    if (ds.domain == 0).sum() == 0:
        raise ValueError("no source windows")
    ds.ts[:] = 0
    model = DTSDAModel(config.architecture(ds), seed=config.seed)
    if ds.channel_mean is not None:
        model.channel_mean, model.channel_std = ds.channel_mean.copy(), ds.channel_std.copy()
    opts = {k: OptimizerState(learning_rate=config.learning_rate) for k in ("fine", "temporal", "cross")}
    return Trainer(model, ds, config, np.random.default_rng([config.seed, 1]), opts)


def _guard(trainer: Trainer, phase: str, fn, *args):
    try:
        return fn(*args)
    except NonFiniteError as exc:
        snap = {"epoch": trainer.epoch, "phase": phase, "error": str(exc)}
        raise TrainingError("non-finite value during training", snap) from exc


def train_epoch(trainer: Trainer) -> EpochState:
    cfg, model, ds = trainer.config, trainer.model, trainer.dataset
    t0 = time.perf_counter()
    lam = lambda_schedule(trainer.epoch / cfg.epochs if cfg.epochs else 1.0, cfg.lambda_max)
    state = EpochState(trainer.epoch, lam)
    C = ds.num_classes
    x, c, d = ds.data, ds.labels, ds.domain
    model.train()

    # phase 1: fine-grained, on pseudo labels from the previous relabel
    yhat = ds.ts * 2 * C + c
    losses = []
    for idx in minibatches(len(ds), cfg.batch_size, trainer.rng):
        loss = _guard(trainer, "fine", fine_grained_loss, model, x[idx], yhat[idx], d[idx])
        _guard(trainer, "fine", trainer.step, "fine", loss.total)
        losses.append(loss.item())
        state.source_windows += int((d[idx] == 0).sum())
        state.target_windows += int((d[idx] == 1).sum())
    state.loss_f = float(np.mean(losses))

    # relabel temporal states with the refreshed extractor
    feats = features_eval(model, x)
    state.ts_change_fraction = relabel_dataset(
        ds,
        lambda i: temporal_bottleneck_eval(model, feats[i]),
        lambda i: temporal_state_probs_eval(model, feats[i]),
        cfg.num_states,
        cfg.gamma,
    )
    model.train()
    ts = ds.ts

    def batch_features(idx):
        if cfg.update_extractor_in_phases_2_3:
            return extract_features(model, x[idx])
        return feats[idx]

    # phase 2: temporal states, class/domain confusion through gradient reversal
    losses = []
    for idx in minibatches(len(ds), cfg.batch_size, trainer.rng):
        loss = _guard(trainer, "temporal", temporal_component_loss, model, batch_features(idx), ts[idx], c[idx], d[idx], lam)
        _guard(trainer, "temporal", trainer.step, "temporal", loss.total)
        losses.append(loss.item())
    state.loss_t = float(np.mean(losses))

    # phase 3: cross-user classifier
    losses = []
    for idx in minibatches(len(ds), cfg.batch_size, trainer.rng):
        loss = _guard(trainer, "cross", cross_user_loss, model, batch_features(idx), ts[idx], c[idx], d[idx], lam)
        _guard(trainer, "cross", trainer.step, "cross", loss.total)
        losses.append(loss.item())
    state.loss_c = float(np.mean(losses))

    state.wall_seconds = time.perf_counter() - t0
    for v in (state.loss_f, state.loss_t, state.loss_c):
        if not math.isfinite(v):
            raise TrainingError("non-finite epoch loss", state.row())
    trainer.epoch += 1
    trainer.history.append(state)
    log.info(
        "epoch %d lambda=%.3f L_f=%.4f L_t=%.4f L_c=%.4f ts_changed=%.3f (%.1fs)",
        state.epoch, lam, state.loss_f, state.loss_t, state.loss_c, state.ts_change_fraction, state.wall_seconds,
    )
    return state


def fit(task: PreparedTask | WindowedDataset, config: TrainConfig) -> tuple[DTSDAModel, list[EpochState]]:
    """Run ``config.epochs`` epochs and return the final model (no early stopping)."""
    trainer = initialize(task, config)
    for _ in range(config.epochs):
        train_epoch(trainer)
    trainer.model.trained = True
    return trainer.model, trainer.history


LOG_COLUMNS = ("epoch", "lambda", "L_f", "L_t", "L_c", "ts_change_fraction", "wall_seconds")


def write_training_log(history: list[EpochState], path: str | Path) -> None:
    from .data import fmt

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for st in history:
            row = st.row()
            w.writerow([row["epoch"]] + [fmt(row[k]) for k in LOG_COLUMNS[1:]])


def config_from_mapping(values: dict) -> TrainConfig:
    """Build a :class:`TrainConfig` from string values, ignoring unknown keys."""
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    kwargs = {}
    for key, raw in values.items():
        if key not in kinds:
            continue
        kind = kinds[key]
        if kind == "bool":
            kwargs[key] = str(raw).strip().lower() in ("1", "true", "yes", "on")
        elif kind == "int":
            kwargs[key] = int(raw)
        elif kind == "float":
            kwargs[key] = float(raw)
        else:
            kwargs[key] = tuple(int(v) for v in str(raw).replace(",", " ").split())
    return TrainConfig(**kwargs)


def config_snapshot(cfg: TrainConfig) -> dict:
    return asdict(cfg)
