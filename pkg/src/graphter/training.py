"""SGD with momentum, cosine learning-rate annealing, run configuration, and pretraining."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SHAPE_KINDS, Dataset, PointCloud, make_dataset
from .graph import KnnGraph, batch_neighbors, knn_graph, rebuild_after_transform
from .model import ARCHITECTURES, GraphTerModel, transformation_loss
from .transforms import (KINDS, MODES, apply_transform, canonical_strategy, sample_subset,
                         sample_transform, target_params)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# --- optimizer and schedule -------------------------------------------------------

@dataclass
class SgdState:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be >= 0, got {self.weight_decay}")


def sgd_step(params: dict, state: SgdState) -> None:
    """One SGD update: g' = g + wd*w; v = momentum*v + g'; w -= lr*v.

    ``params`` maps names to tensors whose ``.grad`` was filled by backward.
    """
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"sgd_step: parameter {name!r} has no gradient")
    for name, p in params.items():
        g = p.grad
        if state.weight_decay:
            g = g + p.data.dtype.type(state.weight_decay) * p.data
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.shape:
            raise ValueError(f"sgd_step: velocity shape {v.shape} != parameter shape {p.shape} for {name!r}")
        v = p.data.dtype.type(state.momentum) * v + g
        state.velocity[name] = v
        p.data = p.data - p.data.dtype.type(state.lr) * v


def zero_grad(params: dict) -> None:
    for p in params.values():
        p.grad = None


def cosine_lr(epoch: float, total_epochs: int, lr_max: float, lr_min: float) -> float:
    if total_epochs <= 0 or not 0 <= epoch <= total_epochs:
        raise ValueError(f"cosine_lr: epoch {epoch} outside [0, {total_epochs}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / total_epochs))


# --- run configuration -------------------------------------------------------------

@dataclass
class RunConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 8
    lr_max: float = 0.05
    lr_min: float = 0.0005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    kind: str = "translation"
    strategy: str = "iso"
    mode: str = "global"
    rate: float = 0.25
    k: int = 10
    architecture: str = "desk"
    dynamic_graph: bool = False
    classes: str = ",".join(SHAPE_KINDS)
    per_class: int = 32
    n_points: int = 256
    noise: float = 0.01
    split: float = 0.75
    record_timing: bool = False
    probe_task: str = "classify"
    probe_head: str = "linear"
    probe_epochs: int = 40
    probe_batch_size: int = 8
    probe_lr_max: float = 0.05
    probe_lr_min: float = 0.0005
    metrics_file: str = "metrics.csv"
    checkpoint_file: str = "model.gter"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        self.strategy = canonical_strategy(self.strategy)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.rate <= 1.0:
            raise ValueError(f"rate must be in (0, 1], got {self.rate}")
        if self.epochs < 0 or self.probe_epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or self.probe_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.lr_max < 0 or self.lr_min < 0 or self.probe_lr_max < 0 or self.probe_lr_min < 0:
            raise ValueError("learning rates must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {sorted(ARCHITECTURES)}")
        for c in self.class_list:
            if c not in SHAPE_KINDS:
                raise ValueError(f"unknown class {c!r}; expected among {SHAPE_KINDS}")
        if not 0.0 < self.split < 1.0:
            raise ValueError("split must be in (0, 1)")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.probe_task not in ("classify", "segment"):
            raise ValueError("probe_task must be classify or segment")
        if self.probe_head not in ("mlp", "linear"):
            raise ValueError("probe_head must be mlp or linear")

    @property
    def class_list(self) -> list:
        return [c.strip() for c in self.classes.split(",") if c.strip()]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        return cls(**parse_config_text(text, source))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), str(path))


def _convert(name: str, raw: str, typ, source: str, lineno: int):
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"{source}:{lineno}: bad value {raw!r} for {name}") from None


def config_types() -> dict:
    return {f.name: f.type for f in fields(RunConfig)}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    types = config_types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = _convert(key, raw, types[key], source, lineno)
    return values


def coerce_value(key: str, raw: str):
    types = config_types()
    if key not in types:
        raise ValueError(f"unknown config key {key!r}")
    return _convert(key, raw, types[key], "<flag>", 0)


# --- pretraining ----------------------------------------------------------------------

@dataclass
class Batch:
    coords_orig: np.ndarray
    coords_trans: np.ndarray
    nbrs_orig: np.ndarray
    nbrs_trans: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    batch_shape: tuple


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    mean_loss: float
    wall_ms: float

    def csv_row(self) -> str:
        return f"{self.epoch},{self.lr!r},{self.mean_loss!r},{self.wall_ms:.0f}"


METRICS_HEADER = "epoch,lr,mean_loss,wall_ms"


class GraphCache:
    """Original-view graphs depend only on the cloud, so build them once."""

    def __init__(self, k: int):
        self.k = k
        self._graphs: dict = {}

    def get(self, cloud: PointCloud) -> KnnGraph:
        key = id(cloud)
        hit = self._graphs.get(key)
        if hit is None or hit[0] is not cloud:
            hit = (cloud, knn_graph(cloud.coords, self.k))
            self._graphs[key] = hit
        return hit[1]


def make_batch(clouds: list, config: RunConfig, rng: np.random.Generator, dtype=np.float32,
               cache: Optional[GraphCache] = None) -> Batch:
    """Sample a fresh node subset and transformation per cloud and build both views' graphs."""
    n = clouds[0].num_points
    if any(c.num_points != n for c in clouds):
        raise ValueError("make_batch: clouds in a batch must share the same point count")
    co, ct, go, gt, tg, mk = [], [], [], [], [], []
    for cloud in clouds:
        mask = sample_subset(cloud, config.mode, config.rate, rng)
        t = sample_transform(config.kind, config.strategy, mask, rng)
        moved = apply_transform(cloud, t)
        go.append(cache.get(cloud) if cache is not None else knn_graph(cloud.coords, config.k))
        gt.append(rebuild_after_transform(moved, config.k))
        target, loss_mask = target_params(t, n, dtype)
        co.append(cloud.coords)
        ct.append(moved.coords)
        tg.append(target.data)
        mk.append(loss_mask)
    return Batch(
        np.concatenate(co).astype(dtype), np.concatenate(ct).astype(dtype),
        batch_neighbors(go), batch_neighbors(gt),
        np.concatenate(tg).astype(dtype), np.concatenate(mk), (len(clouds), n),
    )


def batch_loss(model: GraphTerModel, batch: Batch) -> Tensor:
    pred = model.forward(Tensor(batch.coords_orig), Tensor(batch.coords_trans),
                         batch.nbrs_orig, batch.nbrs_trans, batch.batch_shape)
    return transformation_loss(pred, Tensor(batch.targets), batch.mask)


def train_step(model: GraphTerModel, batch: Batch, state: SgdState) -> float:
    params = model.named_parameters()
    zero_grad(params)
    ad.current_tape().reset()
    model.train()
    loss = batch_loss(model, batch)
    value = float(loss.data)
    if not math.isfinite(value):
        ad.current_tape().reset()
        raise TrainingDiverged(f"non-finite loss {value} (lr={state.lr})")
    ad.backward(loss)
    sgd_step(params, state)
    zero_grad(params)
    return value


@dataclass
class PretrainResult:
    model: GraphTerModel
    metrics: list
    optimizer: SgdState


def build_model(config: RunConfig, dtype=np.float32) -> GraphTerModel:
    return GraphTerModel(config.kind, config.architecture, seed=config.seed, dtype=dtype, k=config.k,
                         dynamic_graph=config.dynamic_graph)


def pretrain(config: RunConfig, dataset, model: Optional[GraphTerModel] = None,
             metrics_path=None, checkpoint_path=None,
             on_epoch: Optional[Callable[[EpochMetrics], None]] = None) -> PretrainResult:
    """Train encoder and decoder end to end on the masked transformation-regression loss.

    ``dataset`` is a :class:`Dataset` (its train split is used) or a list of clouds.
    """
    clouds = dataset.train if isinstance(dataset, Dataset) else list(dataset)
    if not clouds:
        raise ValueError("pretrain: empty dataset")
    model = model if model is not None else build_model(config)
    state = SgdState(config.lr_max, config.momentum, config.weight_decay)
    sample_rng = np.random.default_rng([config.seed, 1])
    order_rng = np.random.default_rng([config.seed, 2])
    cache = GraphCache(config.k)
    metrics = []
    if metrics_path is not None:
        Path(metrics_path).write_text(METRICS_HEADER + "\n")
    for epoch in range(config.epochs):
        start = time.perf_counter()
        state.lr = cosine_lr(epoch, config.epochs, config.lr_max, config.lr_min)
        order = order_rng.permutation(len(clouds))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            batch = make_batch([clouds[i] for i in order[lo:lo + config.batch_size]], config, sample_rng,
                               model.dtype, cache)
            losses.append(train_step(model, batch, state))
        wall = (time.perf_counter() - start) * 1000 if config.record_timing else 0.0
        m = EpochMetrics(epoch + 1, state.lr, float(np.mean(losses)), wall)
        metrics.append(m)
        log.info("epoch %d lr %.5f loss %.6f", m.epoch, m.lr, m.mean_loss)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(m.csv_row() + "\n")
        if on_epoch is not None:
            on_epoch(m)
    if checkpoint_path is not None:
        save_training_checkpoint(checkpoint_path, model, state)
    return PretrainResult(model, metrics, state)


def save_training_checkpoint(path, model: GraphTerModel, state: SgdState) -> None:
    extra = {f"optimizer.velocity.{name}": v for name, v in state.velocity.items()}
    model.save(path, extra)


def load_training_checkpoint(path, config: Optional[RunConfig] = None) -> tuple[GraphTerModel, SgdState]:
    model, extra = GraphTerModel.load(path)
    prefix = "optimizer.velocity."
    velocity = {name[len(prefix):]: arr for name, arr in extra.items() if name.startswith(prefix)}
    if config is not None:
        state = SgdState(config.lr_max, config.momentum, config.weight_decay, velocity)
    else:
        state = SgdState(velocity=velocity)
    return model, state


def dataset_from_config(config: RunConfig) -> Dataset:
    return make_dataset(config.class_list, config.per_class, config.n_points, config.split, config.seed,
                        config.noise)
