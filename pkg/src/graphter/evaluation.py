"""Frozen-encoder probes (classification, part segmentation), metrics, and ablation grids."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .model import ClassifierHead, GraphTerModel, SegmentationHead, checksum
from .training import RunConfig, SgdState, cosine_lr, pretrain, sgd_step, zero_grad
from .graph import batch_neighbors, knn_graph
from .transforms import KINDS, MODES, STRATEGIES, canonical_strategy

log = logging.getLogger(__name__)


class FrozenEncoderViolation(RuntimeError):
    pass


@dataclass
class ProbeResult:
    per_class_accuracy: list
    overall_accuracy: float
    confusion: np.ndarray
    config: dict = field(default_factory=dict)


@dataclass
class SegResult:
    per_category_iou: dict
    mean_iou: float
    shape_ious: list


def accuracy(scores: np.ndarray, labels: np.ndarray, num_classes: Optional[int] = None,
             config: Optional[dict] = None) -> ProbeResult:
    """Argmax accuracy (ties go to the lowest class index) with a confusion matrix."""
    scores = np.asarray(scores)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError(f"accuracy: need one score row per sample, got {scores.shape} for {labels.shape[0]} labels")
    c = scores.shape[1] if num_classes is None else num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"accuracy: label out of range [0, {c})")
    pred = np.argmax(scores, axis=1)
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    totals = confusion.sum(axis=1)
    per_class = [float(confusion[i, i] / totals[i]) if totals[i] else float("nan") for i in range(c)]
    overall = float(np.trace(confusion) / labels.size) if labels.size else float("nan")
    return ProbeResult(per_class, overall, confusion, dict(config or {}))


def part_iou(pred: np.ndarray, gt: np.ndarray, part: int) -> Optional[float]:
    p, g = pred == part, gt == part
    union = np.count_nonzero(p | g)
    if union == 0:
        return None
    return np.count_nonzero(p & g) / union


def miou(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], shape_categories: Sequence[str],
         category_parts: dict, absent_parts: str = "one") -> SegResult:
    """Shape IoU = mean part IoU over the category's parts; mIoU = mean over shapes.

    A part absent from both prediction and ground truth scores 1 with
    ``absent_parts="one"``; with ``"skip"`` it is left out of the shape mean.
    """
    if absent_parts not in ("one", "skip"):
        raise ValueError("absent_parts must be 'one' or 'skip'")
    if not len(preds) == len(gts) == len(shape_categories):
        raise ValueError("miou: preds, gts and categories must have equal length")
    shape_ious, by_cat = [], {}
    for pred, gt, cat in zip(preds, gts, shape_categories):
        if cat not in category_parts:
            raise ValueError(f"miou: unknown category {cat!r}")
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"miou: prediction length {pred.shape} != ground truth length {gt.shape}")
        ious = []
        for part in category_parts[cat]:
            v = part_iou(pred, gt, part)
            if v is None:
                if absent_parts == "skip":
                    continue
                v = 1.0
            ious.append(v)
        s = float(np.mean(ious)) if ious else 1.0
        shape_ious.append(s)
        by_cat.setdefault(cat, []).append(s)
    per_cat = {c: float(np.mean(v)) for c, v in by_cat.items()}
    mean = float(np.mean(shape_ious)) if shape_ious else float("nan")
    return SegResult(per_cat, mean, shape_ious)


# --- probes -------------------------------------------------------------------------------

def encoder_arrays(model: GraphTerModel) -> dict:
    arrays = {n: p.data for n, p in model.encoder.named_parameters().items()}
    arrays.update(model.encoder.named_buffers())
    return arrays


def extract_features(model: GraphTerModel, clouds: list, batch_size: int = 8) -> list:
    """Eval-mode encoder features (N x F) of each cloud, without recording a tape."""
    was_training = model.training
    model.eval()
    feats = []
    try:
        with ad.no_grad():
            for lo in range(0, len(clouds), batch_size):
                chunk = clouds[lo:lo + batch_size]
                n = chunk[0].num_points
                if any(c.num_points != n for c in chunk):
                    for c in chunk:
                        enc = model.encode(c.coords.astype(model.dtype), knn_graph(c.coords, model.k).neighbors)
                        feats.append(enc.features.data)
                    continue
                nbrs = batch_neighbors([knn_graph(c.coords, model.k) for c in chunk])
                coords = np.concatenate([c.coords for c in chunk]).astype(model.dtype)
                enc = model.encode(coords, nbrs, (len(chunk), n))
                feats.extend(np.split(enc.features.data, len(chunk)))
    finally:
        model.train(was_training)
    return feats


@dataclass
class Standardizer:
    """Fixed per-channel centring/scaling fitted on the probe's training features."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, feats: list) -> "Standardizer":
        allf = np.concatenate(feats).astype(np.float64)
        std = allf.std(axis=0)
        return cls(allf.mean(axis=0), 1.0 / np.where(std > 1e-8, std, 1.0))

    def __call__(self, f: np.ndarray) -> np.ndarray:
        return ((f - self.mean) * self.scale).astype(f.dtype)


@dataclass
class ProbeOutcome:
    head: object
    task: str
    result: object
    train_losses: list
    encoder_checksum: str
    standardizer: Standardizer


def _batches(n_items: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n_items)
    for lo in range(0, n_items, batch_size):
        yield order[lo:lo + batch_size]


def fit_head(head, feats: list, targets: list, task: str, config: RunConfig, seed: int) -> list:
    """Train ``head`` on precomputed per-cloud features; returns per-epoch mean losses."""
    params = head.named_parameters()
    state = SgdState(config.probe_lr_max, config.momentum, config.weight_decay)
    order_rng = np.random.default_rng([seed, 11])
    drop_rng = np.random.default_rng([seed, 12])
    losses = []
    for epoch in range(config.probe_epochs):
        state.lr = cosine_lr(epoch, config.probe_epochs, config.probe_lr_max, config.probe_lr_min)
        epoch_losses = []
        for idx in _batches(len(feats), config.probe_batch_size, order_rng):
            n = feats[idx[0]].shape[0]
            x = Tensor(np.concatenate([feats[i] for i in idx]))
            zero_grad(params)
            ad.current_tape().reset()
            out = head(x, (len(idx), n), training=True, rng=drop_rng)
            if task == "classify":
                loss = ad.cross_entropy(out, np.array([targets[i] for i in idx]))
            else:
                loss = ad.nll_loss(out, np.concatenate([targets[i] for i in idx]))
            value = float(loss.data)
            if not math.isfinite(value):
                raise RuntimeError(f"probe training diverged: loss {value} at lr {state.lr:g}; "
                                   f"lower probe_lr_max (the mlp head needs about 0.01)")
            ad.backward(loss)
            sgd_step(params, state)
            epoch_losses.append(value)
        losses.append(float(np.mean(epoch_losses)))
    zero_grad(params)
    return losses


def predict(head, feats: list, task: str, batch_size: int = 8) -> list:
    out = []
    with ad.no_grad():
        for lo in range(0, len(feats), batch_size):
            chunk = feats[lo:lo + batch_size]
            n = chunk[0].shape[0]
            if any(f.shape[0] != n for f in chunk):
                for f in chunk:
                    out.extend(predict(head, [f], task, 1))
                continue
            scores = head(Tensor(np.concatenate(chunk)), (len(chunk), n), training=False).data
            out.extend(scores if task == "classify" else np.split(scores, len(chunk)))
    return out


def build_head(task: str, in_dim: int, dataset: Dataset, config: RunConfig, dtype=np.float32):
    rng = np.random.default_rng([config.seed, 10])
    if task == "classify":
        return ClassifierHead(in_dim, len(dataset.class_names), rng, dtype, linear=config.probe_head == "linear")
    if task == "segment":
        return SegmentationHead(in_dim, dataset.num_parts, rng, dtype)
    raise ValueError(f"unknown probe task {task!r}; expected classify or segment")


def train_probe(model: GraphTerModel, dataset: Dataset, config: RunConfig, task: Optional[str] = None,
                head=None) -> ProbeOutcome:
    """Train a classification or segmentation head on frozen encoder features and score the test split.

    Encoder parameters and batchnorm statistics are verified bitwise unchanged afterwards.
    """
    task = task or config.probe_task
    before = checksum(encoder_arrays(model))
    flags = {n: p.requires_grad for n, p in model.encoder.named_parameters().items()}
    for p in model.encoder.named_parameters().values():
        p.requires_grad = False
    try:
        train, test = dataset.train, dataset.test
        if not train:
            raise ValueError("train_probe: empty train split")
        train_f = extract_features(model, train)
        test_f = extract_features(model, test)
        std = Standardizer.fit(train_f)
        train_f = [std(f) for f in train_f]
        test_f = [std(f) for f in test_f]
        if head is None:
            head = build_head(task, model.feature_width, dataset, config, model.dtype)
        if task == "classify":
            targets = [c.class_label for c in train]
        else:
            targets = [dataset.global_part_labels(c) for c in train]
        losses = fit_head(head, train_f, targets, task, config, config.seed)
        result = score_probe(head, test_f, test, dataset, task, config)
    finally:
        for n, p in model.encoder.named_parameters().items():
            p.requires_grad = flags[n]
    after = checksum(encoder_arrays(model))
    if after != before:
        raise FrozenEncoderViolation("encoder weights changed during probe training")
    return ProbeOutcome(head, task, result, losses, after, std)


def score_probe(head, feats: list, clouds: list, dataset: Dataset, task: str, config: RunConfig):
    echo = {"task": task, "probe_head": config.probe_head, "probe_epochs": config.probe_epochs, "seed": config.seed}
    if not clouds:
        raise ValueError("score_probe: empty evaluation split")
    outputs = predict(head, feats, task)
    if task == "classify":
        labels = np.array([c.class_label for c in clouds])
        return accuracy(np.stack(outputs), labels, len(dataset.class_names), echo)
    cat_parts = dataset.category_parts()
    preds, gts, cats = [], [], []
    for logp, cloud in zip(outputs, clouds):
        name = dataset.class_names[cloud.class_label]
        parts = np.array(cat_parts[name])
        preds.append(parts[np.argmax(logp[:, parts], axis=1)])
        gts.append(dataset.global_part_labels(cloud))
        cats.append(name)
    return miou(preds, gts, cats, cat_parts)


def probe_metric(result) -> tuple[str, float]:
    if isinstance(result, ProbeResult):
        return "accuracy", result.overall_accuracy
    return "miou", result.mean_iou


# --- ablation grid ------------------------------------------------------------------------

AXES = ("kind", "strategy", "mode", "rate")
RESULT_FIELDS = ["kind", "strategy", "mode", "rate", "seed", "metric", "value"]


def parse_rate(text: str) -> float:
    v = float(text.rstrip("%"))
    return v / 100.0 if v > 1.0 or text.endswith("%") else v


def parse_axes(spec: str, template: RunConfig) -> dict:
    """``"kind=translation,rotation;rate=25,50"`` -> axis values; strategy and mode default to both options."""
    axes = {"kind": [template.kind], "strategy": list(STRATEGIES), "mode": list(MODES), "rate": [template.rate]}
    for part in filter(None, (p.strip() for p in spec.replace(" ", "").split(";"))):
        if "=" not in part:
            raise ValueError(f"axes: expected name=v1,v2 in {part!r}")
        name, values = part.split("=", 1)
        vals = [v for v in values.split(",") if v]
        if name not in AXES:
            raise ValueError(f"axes: unknown axis {name!r}; expected one of {AXES}")
        if not vals:
            raise ValueError(f"axes: no values for {name}")
        if name == "kind":
            for v in vals:
                if v not in KINDS:
                    raise ValueError(f"axes: unknown kind {v!r}")
        elif name == "strategy":
            vals = [canonical_strategy(v) for v in vals]
        elif name == "mode":
            for v in vals:
                if v not in MODES:
                    raise ValueError(f"axes: unknown mode {v!r}")
        else:
            try:
                vals = [parse_rate(v) for v in vals]
            except ValueError:
                raise ValueError(f"axes: bad rate in {values!r}") from None
            for v in vals:
                if not 0.0 < v <= 1.0:
                    raise ValueError(f"axes: rate {v} outside (0, 1]")
        axes[name] = vals
    return axes


def grid_cells(axes: dict) -> list:
    return [dict(kind=k, rate=r, mode=m, strategy=s)
            for k, r, m, s in itertools.product(axes["kind"], axes["rate"], axes["mode"], axes["strategy"])]


def cell_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def run_cell(template: RunConfig, cell: dict, seed: int, dataset: Dataset) -> tuple[str, float]:
    cfg = template.replace(seed=seed, **cell)
    result = pretrain(cfg, dataset)
    outcome = train_probe(result.model, dataset, cfg)
    return probe_metric(outcome.result)


def _run_cell_safe(args):
    template, cell, seed, dataset = args
    try:
        return run_cell(template, cell, seed, dataset)
    except Exception as exc:  # a failed cell is reported, not fatal
        log.error("ablation cell %s failed: %s", cell, exc)
        return "failed", float("nan")


def ablation_grid(template: RunConfig, axes: dict, dataset: Optional[Dataset] = None, jobs: int = 1) -> list:
    """One pretrain + probe run per cell of kind x rate x mode x strategy; returns result rows."""
    from .training import dataset_from_config

    dataset = dataset if dataset is not None else dataset_from_config(template)
    cells = grid_cells(axes)
    seeds = [cell_seed(template.seed, i) for i in range(len(cells))]
    jobs_args = [(template, c, s, dataset) for c, s in zip(cells, seeds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_cell_safe, jobs_args))
    else:
        outcomes = [_run_cell_safe(a) for a in jobs_args]
    rows = []
    for cell, seed, (metric, value) in zip(cells, seeds, outcomes):
        rows.append(dict(kind=cell["kind"], strategy=cell["strategy"], mode=cell["mode"], rate=cell["rate"],
                         seed=seed, metric=metric, value=value))
    return rows


def results_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_FIELDS)
    for r in rows:
        w.writerow([r["kind"], r["strategy"], r["mode"], repr(float(r["rate"])), r["seed"], r["metric"],
                    repr(float(r["value"]))])
    return buf.getvalue()


def summary_table(rows: list) -> str:
    """Kind/rate rows against global/local x iso/aniso columns, plus a row mean."""
    cols = [(m, s) for m in MODES for s in STRATEGIES]
    keys = []
    for r in rows:
        key = (r["kind"], r["rate"])
        if key not in keys:
            keys.append(key)
    lookup = {(r["kind"], r["rate"], r["mode"], r["strategy"]): r["value"] for r in rows}
    header = f"{'kind':<12} {'rate':>5} " + " ".join(f"{m[:3]}/{s:<5}" for m, s in cols) + "   mean"
    lines = [header, "-" * len(header)]
    for kind, rate in keys:
        vals = [lookup.get((kind, rate, m, s)) for m, s in cols]
        cells = " ".join(f"{v:>9.4f}" if v is not None else f"{'-':>9}" for v in vals)
        present = [v for v in vals if v is not None and not math.isnan(v)]
        mean = f"{np.mean(present):7.4f}" if present else "      -"
        lines.append(f"{kind:<12} {rate * 100:>4.0f}% {cells} {mean}")
    return "\n".join(lines)


def result_dict(result) -> dict:
    d = asdict(result)
    if "confusion" in d:
        d["confusion"] = np.asarray(d["confusion"]).tolist()
    return d
