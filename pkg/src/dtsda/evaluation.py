"""Metrics, the source-only and DANN baselines, the cross-user experiment
runner and report files."""
from __future__ import annotations

import csv
import itertools
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, OptimizerState
from .data import PreparedTask, WindowedDataset, fmt, prepare_task
from .networks import DTSDAModel, extract_features, predict_target
from .training import TrainConfig, TrainingError, fit, lambda_schedule, minibatches

log = logging.getLogger(__name__)

METHODS = ("dtsda", "dann", "source_only")


# ----------------------------------------------------------------------------
# metrics


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [C, C], rows true, columns predicted
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if (self.counts < 0).any():
            raise ValueError("negative counts")
        if not self.class_names:
            self.class_names = tuple(str(i) for i in range(len(self.counts)))

    @property
    def accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else math.nan

    @property
    def recall(self) -> np.ndarray:
        support = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(support > 0, np.diag(self.counts) / np.maximum(support, 1), np.nan)


@dataclass
class Evaluation:
    accuracy: float
    recall: np.ndarray
    confusion: ConfusionMatrix


def evaluate(predictions, truth, num_classes: int, class_names: tuple[str, ...] = ()) -> Evaluation:
    pred = np.asarray(predictions)
    true = np.asarray(truth)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} predictions vs {true.shape} labels")
    if pred.size == 0:
        raise ValueError("nothing to evaluate")
    for name, arr in (("prediction", pred), ("label", true)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"{name} outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    cm = ConfusionMatrix(counts, class_names)
    return Evaluation(cm.accuracy, cm.recall, cm)


@dataclass
class ExperimentResult:
    task: str  # "source->target"
    method: str
    accuracy: float
    recall: np.ndarray
    confusion: ConfusionMatrix
    seed: int
    config: dict = field(default_factory=dict)
    runtime: float = 0.0
    dataset_hash: str = ""

    def __post_init__(self):
        if not (0.0 <= self.accuracy <= 1.0):
            raise ValueError("accuracy must lie in [0, 1]")

    @property
    def task_slug(self) -> str:
        return self.task.replace("->", "_to_")


def _evaluate_model(model: DTSDAModel, task: PreparedTask) -> Evaluation:
    ds = task.dataset
    pred = predict_target(model, ds.data[ds.domain == 1])
    return evaluate(pred, task.target_true_labels, ds.num_classes, ds.activity_names)


# ----------------------------------------------------------------------------
# baselines
#
# Both reuse the DTSDA model so that h_f, the cross-user bottleneck and the
# class classifier start from identical weights for a given seed. Source-only
# trains h_f -> bottleneck -> class classifier on source windows; DANN adds
# the cross-user domain discriminator behind gradient reversal, fed with the
# source batch and an equally sized target batch.


def _baseline_params(model: DTSDAModel, adversarial: bool):
    head = model.cross_user
    params = model.feature_extractor.parameters() + head.bottleneck.parameters() + head.class_classifier.parameters()
    if adversarial:
        params += head.domain_discriminator.parameters()
    return params


def train_baseline(task: PreparedTask, config: TrainConfig, adversarial: bool) -> tuple[DTSDAModel, list[dict]]:
    ds = task.dataset
    src = np.flatnonzero(ds.domain == 0)
    tgt = np.flatnonzero(ds.domain == 1)
    if len(src) < 2:
        raise ValueError("baselines need at least two source windows")
    if adversarial and len(tgt) < 1:
        raise ValueError("DANN needs target windows")
    model = DTSDAModel(config.architecture(ds), seed=config.seed)
    if ds.channel_mean is not None:
        model.channel_mean, model.channel_std = ds.channel_mean.copy(), ds.channel_std.copy()
    head = model.cross_user
    params = _baseline_params(model, adversarial)
    opt = OptimizerState(learning_rate=config.learning_rate)
    rng_s = np.random.default_rng([config.seed, 2])
    rng_t = np.random.default_rng([config.seed, 3])
    history = []
    model.train()
    for epoch in range(config.epochs):
        lam = lambda_schedule(epoch / config.epochs, config.lambda_max)
        batches = minibatches(len(src), config.batch_size, rng_s)
        if adversarial:
            need = sum(len(b) for b in batches)
            order = np.concatenate([rng_t.permutation(len(tgt)) for _ in range(-(-need // len(tgt)))])
        losses, offset = [], 0
        try:
            for b in batches:
                idx = src[b]
                bs = head.bottleneck(extract_features(model, ds.data[idx]))
                loss = ad.softmax_cross_entropy(head.class_classifier(bs), ds.labels[idx])
                if adversarial:
                    tdx = tgt[order[offset : offset + len(b)]]
                    offset += len(b)
                    bt = head.bottleneck(extract_features(model, ds.data[tdx], update_stats=False), update_stats=False)
                    dom = np.concatenate([np.zeros(len(idx), dtype=np.int64), np.ones(len(tdx), dtype=np.int64)])
                    r = ad.gradient_reversal(ad.concat_rows(bs, bt), lam)
                    loss = ad.add(loss, ad.softmax_cross_entropy(head.domain_discriminator(r), dom))
                for p in params:
                    p.zero_grad()
                ad.backward(loss)
                ad.optimizer_step(params, opt)
                losses.append(loss.item())
        except NonFiniteError as exc:
            raise TrainingError("non-finite value in baseline", {"epoch": epoch, "error": str(exc)}) from exc
        history.append({"epoch": epoch, "lambda": lam, "loss": float(np.mean(losses))})
    model.trained = True
    return model, history


def _run(method: str, task: PreparedTask, config: TrainConfig, task_id: str) -> ExperimentResult:
    t0 = time.perf_counter()
    if method == "dtsda":
        model, _ = fit(task, config)
    elif method in ("dann", "source_only"):
        model, _ = train_baseline(task, config, adversarial=method == "dann")
    else:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    ev = _evaluate_model(model, task)
    return ExperimentResult(
        task_id, method, ev.accuracy, ev.recall, ev.confusion, config.seed, asdict(config),
        time.perf_counter() - t0, task.digest(),
    )


def baseline_source_only(task: PreparedTask, config: TrainConfig, task_id: str = "source->target") -> ExperimentResult:
    return _run("source_only", task, config, task_id)


def baseline_dann(task: PreparedTask, config: TrainConfig, task_id: str = "source->target") -> ExperimentResult:
    return _run("dann", task, config, task_id)


def run_dtsda(task: PreparedTask, config: TrainConfig, task_id: str = "source->target") -> ExperimentResult:
    return _run("dtsda", task, config, task_id)


# ----------------------------------------------------------------------------
# experiment runner


def cross_user_tasks(users: list[str]) -> list[tuple[str, str]]:
    """Every ordered (source, target) pair of distinct users."""
    return list(itertools.permutations(users, 2))


def run_experiment(
    user_data: dict[str, WindowedDataset],
    config: TrainConfig,
    methods=METHODS,
    users: list[str] | None = None,
) -> list[ExperimentResult]:
    """Train and evaluate each method on each one-to-one cross-user task.

    Task ``k`` uses seed ``config.seed + k`` for data preparation and
    training, shared by all methods; every method sees the identical
    prepared dataset, which is checked by hash.
    """
    methods = tuple(methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
    users = list(users or sorted(user_data))
    missing = [u for u in users if u not in user_data]
    if missing:
        raise KeyError(f"no data for users {missing}")
    results = []
    for k, (s, t) in enumerate(cross_user_tasks(users)):
        seed = config.seed + k
        cfg = replace(config, seed=seed)
        task_id = f"{s}->{t}"
        reference = None
        for m in methods:
            task = prepare_task(user_data[s], user_data[t], seed=seed)
            digest = task.digest()
            if reference is None:
                reference = digest
            elif digest != reference:
                raise RuntimeError(f"{task_id}: prepared dataset differs between methods")
            log.info("task %s method %s", task_id, m)
            results.append(_run(m, task, cfg, task_id))
    return results


# ----------------------------------------------------------------------------
# reports

RESULT_COLUMNS = ("task", "method", "seed", "accuracy", "recall", "dataset_hash")


def summarize(results: list[ExperimentResult]) -> list[dict]:
    """Mean and population std of accuracy over tasks, per method."""
    out = []
    for m in dict.fromkeys(r.method for r in results):
        acc = np.array([r.accuracy for r in results if r.method == m])
        out.append({"method": m, "mean_accuracy": float(acc.mean()), "std_accuracy": float(acc.std()), "tasks": len(acc)})
    return out


def _color(frac: float) -> str:
    # linear ramp from white (0) to dark blue (1) over the row-normalised value
    lo, hi = np.array([255, 255, 255]), np.array([8, 48, 107])
    r, g, b = np.round(lo + (hi - lo) * min(max(frac, 0.0), 1.0)).astype(int)
    return f"#{r:02x}{g:02x}{b:02x}"


def confusion_svg(cm: ConfusionMatrix, cell: int = 40) -> str:
    """Heatmap with one ``<rect>`` per cell, shaded by row-normalised count."""
    C = len(cm.counts)
    support = np.maximum(cm.counts.sum(axis=1, keepdims=True), 1)
    frac = cm.counts / support
    margin = cell * 3
    size = margin + C * cell
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">']
    for i in range(C):
        y = margin + i * cell
        parts.append(f'<text x="{margin - 4}" y="{y + cell // 2}" text-anchor="end" font-size="10">{cm.class_names[i]}</text>')
        for j in range(C):
            x = margin + j * cell
            parts.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{_color(frac[i, j])}" stroke="#999"/>'
            )
            ink = "#fff" if frac[i, j] > 0.5 else "#000"
            parts.append(
                f'<text x="{x + cell // 2}" y="{y + cell // 2 + 4}" text-anchor="middle" font-size="11" fill="{ink}">{cm.counts[i, j]}</text>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_confusion_csv(cm: ConfusionMatrix, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\predicted", *cm.class_names])
        for name, row in zip(cm.class_names, cm.counts):
            w.writerow([name, *map(int, row)])


def read_confusion_csv(path: str | Path) -> ConfusionMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = tuple(rows[0][1:])
    return ConfusionMatrix(np.array([[int(v) for v in r[1:]] for r in rows[1:]]), names)


def emit_reports(results: list[ExperimentResult], out_dir: str | Path, heatmaps: bool = False) -> list[Path]:
    """Write ``results.csv``, ``summary.csv`` and a confusion CSV (and optional SVG) per result."""
    if not results:
        raise ValueError("no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    path = out / "results.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for r in results:
            w.writerow([r.task, r.method, r.seed, fmt(r.accuracy), " ".join(fmt(v) for v in r.recall), r.dataset_hash])
    written.append(path)
    path = out / "summary.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "mean_accuracy", "std_accuracy", "tasks"])
        for s in summarize(results):
            w.writerow([s["method"], fmt(s["mean_accuracy"]), fmt(s["std_accuracy"]), s["tasks"]])
    written.append(path)
    for r in results:
        stem = f"confusion_{r.task_slug}_{r.method}"
        write_confusion_csv(r.confusion, out / f"{stem}.csv")
        written.append(out / f"{stem}.csv")
        if heatmaps:
            (out / f"{stem}.svg").write_text(confusion_svg(r.confusion))
            written.append(out / f"{stem}.svg")
    return written


def read_results(out_dir: str | Path) -> list[ExperimentResult]:
    """Inverse of :func:`emit_reports` (config snapshot and runtime are not stored)."""
    out = Path(out_dir)
    results = []
    with open(out / "results.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            slug = row["task"].replace("->", "_to_")
            cm = read_confusion_csv(out / f"confusion_{slug}_{row['method']}.csv")
            results.append(
                ExperimentResult(
                    row["task"], row["method"], float(row["accuracy"]),
                    np.array([float(v) for v in row["recall"].split()]), cm, int(row["seed"]),
                    dataset_hash=row["dataset_hash"],
                )
            )
    return results
