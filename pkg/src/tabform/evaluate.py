"""Task metrics, the hour-sequence probe, and seed aggregation.

All metric functions are pure over in-memory arrays and safe to run in
parallel across models or seeds.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .arch import Model, ModelConfig, load_checkpoint
from .errors import ConfigError, MetricError, ShapeError
from .tensor import RngState
from .vocab import MASK, Vocabulary


def rmse_avg(preds: np.ndarray, targets: np.ndarray, normalizer=None) -> float:
    """Per-target RMSE in original units, averaged over the target columns.

    ``preds`` and ``targets`` are (n, k) in normalized units when a
    normalizer is given; both are mapped back before scoring.
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.ndim != 2:
        raise ShapeError(
            f"rmse_avg expects matching (n, k) arrays, got {preds.shape} and {targets.shape}"
        )
    if normalizer is not None:
        preds = normalizer.invert(preds)
        targets = normalizer.invert(targets)
    per_column = np.sqrt(np.mean((preds - targets) ** 2, axis=0))
    out = float(np.mean(per_column))
    if not np.isfinite(out):
        raise MetricError("rmse_avg is not finite")
    return out


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Step-wise (non-interpolated) AP: mean over positives of the
    precision at that positive's rank, ranking by descending score with
    ties kept in original order."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeError(
            f"average_precision expects matching 1-d arrays, got {scores.shape} and {labels.shape}"
        )
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be 0/1")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("average precision is undefined without positives")
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    cum_pos = np.cumsum(ranked)
    ranks = np.arange(1, len(ranked) + 1)
    precision_at_pos = (cum_pos / ranks)[ranked == 1]
    return float(precision_at_pos.sum() / n_pos)


# ---------------------------------------------------------------------------
# the hour-sequence probe


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    n_samples: int
    n_scored: int
    n_correct: int


def run_probe(
    model,
    ids: np.ndarray,
    vocab: Vocabulary,
    hour_column: str = "Hour",
    masked_rows: int = 5,
    restrict_to_column: bool = False,
    batch_size: int = 16,
) -> ProbeResult:
    """Mask every cell of the last ``masked_rows`` rows, predict top-1
    tokens, and score only the hour column's cells.

    ``restrict_to_column`` limits the argmax to the hour column's own id
    range instead of the full vocabulary.
    """
    if model.cfg.head != "masked_lm":
        raise ConfigError("the probe needs a masked_lm model")
    if hour_column not in vocab.column_names:
        raise ConfigError(
            f"probe dataset has no {hour_column!r} column; columns are {vocab.column_names}"
        )
    ids = np.asarray(ids)
    if ids.ndim != 3:
        raise ShapeError(f"expected (N, R, C) probe grids, got {ids.shape}")
    N, R, C = ids.shape
    if not 0 < masked_rows < R:
        raise ConfigError(f"masked_rows must be in (0, {R}), got {masked_rows}")
    hour_idx = vocab.column_names.index(hour_column)
    lo, hi = vocab.column_range(hour_column)

    corrupted = ids.copy()
    corrupted[:, R - masked_rows :, :] = MASK
    n_correct = 0
    for start in range(0, N, batch_size):
        batch = corrupted[start : start + batch_size]
        logits = model.forward(batch).data  # (b, R, C, V)
        hour_logits = logits[:, R - masked_rows :, hour_idx, :]
        if restrict_to_column:
            pred = lo + hour_logits[..., lo:hi].argmax(axis=-1)
        else:
            pred = hour_logits.argmax(axis=-1)
        truth = ids[start : start + batch_size, R - masked_rows :, hour_idx]
        n_correct += int((pred == truth).sum())
    n_scored = N * masked_rows
    return ProbeResult(
        accuracy=n_correct / n_scored,
        n_samples=N,
        n_scored=n_scored,
        n_correct=n_correct,
    )


def oracle_copy_accuracy(
    ids: np.ndarray,
    vocab: Vocabulary,
    hour_column: str = "Hour",
    masked_rows: int = 5,
) -> float:
    """Rule-based ceiling for the hour probe: copy the last visible hour
    forward, stepping +1 per row mod 24, and score the masked hour cells.

    1.0 exactly when the data follows the hourly-sequence rule the probe
    assumes; below 1.0 flags a dataset that breaks it.
    """
    ids = np.asarray(ids)
    if ids.ndim != 3:
        raise ShapeError(f"expected (N, R, C) probe grids, got {ids.shape}")
    N, R, _ = ids.shape
    if not 0 < masked_rows < R:
        raise ConfigError(f"masked_rows must be in (0, {R}), got {masked_rows}")
    if hour_column not in vocab.column_names:
        raise ConfigError(
            f"probe dataset has no {hour_column!r} column; columns are {vocab.column_names}"
        )
    hour_idx = vocab.column_names.index(hour_column)
    last_visible = R - masked_rows - 1
    n_correct = 0
    for n in range(N):
        kind, value = vocab.decode(int(ids[n, last_visible, hour_idx]))
        if kind == "special":
            continue  # anchor hour unreadable; all masked_rows cells count as wrong
        h = int(value)
        for r in range(R - masked_rows, R):
            pred = vocab.encode(str((h + (r - last_visible)) % 24), hour_column)
            n_correct += int(pred == ids[n, r, hour_idx])
    return n_correct / (N * masked_rows)


# ---------------------------------------------------------------------------
# seed aggregation and report serialization


@dataclass(frozen=True)
class SeedRun:
    task: str
    family: str
    metric_name: str
    seed: int
    value: float


@dataclass(frozen=True)
class MetricsReport:
    task: str
    family: str
    metric_name: str
    seeds: tuple[SeedRun, ...]
    mean: float
    std: float | None  # omitted below 2 seeds

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "family": self.family,
            "metric": self.metric_name,
            "seeds": [{"seed": r.seed, "value": r.value} for r in self.seeds],
            "mean": self.mean,
            "std": self.std,
        }


def aggregate_seeds(runs: list[SeedRun]) -> MetricsReport:
    """Mean and sample standard deviation across seeds of one experiment."""
    if not runs:
        raise ConfigError("aggregate_seeds needs at least one run")
    tasks = {(r.task, r.family, r.metric_name) for r in runs}
    if len(tasks) > 1:
        raise ConfigError(f"refusing to aggregate mixed experiments: {sorted(tasks)}")
    values = np.array([r.value for r in runs], dtype=np.float64)
    if not np.isfinite(values).all():
        raise MetricError(f"non-finite metric values: {values.tolist()}")
    std = float(values.std(ddof=1)) if len(values) >= 2 else None
    return MetricsReport(
        task=runs[0].task,
        family=runs[0].family,
        metric_name=runs[0].metric_name,
        seeds=tuple(runs),
        mean=float(values.mean()),
        std=std,
    )


def write_metrics(report: MetricsReport, path) -> Path:
    """Canonical, byte-stable metrics.json (wall-clock is logged to the
    training CSV instead, so identical reruns produce identical bytes)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(report.to_json(), sort_keys=True, separators=(",", ":"))
    path.write_text(payload + "\n")
    return path


def evaluate_checkpoint(
    ckpt_path, dataset, split: str = "test", mask_seed: int = 0, batch_size: int = 64
) -> SeedRun:
    """Score one trained checkpoint on a dataset split.

    Regression heads report rmse_avg in original units, binary heads
    average_precision, and masked-LM heads the masked cross-entropy under a
    corruption drawn deterministically from ``mask_seed``.  Refuses a
    checkpoint whose vocabulary hash does not match the dataset's.
    """
    # module-scope import would be circular: the trainer uses these metrics
    from .train import apply_masking, masked_lm_loss, sample_masking_plan

    arrays, meta = load_checkpoint(ckpt_path)
    cfg = ModelConfig.from_json(meta["config"])
    stored = meta.get("vocab_hash")
    if stored is not None and stored != dataset.vocab.content_hash():
        raise ConfigError(
            f"checkpoint {ckpt_path} was trained with a different vocabulary than "
            f"this dataset (hash {stored[:12]}… vs {dataset.vocab.content_hash()[:12]}…)"
        )
    model = Model(cfg, RngState(0))
    model.load_state(arrays)
    ids, labels, _ = dataset.grids(split)
    if len(ids) == 0:
        raise ConfigError(f"split {split!r} is empty")
    task = dataset.manifest.get("recipe", "unknown")
    seed = int(meta.get("seed", 0))

    if cfg.head == "masked_lm":
        stream = RngState(mask_seed).child(3)
        total, n_total = 0.0, 0
        for j, i in enumerate(range(0, len(ids), batch_size)):
            chunk = ids[i : i + batch_size]
            plan = sample_masking_plan(chunk, stream.child(j))
            if plan.n_selected == 0:
                continue
            corrupted = apply_masking(chunk, plan, dataset.vocab)
            loss = float(masked_lm_loss(model.forward(corrupted), plan).data)
            total += loss * plan.n_selected
            n_total += plan.n_selected
        if n_total == 0:
            raise MetricError(f"masking selected no cells on split {split!r}")
        return SeedRun(task, cfg.family, "masked_lm_loss", seed, total / n_total)

    preds = np.concatenate(
        [
            model.forward(ids[i : i + batch_size]).data
            for i in range(0, len(ids), batch_size)
        ],
        axis=0,
    )
    if cfg.head == "regression":
        if labels is None or labels.ndim != 3:
            raise ConfigError(
                f"split {split!r} lacks the per-step labels a regression head needs"
            )
        k = labels.shape[-1]
        norm = dataset.normalizer
        target = labels.reshape(-1, k)
        if norm is not None:
            target = norm.apply(target)
        value = rmse_avg(preds.reshape(-1, k), target, norm)
        return SeedRun(task, cfg.family, "rmse_avg", seed, value)
    if labels is None or labels.ndim != 1:
        raise ConfigError(
            f"split {split!r} lacks the per-sequence labels a binary head needs"
        )
    value = average_precision(preds, labels.astype(np.int64))
    return SeedRun(task, cfg.family, "average_precision", seed, value)
