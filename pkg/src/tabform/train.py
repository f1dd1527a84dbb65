"""Masked-token pretraining and CLS fine-tuning loops.

Masking follows the usual 15% / 80-10-10 recipe, with random replacements
drawn from the victim cell's own column range so a corrupted cell is always
a plausible value for that column.  The loss is computed only at selected
cells, against the original ids.

Reproducibility scheme: all randomness descends from one seed through named
child streams — one for model init, one per epoch (split again into
shuffling, masking, and dropout).  Epoch streams are recreated from the
seed, so resuming at an epoch boundary replays the identical trajectory
without serializing generator state.
"""
from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluate as eval_mod
from .arch import Model, ModelConfig, load_checkpoint, load_trunk, save_checkpoint
from .errors import ConfigError, DataError, ShapeError
from .tensor import (
    AdamW,
    RngState,
    Tensor,
    binary_cross_entropy_with_logits,
    cross_entropy,
    mse,
    reshape,
    take,
)
from .vocab import MASK, Vocabulary

SELECT_P = 0.15
ACTION_SPLIT = (0.8, 0.1, 0.1)  # mask, random, keep
A_MASK, A_RANDOM, A_KEEP = 0, 1, 2


# ---------------------------------------------------------------------------
# masking


@dataclass(frozen=True)
class MaskingPlan:
    """Selected cells of one id-grid batch, with everything needed to
    corrupt and score them later without touching an rng again."""

    coords: np.ndarray  # (n, grids.ndim) integer cell coordinates
    actions: np.ndarray  # (n,) in {A_MASK, A_RANDOM, A_KEEP}
    original_ids: np.ndarray  # (n,) pre-corruption ids
    replacement_uniforms: np.ndarray  # (n,) u in [0,1) for A_RANDOM cells

    @property
    def n_selected(self) -> int:
        return len(self.actions)


def sample_masking_plan(grids: np.ndarray, rng: RngState) -> MaskingPlan:
    """Independent Bernoulli(0.15) per cell; 80/10/10 actions among selected."""
    grids = np.asarray(grids)
    selected = rng.random(grids.shape) < SELECT_P
    coords = np.argwhere(selected)
    n = len(coords)
    u_act = rng.random((n,))
    actions = np.full(n, A_KEEP, dtype=np.int8)
    actions[u_act < ACTION_SPLIT[0]] = A_MASK
    actions[(u_act >= ACTION_SPLIT[0]) & (u_act < ACTION_SPLIT[0] + ACTION_SPLIT[1])] = A_RANDOM
    return MaskingPlan(
        coords=coords,
        actions=actions,
        original_ids=grids[selected],
        replacement_uniforms=rng.random((n,)),
    )


def apply_masking(grids: np.ndarray, plan: MaskingPlan, vocab: Vocabulary) -> np.ndarray:
    """Corrupted copy: mask -> [MASK], random -> uniform in-column id,
    keep -> unchanged.  Unselected cells are untouched."""
    out = np.array(grids, copy=True)
    if plan.n_selected == 0:
        return out
    idx = tuple(plan.coords.T)
    values = out[idx]
    values[plan.actions == A_MASK] = MASK
    is_random = plan.actions == A_RANDOM
    if is_random.any():
        los = np.array([v[0] for v in map(vocab.column_range, range(len(vocab.column_names)))])
        his = np.array([v[1] for v in map(vocab.column_range, range(len(vocab.column_names)))])
        cols = plan.coords[is_random, -1]
        lo, hi = los[cols], his[cols]
        u = plan.replacement_uniforms[is_random]
        values[is_random] = lo + np.floor(u * (hi - lo)).astype(np.int64)
    out[idx] = values
    return out


def masked_lm_loss(logits: Tensor, plan: MaskingPlan) -> Tensor:
    """Cross-entropy at the selected cells only, against the original ids."""
    if plan.n_selected == 0:
        raise ConfigError("masked-LM loss over an empty selection is undefined")
    B, R, C, V = logits.shape
    flat = reshape(logits, (B * R * C, V))
    positions = plan.coords[:, 0] * R * C + plan.coords[:, 1] * C + plan.coords[:, 2]
    return cross_entropy(take(flat, positions), plan.original_ids)


# ---------------------------------------------------------------------------
# single steps


def pretrain_step(model: Model, batch: np.ndarray, optimizer: AdamW, rng: RngState,
                  vocab: Vocabulary, dropout_rng: RngState | None = None) -> float | None:
    """One masked-LM update; returns the loss, or None for a batch where
    the Bernoulli selection came up empty (skipped with a warning).

    Masking draws come from ``rng``; dropout noise from ``dropout_rng`` when
    given (keeping the two streams independent), else from ``rng`` too.
    """
    if model.cfg.head != "masked_lm":
        raise ConfigError(f"pretrain_step needs a masked_lm head, got {model.cfg.head}")
    plan = sample_masking_plan(batch, rng)
    if plan.n_selected == 0:
        warnings.warn("batch had no selected cells; skipping step", stacklevel=2)
        return None
    corrupted = apply_masking(batch, plan, vocab)
    logits = model.forward(
        corrupted, training=True, rng=rng if dropout_rng is None else dropout_rng
    )
    loss = masked_lm_loss(logits, plan)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.data)


def finetune_step(model: Model, batch: np.ndarray, labels: np.ndarray,
                  optimizer: AdamW, rng: RngState | None = None) -> float:
    """One supervised update: MSE over k normalized targets, or logistic
    loss on the single logit."""
    pred = model.forward(batch, training=True, rng=rng)
    loss = _finetune_loss(model, pred, labels)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.data)


def _finetune_loss(model: Model, pred: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels)
    if model.cfg.head == "regression":
        if labels.ndim != 2 or labels.shape != pred.shape:
            raise ConfigError(
                f"regression head {pred.shape} vs labels {labels.shape}: "
                "expected matching (batch, n_targets)"
            )
        return mse(pred, labels)
    if model.cfg.head == "binary":
        if labels.ndim != 1 or labels.shape != pred.shape:
            raise ConfigError(
                f"binary head {pred.shape} vs labels {labels.shape}: expected matching (batch,)"
            )
        return binary_cross_entropy_with_logits(pred, labels)
    raise ConfigError(f"finetune_step needs a task head, got {model.cfg.head}")


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainConfig:
    phase: str  # "pretrain" or "finetune"
    epochs: int
    batch_size: int
    lr: float
    weight_decay: float = 0.01
    freeze_stage1: bool = False

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.freeze_stage1 and self.phase == "pretrain":
            raise ConfigError("freeze_stage1 only applies to fine-tuning")

    def to_json(self) -> dict:
        return {
            "phase": self.phase,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "freeze_stage1": self.freeze_stage1,
        }


@dataclass
class TrainResult:
    best_epoch: int
    best_metric: float
    best_path: Path
    resume_path: Path
    log_path: Path
    epochs_run: int
    history: list[dict] = field(repr=False, default_factory=list)


STAGE1_PREFIXES = {
    "ft_flat": ("encoder.",),
    "tabbie": ("row_encoder.", "col_encoder."),
    "tabbert_row": ("stage1.",),
    "tabbert_col": ("stage1.",),
    "fieldy": ("row_context.", "col_context."),
}


def _frozen(model: Model, freeze_stage1: bool) -> set[str]:
    if not freeze_stage1:
        return set()
    prefixes = STAGE1_PREFIXES[model.cfg.family]
    return {n for n in model.params if n.startswith(prefixes)}


def _metric_direction(phase: str, head: str) -> tuple[str, int]:
    """(metric name, sign) with sign +1 when lower is better."""
    if phase == "pretrain":
        return "val_loss", +1
    if head == "regression":
        return "val_rmse", +1
    return "val_ap", -1


def _epoch_streams(seed: int, epoch: int) -> tuple[RngState, RngState, RngState]:
    base = RngState(seed).child(1).child(epoch)
    return base.child(0), base.child(1), base.child(2)  # shuffle, mask, dropout


def run_training(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset,
    seed: int,
    out_dir,
    resume: bool = False,
    init_from=None,
) -> TrainResult:
    """Fixed-epoch loop with per-epoch validation and best-model selection.

    Writes best.ckpt (weights of the best validation epoch), resume.ckpt
    (weights + optimizer moments, written every epoch), and train_log.csv.
    ``init_from`` loads pretrained trunk weights before fine-tuning.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_path = out_dir / "best.ckpt"
    resume_path = out_dir / "resume.ckpt"
    log_path = out_dir / "train_log.csv"

    if model_cfg.dtype != "float32":
        raise ConfigError("training runs in float32 (the checkpoint precision)")
    if train_cfg.phase == "pretrain" and model_cfg.head != "masked_lm":
        raise ConfigError("pretraining requires head = masked_lm")
    if train_cfg.phase == "finetune" and model_cfg.head == "masked_lm":
        raise ConfigError("fine-tuning requires a regression or binary head")

    model = Model(model_cfg, RngState(seed).child(0))
    vocab = dataset.vocab
    train_ids, train_labels, _ = dataset.grids("train")
    val_ids, val_labels, _ = dataset.grids("val")
    if len(train_ids) < train_cfg.batch_size:
        raise ConfigError(
            f"training split has {len(train_ids)} samples, fewer than one "
            f"batch of {train_cfg.batch_size}"
        )
    if len(val_ids) == 0:
        raise ConfigError("validation split is empty; cannot select a best epoch")
    train_y = _prepare_labels(model_cfg, train_cfg, dataset, train_labels)
    val_y = _prepare_labels(model_cfg, train_cfg, dataset, val_labels)

    if init_from is not None:
        arrays, meta = load_checkpoint(init_from)
        file_hash = meta.get("vocab_hash")
        if file_hash is not None and file_hash != vocab.content_hash():
            raise ConfigError(
                f"checkpoint {init_from} was pretrained with a different vocabulary "
                f"(hash {file_hash[:12]}… vs {vocab.content_hash()[:12]}…)"
            )
        load_trunk(model, arrays)

    frozen = _frozen(model, train_cfg.freeze_stage1)
    for name in frozen:
        model.params[name].requires_grad = False
    trainable = {n: t for n, t in model.params.items() if n not in frozen}
    optimizer = AdamW(
        trainable, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay
    )

    metric_name, sign = _metric_direction(train_cfg.phase, model_cfg.head)
    start_epoch = 0
    best_metric = float("inf")
    best_epoch = -1
    step = 0
    log_mode = "w"

    if resume:
        if not resume_path.exists():
            raise DataError(f"nothing to resume: {resume_path} does not exist")
        arrays, meta = load_checkpoint(resume_path)
        _check_resume_meta(meta, model_cfg, train_cfg, seed, vocab)
        opt_arrays = {
            k[len("opt."):]: v
            for k, v in arrays.items()
            if k.startswith(("opt.m.", "opt.v."))
        }
        weights = {
            k: v for k, v in arrays.items() if not k.startswith(("opt.m.", "opt.v."))
        }
        model.load_state(weights)
        optimizer.load_state_arrays(opt_arrays, meta["opt_t"])
        start_epoch = meta["epoch"] + 1
        best_metric = meta["best_metric"]
        best_epoch = meta["best_epoch"]
        step = meta["step"]
        log_mode = "a"

    history: list[dict] = []
    with open(log_path, log_mode, newline="") as fh:
        log = csv.writer(fh)
        if log_mode == "w":
            log.writerow(["epoch", "step", "split", "loss", "metric", "wall_ms"])
        for epoch in range(start_epoch, train_cfg.epochs):
            shuffle_rng, mask_rng, drop_rng = _epoch_streams(seed, epoch)
            order = shuffle_rng.permutation(len(train_ids))
            n_batches = len(train_ids) // train_cfg.batch_size
            for b in range(n_batches):
                t0 = time.perf_counter()
                sel = order[b * train_cfg.batch_size : (b + 1) * train_cfg.batch_size]
                if train_cfg.phase == "pretrain":
                    loss = pretrain_step(
                        model, train_ids[sel], optimizer, mask_rng, vocab, drop_rng
                    )
                else:
                    loss = finetune_step(model, train_ids[sel], train_y[sel], optimizer, drop_rng)
                step += 1
                if loss is not None:
                    wall = (time.perf_counter() - t0) * 1e3
                    log.writerow([epoch, step, "train", f"{loss:.6f}", "", f"{wall:.1f}"])

            t0 = time.perf_counter()
            val_loss, val_metric = _validate(
                model, model_cfg, train_cfg, val_ids, val_y, dataset, seed, epoch, vocab
            )
            wall = (time.perf_counter() - t0) * 1e3
            log.writerow(
                [epoch, step, "val", f"{val_loss:.6f}", f"{val_metric:.6f}", f"{wall:.1f}"]
            )
            history.append(
                {"epoch": epoch, "val_loss": val_loss, metric_name: val_metric}
            )

            if sign * val_metric < sign * best_metric or best_epoch < 0:
                best_metric = val_metric
                best_epoch = epoch
                save_checkpoint(
                    best_path,
                    model.state_arrays(),
                    _meta(model_cfg, train_cfg, seed, vocab, epoch, best_metric, best_epoch, step),
                )
            resume_arrays = dict(model.state_arrays())
            for k, v in optimizer.state_arrays().items():
                resume_arrays[f"opt.{k}"] = v
            meta = _meta(model_cfg, train_cfg, seed, vocab, epoch, best_metric, best_epoch, step)
            meta["opt_t"] = optimizer.state.get("t", 0)
            save_checkpoint(resume_path, resume_arrays, meta)

    return TrainResult(
        best_epoch=best_epoch,
        best_metric=best_metric,
        best_path=best_path,
        resume_path=resume_path,
        log_path=log_path,
        epochs_run=train_cfg.epochs - start_epoch,
        history=history,
    )


def _meta(model_cfg, train_cfg, seed, vocab, epoch, best_metric, best_epoch, step) -> dict:
    return {
        "config": model_cfg.to_json(),
        "train_config": train_cfg.to_json(),
        "seed": seed,
        "vocab_hash": vocab.content_hash(),
        "epoch": epoch,
        "step": step,
        "best_metric": best_metric,
        "best_epoch": best_epoch,
    }


def _check_resume_meta(meta, model_cfg, train_cfg, seed, vocab):
    if meta.get("config") != model_cfg.to_json():
        raise ConfigError("resume checkpoint was written for a different model config")
    stored = dict(meta.get("train_config") or {})
    current = train_cfg.to_json()
    # raising the epoch target is how an interrupted run continues; the
    # per-epoch rng streams make the result identical to a straight run
    stored.pop("epochs", None)
    current.pop("epochs", None)
    if stored != current:
        raise ConfigError("resume checkpoint was written for a different train config")
    if meta.get("seed") != seed:
        raise ConfigError(f"resume checkpoint used seed {meta.get('seed')}, not {seed}")
    if meta.get("vocab_hash") != vocab.content_hash():
        raise ConfigError("resume checkpoint was written for a different vocabulary")


def _prepare_labels(model_cfg, train_cfg, dataset, labels):
    """Flatten per-step targets to (B, R*k) in normalized units, or cast
    per-sequence labels to a float vector."""
    if train_cfg.phase == "pretrain":
        return None
    if labels is None:
        raise ConfigError(f"{train_cfg.phase} needs labels, but the dataset has none")
    if model_cfg.head == "regression":
        if labels.ndim != 3:
            raise ConfigError(f"per-step labels expected (B, R, k), got {labels.shape}")
        norm = dataset.normalizer
        if norm is not None:
            labels = norm.apply(labels.reshape(-1, labels.shape[-1])).reshape(labels.shape)
        flat = labels.reshape(labels.shape[0], -1)
        if flat.shape[1] != model_cfg.n_targets:
            raise ConfigError(
                f"head outputs {model_cfg.n_targets} targets but labels flatten "
                f"to {flat.shape[1]} per sequence"
            )
        return flat.astype(np.float64)
    if labels.ndim != 1:
        raise ConfigError(f"per-sequence labels expected (B,), got {labels.shape}")
    return labels.astype(np.float64)


def _validate(model, model_cfg, train_cfg, val_ids, val_y, dataset, seed, epoch, vocab):
    """(val loss, selection metric) for this epoch, deterministically."""
    val_rng = RngState(seed).child(2).child(epoch)
    if train_cfg.phase == "pretrain":
        plan = sample_masking_plan(val_ids, val_rng)
        if plan.n_selected == 0:
            raise DataError("validation masking selected no cells; split too small")
        corrupted = apply_masking(val_ids, plan, vocab)
        loss = float(masked_lm_loss(model.forward(corrupted), plan).data)
        return loss, loss
    pred = model.forward(val_ids)
    loss = float(_finetune_loss(model, pred, val_y).data)
    if model_cfg.head == "regression":
        k = len(dataset.normalizer.columns) if dataset.normalizer else 1
        rmse = eval_mod.rmse_avg(
            pred.data.reshape(-1, k), val_y.reshape(-1, k), dataset.normalizer
        )
        return loss, rmse
    ap = eval_mod.average_precision(pred.data, val_y.astype(np.int64))
    return loss, ap
