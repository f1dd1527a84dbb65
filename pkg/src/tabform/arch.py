"""Five attention layouts over a tokenized R x C field grid.

Families:
  ft_flat      one encoder over all R*C fields flattened to a sequence
  tabbie       per layer, a row-stream and a column-stream encoder whose
               states are averaged cellwise before the next layer
  tabbert_row  stage 1 encodes each row, mean-pools it to one vector;
               stage 2 attends over the R row vectors
  tabbert_col  the same with the table transposed
  fieldy       stage 1 runs row-context and column-context encoders
               independently, fuses them per cell (concat -> FC -> GELU),
               then stage 2 attends over all R*C fused field vectors

Plus: learned row-position / column-index embeddings behind flags,
parameter-parity sizing across families, an attention-pair ledger that
counts query-key scores per stage, and a flat binary checkpoint format.

A Model instance is single-logical-thread during forward/backward;
distinct instances may train in parallel processes.  The ledger is
per-instance, never shared.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .tensor import (
    RngState,
    Tensor,
    broadcast_to,
    concat,
    dropout,
    gelu,
    layer_norm,
    matmul,
    mean,
    reshape,
    softmax,
    take,
    transpose,
)

FAMILIES = ("ft_flat", "tabbie", "tabbert_row", "tabbert_col", "fieldy")
SINGLE_STAGE = ("ft_flat", "tabbie")
HEADS = ("masked_lm", "regression", "binary")
CKPT_MAGIC = b"TBFM"
CKPT_VERSION = 1


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ModelConfig:
    family: str
    d: int
    heads: int
    l1: int
    l2: int = 0
    ffn_dim: int | None = None  # default 4*d
    stage1_ffn_dim: int | None = None  # fieldy stage-1 width, default ffn_dim
    use_row_pos_emb: bool = True
    use_col_index_emb: bool = True
    dropout: float = 0.0
    vocab_size: int = 0
    rows: int = 0
    cols: int = 0
    head: str = "masked_lm"
    n_targets: int = 1
    dtype: str = "float32"
    tabbie_pooling: str = "cls_grid"  # or "mean"
    fieldy_split_token_emb: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.d < 1 or self.heads < 1 or self.d % self.heads != 0:
            raise ConfigError(f"hidden width {self.d} must be a positive multiple of heads={self.heads}")
        if self.l1 < 1:
            raise ConfigError("l1 must be >= 1")
        if self.family in SINGLE_STAGE and self.l2 != 0:
            raise ConfigError(f"{self.family} is single-stage; l2 must be 0, got {self.l2}")
        if self.family not in SINGLE_STAGE and self.l2 < 1:
            raise ConfigError(f"{self.family} needs l2 >= 1, got {self.l2}")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if self.head == "regression" and self.n_targets < 1:
            raise ConfigError("regression head needs n_targets >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.vocab_size < 1 or self.rows < 1 or self.cols < 1:
            raise ConfigError("vocab_size, rows and cols must all be >= 1")
        if self.tabbie_pooling not in ("cls_grid", "mean"):
            raise ConfigError(f"unknown tabbie_pooling {self.tabbie_pooling!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.ffn_dim is not None and self.ffn_dim < 1:
            raise ConfigError("ffn_dim must be >= 1")
        if self.stage1_ffn_dim is not None and self.stage1_ffn_dim < 1:
            raise ConfigError("stage1_ffn_dim must be >= 1")

    @property
    def ffn(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 4 * self.d

    @property
    def stage1_ffn(self) -> int:
        return self.stage1_ffn_dim if self.stage1_ffn_dim is not None else self.ffn

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_json(self) -> dict:
        return {
            "family": self.family,
            "d": self.d,
            "heads": self.heads,
            "l1": self.l1,
            "l2": self.l2,
            "ffn_dim": self.ffn_dim,
            "stage1_ffn_dim": self.stage1_ffn_dim,
            "use_row_pos_emb": self.use_row_pos_emb,
            "use_col_index_emb": self.use_col_index_emb,
            "dropout": self.dropout,
            "vocab_size": self.vocab_size,
            "rows": self.rows,
            "cols": self.cols,
            "head": self.head,
            "n_targets": self.n_targets,
            "dtype": self.dtype,
            "tabbie_pooling": self.tabbie_pooling,
            "fieldy_split_token_emb": self.fieldy_split_token_emb,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


# ---------------------------------------------------------------------------
# attention-pair accounting


class AttentionLedger:
    """Counts query-key score computations per stage of the current forward."""

    def __init__(self):
        self.counts: dict[str, int] = {}

    def reset(self) -> None:
        self.counts.clear()

    def add(self, stage: str, n_pairs: int) -> None:
        self.counts[stage] = self.counts.get(stage, 0) + n_pairs

    def total(self) -> int:
        return sum(self.counts.values())

    def snapshot(self) -> dict[str, int]:
        return dict(self.counts)


def closed_form_attention_pairs(cfg: ModelConfig) -> dict[str, int]:
    """Predicted pair counts per stage for one forward over one CLS-free grid."""
    R, C, h = cfg.rows, cfg.cols, cfg.heads
    if cfg.family == "ft_flat":
        return {"stage1": cfg.l1 * h * (R * C) ** 2}
    if cfg.family == "tabbie":
        return {"stage1": cfg.l1 * h * (R * C * C + C * R * R)}
    if cfg.family == "tabbert_row":
        return {"stage1": cfg.l1 * h * R * C * C, "stage2": cfg.l2 * h * R * R}
    if cfg.family == "tabbert_col":
        return {"stage1": cfg.l1 * h * C * R * R, "stage2": cfg.l2 * h * C * C}
    return {  # fieldy
        "stage1": cfg.l1 * h * (R * C * C + C * R * R),
        "stage2": cfg.l2 * h * (R * C) ** 2,
    }


# ---------------------------------------------------------------------------
# building blocks


class Linear:
    def __init__(self, model: "Model", name: str, d_in: int, d_out: int):
        self.w = model._param(f"{name}.w", (d_in, d_out), "normal")
        self.b = model._param(f"{name}.b", (d_out,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.w) + self.b


class LayerNorm:
    def __init__(self, model: "Model", name: str, d: int):
        self.g = model._param(f"{name}.g", (d,), "ones")
        self.b = model._param(f"{name}.b", (d,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.g, self.b)


class MultiHeadSelfAttention:
    """Scaled dot-product attention over the second-to-last axis.

    Input (..., n, d): every leading axis is an independent batch of
    sequences, so one call covers e.g. all rows of all samples at once.
    Each call adds prod(leading) * heads * n^2 pairs to the ledger.
    """

    def __init__(self, model: "Model", name: str, d: int, heads: int):
        self.heads = heads
        self.wq = Linear(model, f"{name}.wq", d, d)
        self.wk = Linear(model, f"{name}.wk", d, d)
        self.wv = Linear(model, f"{name}.wv", d, d)
        self.wo = Linear(model, f"{name}.wo", d, d)

    def __call__(self, x: Tensor, ledger: AttentionLedger | None, stage: str) -> Tensor:
        *lead, n, d = x.shape
        h = self.heads
        dh = d // h
        k_lead = len(lead)

        def split_heads(t: Tensor) -> Tensor:
            t = reshape(t, (*lead, n, h, dh))
            return transpose(t, (*range(k_lead), k_lead + 1, k_lead, k_lead + 2))

        q = split_heads(self.wq(x))  # (..., h, n, dh)
        k = split_heads(self.wk(x))
        v = split_heads(self.wv(x))
        kt = transpose(k, (*range(k_lead), k_lead, k_lead + 2, k_lead + 1))
        scores = matmul(q, kt) * (1.0 / math.sqrt(dh))
        probs = softmax(scores, axis=-1)
        if ledger is not None:
            ledger.add(stage, int(np.prod(lead, dtype=np.int64)) * h * n * n)
        out = matmul(probs, v)  # (..., h, n, dh)
        out = transpose(out, (*range(k_lead), k_lead + 1, k_lead, k_lead + 2))
        out = reshape(out, (*lead, n, d))
        return self.wo(out)


class EncoderLayer:
    """Pre-norm block: x + drop(attn(ln(x))); x + drop(ffn(ln(x)))."""

    def __init__(self, model: "Model", name: str, d: int, ffn_dim: int, heads: int, p: float):
        self.p = p
        self.ln1 = LayerNorm(model, f"{name}.ln1", d)
        self.attn = MultiHeadSelfAttention(model, f"{name}.attn", d, heads)
        self.ln2 = LayerNorm(model, f"{name}.ln2", d)
        self.fc1 = Linear(model, f"{name}.fc1", d, ffn_dim)
        self.fc2 = Linear(model, f"{name}.fc2", ffn_dim, d)

    def __call__(self, x, ledger, stage, rng, training):
        a = self.attn(self.ln1(x), ledger, stage)
        x = x + dropout(a, self.p, rng, training)
        f = self.fc2(gelu(self.fc1(self.ln2(x))))
        return x + dropout(f, self.p, rng, training)


class EncoderStack:
    def __init__(self, model, name, n_layers, d, ffn_dim, heads, p):
        self.layers = [
            EncoderLayer(model, f"{name}.{i}", d, ffn_dim, heads, p)
            for i in range(n_layers)
        ]

    def __call__(self, x, ledger, stage, rng, training):
        for layer in self.layers:
            x = layer(x, ledger, stage, rng, training)
        return x


# ---------------------------------------------------------------------------
# the model


class Model:
    """One family instance; all parameters live in ``self.params`` exactly once."""

    def __init__(self, cfg: ModelConfig, rng: RngState):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.ledger = AttentionLedger()
        self._rng = rng
        d, V = cfg.d, cfg.vocab_size

        if cfg.family == "fieldy" and cfg.fieldy_split_token_emb:
            self.tok_emb = self._param("tok_emb_row", (V, d), "normal")
            self.tok_emb_col = self._param("tok_emb_col", (V, d), "normal")
        else:
            self.tok_emb = self._param("tok_emb", (V, d), "normal")
            self.tok_emb_col = None
        # position tables are zero-initialized: at init, enabling a flag
        # changes nothing, and any structural signal is learned
        self.row_pos = (
            self._param("row_pos", (cfg.rows + 1, d), "zeros")
            if cfg.use_row_pos_emb
            else None
        )
        self.col_idx = (
            self._param("col_idx", (cfg.cols + 1, d), "zeros")
            if cfg.use_col_index_emb
            else None
        )
        self.cls = self._param("cls", (d,), "normal") if self._needs_cls() else None

        f = cfg.ffn
        if cfg.family == "ft_flat":
            self.stack1 = EncoderStack(self, "encoder", cfg.l1, d, f, cfg.heads, cfg.dropout)
        elif cfg.family == "tabbie":
            self.row_layers = [
                EncoderLayer(self, f"row_encoder.{i}", d, f, cfg.heads, cfg.dropout)
                for i in range(cfg.l1)
            ]
            self.col_layers = [
                EncoderLayer(self, f"col_encoder.{i}", d, f, cfg.heads, cfg.dropout)
                for i in range(cfg.l1)
            ]
        elif cfg.family in ("tabbert_row", "tabbert_col"):
            self.stack1 = EncoderStack(self, "stage1", cfg.l1, d, f, cfg.heads, cfg.dropout)
            self.stack2 = EncoderStack(self, "stage2", cfg.l2, d, f, cfg.heads, cfg.dropout)
            if cfg.head == "masked_lm":
                width = cfg.cols if cfg.family == "tabbert_row" else cfg.rows
                self.expand = Linear(self, "expand", d, width * d)
        else:  # fieldy
            f1 = cfg.stage1_ffn
            self.row_stack = EncoderStack(self, "row_context", cfg.l1, d, f1, cfg.heads, cfg.dropout)
            self.col_stack = EncoderStack(self, "col_context", cfg.l1, d, f1, cfg.heads, cfg.dropout)
            self.fuse = Linear(self, "fuse", 2 * d, d)
            self.stack2 = EncoderStack(self, "stage2", cfg.l2, d, f, cfg.heads, cfg.dropout)

        if cfg.head == "masked_lm":
            self.lm_head = Linear(self, "lm_head", d, V)
        elif cfg.head == "regression":
            self.task_head = Linear(self, "head", d, cfg.n_targets)
        else:
            self.task_head = Linear(self, "head", d, 1)
        del self._rng  # construction-time only

    # -- registry ----------------------------------------------------------

    def _needs_cls(self) -> bool:
        if self.cfg.head == "masked_lm":
            return False
        if self.cfg.family == "tabbie" and self.cfg.tabbie_pooling == "mean":
            return False
        return True

    def _param(self, name: str, shape: tuple, init: str) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        dt = self.cfg.np_dtype
        if init == "zeros":
            data = np.zeros(shape, dtype=dt)
        elif init == "ones":
            data = np.ones(shape, dtype=dt)
        elif init == "normal":
            data = self._rng.truncated_normal(shape, 0.02).astype(dt)
        else:
            raise ConfigError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def count_params(self) -> int:
        return sum(int(np.prod(t.shape, dtype=np.int64)) for t in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(arrays))
        extra = sorted(set(arrays) - set(self.params))
        if missing or extra:
            raise ConfigError(
                f"parameter set mismatch: missing {missing or 'none'}, unexpected {extra or 'none'}"
            )
        for name, t in self.params.items():
            a = np.asarray(arrays[name])
            if a.shape != t.shape:
                raise ConfigError(f"shape mismatch for {name}: file {a.shape}, model {t.shape}")
            t.data = a.astype(self.cfg.np_dtype)

    # -- embeddings --------------------------------------------------------

    def _positions(self, which: str, idx: np.ndarray) -> Tensor | None:
        table = self.row_pos if which == "row" else self.col_idx
        if table is None:
            return None
        return take(table, idx)

    def embed_grid(self, ids: np.ndarray, apply_positions: bool = True, table: Tensor | None = None) -> Tensor:
        """Token embeddings for an (..., R, C) id grid, shape (..., R, C, d).

        Row-position and column-index embeddings are added where enabled;
        fieldy defers them until after its fusion FC (apply_positions=False).
        """
        ids = np.asarray(ids)
        R, C = self.cfg.rows, self.cfg.cols
        if ids.shape[-2:] != (R, C):
            raise ShapeError(f"expected a grid ending in ({R}, {C}), got {ids.shape}")
        x = take(table if table is not None else self.tok_emb, ids)
        if apply_positions:
            rp = self._positions("row", np.arange(R))
            if rp is not None:
                x = x + reshape(rp, (R, 1, self.cfg.d))
            cp = self._positions("col", np.arange(C))
            if cp is not None:
                x = x + cp
        return x

    def _cls_vector(self) -> Tensor:
        v = self.cls
        rp = self._positions("row", np.array(self.cfg.rows))
        if rp is not None:
            v = v + rp
        cp = self._positions("col", np.array(self.cfg.cols))
        if cp is not None:
            v = v + cp
        return v  # (d,)

    def _prepend_cls(self, x: Tensor) -> Tensor:
        B, n, d = x.shape
        c = broadcast_to(reshape(self._cls_vector(), (1, 1, d)), (B, 1, d))
        return concat([c, x], axis=1)

    # -- family trunks -----------------------------------------------------
    # each returns (field_states, cls_state); field_states is (B, R, C, d)
    # for grid families or the stage-2 vector sequence for tabbert;
    # cls_state is (B, d) or None when with_cls is off

    def _trunk_ft_flat(self, ids, with_cls, rng, training):
        B = ids.shape[0]
        R, C, d = self.cfg.rows, self.cfg.cols, self.cfg.d
        x = reshape(self.embed_grid(ids), (B, R * C, d))
        if with_cls:
            x = self._prepend_cls(x)
        x = self.stack1(x, self.ledger, "stage1", rng, training)
        if with_cls:
            return reshape(x[:, 1:, :], (B, R, C, d)), x[:, 0, :]
        return reshape(x, (B, R, C, d)), None

    def _trunk_tabbie(self, ids, with_cls, rng, training):
        B = ids.shape[0]
        R, C, d = self.cfg.rows, self.cfg.cols, self.cfg.d
        augmented = with_cls and self.cfg.tabbie_pooling == "cls_grid"
        x = self.embed_grid(ids)
        if augmented:
            x = self._tabbie_augment(x, B)
        for row_layer, col_layer in zip(self.row_layers, self.col_layers):
            r_out = row_layer(x, self.ledger, "stage1", rng, training)
            xt = transpose(x, (0, 2, 1, 3))
            c_out = col_layer(xt, self.ledger, "stage1", rng, training)
            x = (r_out + transpose(c_out, (0, 2, 1, 3))) * 0.5
        if augmented:
            fields = x[:, 1:, 1:, :]
            # pool over the R row-CLS and C column-CLS cells; the shared
            # corner cell participates in attention but not in the pool
            cls_states = concat([x[:, 1:, 0, :], x[:, 0, 1:, :]], axis=1)
            return fields, mean(cls_states, axis=1)
        if with_cls:  # "mean" pooling
            return x, mean(reshape(x, (B, R * C, d)), axis=1)
        return x, None

    def _tabbie_augment(self, x: Tensor, B: int) -> Tensor:
        """Border the (B,R,C,d) grid with CLS cells at row 0 / column 0."""
        R, C, d = self.cfg.rows, self.cfg.cols, self.cfg.d
        cls = self.cls
        rp_grid = self._positions("row", np.arange(R))  # (R, d) or None
        cp_grid = self._positions("col", np.arange(C))
        rp_cls = self._positions("row", np.array(R))  # (d,) or None
        cp_cls = self._positions("col", np.array(C))

        left = cls  # CLS cell of row i carries that row's position
        if rp_grid is not None:
            left = left + rp_grid
        if cp_cls is not None:
            left = left + cp_cls
        left = broadcast_to(reshape(left, (1, R, 1, d) if rp_grid is not None else (1, 1, 1, d)), (B, R, 1, d))

        top = cls  # CLS cell of column j carries that column's index
        if cp_grid is not None:
            top = top + cp_grid
        if rp_cls is not None:
            top = top + rp_cls
        top = broadcast_to(reshape(top, (1, 1, C, d) if cp_grid is not None else (1, 1, 1, d)), (B, 1, C, d))

        corner = cls
        if rp_cls is not None:
            corner = corner + rp_cls
        if cp_cls is not None:
            corner = corner + cp_cls
        corner = broadcast_to(reshape(corner, (1, 1, 1, d)), (B, 1, 1, d))

        body = concat([left, x], axis=2)  # (B, R, C+1, d)
        head_row = concat([corner, top], axis=2)  # (B, 1, C+1, d)
        return concat([head_row, body], axis=1)  # (B, R+1, C+1, d)

    def _trunk_tabbert(self, ids, with_cls, rng, training):
        B = ids.shape[0]
        R, C, d = self.cfg.rows, self.cfg.cols, self.cfg.d
        x = self.embed_grid(ids)
        if self.cfg.family == "tabbert_col":
            x = transpose(x, (0, 2, 1, 3))  # sequences along rows of the transpose
        x = self.stack1(x, self.ledger, "stage1", rng, training)
        vecs = mean(x, axis=2)  # (B, R, d) or (B, C, d): one vector per sequence
        if with_cls:
            v = self._prepend_cls(vecs)
            out = self.stack2(v, self.ledger, "stage2", rng, training)
            return out[:, 1:, :], out[:, 0, :]
        out = self.stack2(vecs, self.ledger, "stage2", rng, training)
        return out, None

    def stage1_vectors(self, ids: np.ndarray) -> np.ndarray:
        """Mean-pooled stage-1 vectors for tabbert families, (B, R|C, d)."""
        if self.cfg.family not in ("tabbert_row", "tabbert_col"):
            raise ConfigError(f"stage1_vectors is a tabbert hook, not {self.cfg.family}")
        ids = self._check_ids(ids)
        x = self.embed_grid(ids)
        if self.cfg.family == "tabbert_col":
            x = transpose(x, (0, 2, 1, 3))
        x = self.stack1(x, None, "stage1", None, False)
        return mean(x, axis=2).data

    def _trunk_fieldy(self, ids, with_cls, rng, training):
        B = ids.shape[0]
        R, C, d = self.cfg.rows, self.cfg.cols, self.cfg.d
        x_row = self.embed_grid(ids, apply_positions=False)
        x_col = (
            self.embed_grid(ids, apply_positions=False, table=self.tok_emb_col)
            if self.tok_emb_col is not None
            else x_row
        )
        r_ctx = self.row_stack(x_row, self.ledger, "stage1", rng, training)
        c_ctx = self.col_stack(
            transpose(x_col, (0, 2, 1, 3)), self.ledger, "stage1", rng, training
        )
        c_ctx = transpose(c_ctx, (0, 2, 1, 3))
        fused = gelu(self.fuse(concat([r_ctx, c_ctx], axis=-1)))
        rp = self._positions("row", np.arange(R))
        if rp is not None:
            fused = fused + reshape(rp, (R, 1, d))
        cp = self._positions("col", np.arange(C))
        if cp is not None:
            fused = fused + cp
        x = reshape(fused, (B, R * C, d))
        if with_cls:
            x = self._prepend_cls(x)
        x = self.stack2(x, self.ledger, "stage2", rng, training)
        if with_cls:
            return reshape(x[:, 1:, :], (B, R, C, d)), x[:, 0, :]
        return reshape(x, (B, R, C, d)), None

    # -- forward -----------------------------------------------------------

    def _check_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.ndim == 2:
            ids = ids[None]
        if ids.ndim != 3 or ids.shape[1:] != (self.cfg.rows, self.cfg.cols):
            raise ShapeError(
                f"expected ids of shape (B, {self.cfg.rows}, {self.cfg.cols}), got {ids.shape}"
            )
        return ids

    def _trunk(self, ids, with_cls, rng, training):
        fam = self.cfg.family
        if fam == "ft_flat":
            return self._trunk_ft_flat(ids, with_cls, rng, training)
        if fam == "tabbie":
            return self._trunk_tabbie(ids, with_cls, rng, training)
        if fam in ("tabbert_row", "tabbert_col"):
            return self._trunk_tabbert(ids, with_cls, rng, training)
        return self._trunk_fieldy(ids, with_cls, rng, training)

    def forward(self, ids: np.ndarray, training: bool = False, rng: RngState | None = None) -> Tensor:
        """Head output: (B,R,C,V) logits for masked_lm, (B,k) for regression,
        (B,) logits for binary."""
        ids = self._check_ids(ids)
        if training and self.cfg.dropout > 0.0 and rng is None:
            raise ConfigError("training forward with dropout > 0 needs an rng")
        self.ledger.reset()
        B = ids.shape[0]
        R, C, d = self.cfg.rows, self.cfg.cols, self.cfg.d
        fields, cls_state = self._trunk(ids, self.cfg.head != "masked_lm", rng, training)
        if self.cfg.head == "masked_lm":
            if self.cfg.family in ("tabbert_row", "tabbert_col"):
                expanded = self.expand(fields)  # (B, n_vec, width*d)
                if self.cfg.family == "tabbert_row":
                    grid = reshape(expanded, (B, R, C, d))
                else:
                    grid = transpose(reshape(expanded, (B, C, R, d)), (0, 2, 1, 3))
                return self.lm_head(grid)
            return self.lm_head(fields)
        if self.cfg.head == "regression":
            return self.task_head(cls_state)
        return reshape(self.task_head(cls_state), (B,))

    def cls_output(self, ids: np.ndarray) -> np.ndarray:
        """Pooled/CLS state feeding the task head, (B, d); fine-tune heads only."""
        if self.cfg.head == "masked_lm":
            raise ConfigError("cls_output is undefined for masked_lm models")
        ids = self._check_ids(ids)
        self.ledger.reset()
        _, cls_state = self._trunk(ids, True, None, False)
        return cls_state.data

    def attention_pair_report(self) -> dict:
        """Measured vs predicted pair counts for one CLS-free forward (B=1)."""
        ids = np.zeros((1, self.cfg.rows, self.cfg.cols), dtype=np.int64)
        self.ledger.reset()
        self._trunk(ids, False, None, False)
        measured = self.ledger.snapshot()
        predicted = closed_form_attention_pairs(self.cfg)
        return {
            "measured": measured,
            "closed_form": predicted,
            "match": measured == predicted,
        }


# ---------------------------------------------------------------------------
# analytic parameter counts and parity sizing


def _enc_layer_params(d: int, f: int) -> int:
    # 4 projections (d*d+d), two FFN linears, two layernorms
    return 4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * (2 * d)


def count_params(cfg: ModelConfig) -> int:
    """Closed-form total; must equal registry enumeration exactly."""
    d, V, R, C = cfg.d, cfg.vocab_size, cfg.rows, cfg.cols
    f, f1 = cfg.ffn, cfg.stage1_ffn
    n = V * d
    if cfg.family == "fieldy" and cfg.fieldy_split_token_emb:
        n += V * d
    if cfg.use_row_pos_emb:
        n += (R + 1) * d
    if cfg.use_col_index_emb:
        n += (C + 1) * d
    needs_cls = cfg.head != "masked_lm" and not (
        cfg.family == "tabbie" and cfg.tabbie_pooling == "mean"
    )
    if needs_cls:
        n += d
    if cfg.family == "ft_flat":
        n += cfg.l1 * _enc_layer_params(d, f)
    elif cfg.family == "tabbie":
        n += 2 * cfg.l1 * _enc_layer_params(d, f)
    elif cfg.family in ("tabbert_row", "tabbert_col"):
        n += (cfg.l1 + cfg.l2) * _enc_layer_params(d, f)
        if cfg.head == "masked_lm":
            width = C if cfg.family == "tabbert_row" else R
            n += d * (width * d) + width * d
    else:
        n += 2 * cfg.l1 * _enc_layer_params(d, f1)
        n += cfg.l2 * _enc_layer_params(d, f)
        n += (2 * d) * d + d
    if cfg.head == "masked_lm":
        n += d * V + V
    elif cfg.head == "regression":
        n += d * cfg.n_targets + cfg.n_targets
    else:
        n += d + 1
    return n


def _default_layer_plan(ref: ModelConfig) -> dict[str, tuple[int, int]]:
    total = ref.l1 + ref.l2
    return {
        "ft_flat": (total, 0),
        "tabbie": (max(1, round(total / 2)), 0),
        "tabbert_row": (ref.l1, max(1, ref.l2)),
        "tabbert_col": (ref.l1, max(1, ref.l2)),
        "fieldy": (max(1, math.ceil(ref.l1 / 2)), max(1, ref.l2)),
    }


@dataclass(frozen=True)
class ParityReport:
    reference_family: str
    reference_count: int
    configs: dict[str, ModelConfig]
    counts: dict[str, int]

    @property
    def max_rel_deviation(self) -> float:
        return max(
            abs(c - self.reference_count) / self.reference_count
            for c in self.counts.values()
        )


def match_param_counts(
    reference: ModelConfig,
    families: tuple[str, ...] = FAMILIES,
    tolerance: float = 0.02,
    layer_plan: dict[str, tuple[int, int]] | None = None,
) -> ParityReport:
    """Size every family to the reference's total parameter count.

    Layer counts come from ``layer_plan`` (or a heuristic split of the
    reference's layers); the FFN width is then the integer fine dial —
    layer granularity alone cannot land within 2% at realistic widths.
    For fieldy, the stage-1 (field-transformer) width is reduced first,
    keeping stage 2 at full width.
    """
    target = count_params(reference)
    plan = dict(_default_layer_plan(reference))
    if layer_plan:
        unknown = sorted(set(layer_plan) - set(FAMILIES))
        if unknown:
            raise ConfigError(f"layer_plan names unknown families: {unknown}")
        plan.update(layer_plan)
    configs: dict[str, ModelConfig] = {}
    counts: dict[str, int] = {}
    for fam in families:
        if fam == reference.family:
            configs[fam] = reference
            counts[fam] = target
            continue
        l1, l2 = plan[fam]
        base = replace(
            reference,
            family=fam,
            l1=l1,
            l2=l2,
            ffn_dim=None,
            stage1_ffn_dim=None,
        )
        cfg = _solve_ffn(base, target)
        got = count_params(cfg)
        if abs(got - target) / target > tolerance:
            raise ConfigError(
                f"cannot match {fam} to {target} params within {tolerance:.0%}: "
                f"nearest achievable is {got} "
                f"({abs(got - target) / target:.2%} off) with layers {l1}/{l2}"
            )
        configs[fam] = cfg
        counts[fam] = got
    return ParityReport(reference.family, target, configs, counts)


def _solve_ffn(base: ModelConfig, target: int) -> ModelConfig:
    d = base.d
    per_f = 2 * d + 1  # params added per unit of FFN width per layer

    def fit(cfg: ModelConfig, field_name: str, n_layers: int) -> ModelConfig:
        at_one = count_params(replace(cfg, **{field_name: 1}))
        f = round((target - at_one) / (n_layers * per_f)) + 1
        return replace(cfg, **{field_name: max(1, f)})

    if base.family == "fieldy":
        # shrink the dual stage-1 first; stage 2 keeps its default width
        cfg = replace(base, ffn_dim=4 * d)
        cfg = fit(cfg, "stage1_ffn_dim", 2 * base.l1)
        if cfg.stage1_ffn_dim == 1:
            cfg = fit(cfg, "ffn_dim", base.l2)
        return cfg
    if base.family == "tabbie":
        return fit(base, "ffn_dim", 2 * base.l1)
    return fit(base, "ffn_dim", base.l1 + base.l2)


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(path, arrays: dict[str, np.ndarray], metadata: dict) -> None:
    """magic 'TBFM', u16 version, u32+JSON metadata, then length-prefixed
    named entries of little-endian float32 in row-major order."""
    path = Path(path)
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode()
    chunks = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), struct.pack("<I", len(meta)), meta]
    chunks.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        if a.dtype != np.float32:
            raise ConfigError(
                f"checkpoint entries must be float32, got {a.dtype} for {name!r}"
            )
        name_b = name.encode()
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(a.astype("<f4").tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    offset = 0

    def read(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(buf):
            raise DataError(f"truncated checkpoint: {path}")
        out = buf[offset : offset + n]
        offset += n
        return out

    if read(4) != CKPT_MAGIC:
        raise DataError(f"not a checkpoint file (bad magic): {path}")
    (version,) = struct.unpack("<H", read(2))
    if version != CKPT_VERSION:
        raise DataError(f"unsupported checkpoint version {version} in {path}")
    (meta_len,) = struct.unpack("<I", read(4))
    metadata = json.loads(read(meta_len).decode())
    (n_entries,) = struct.unpack("<I", read(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        (name_len,) = struct.unpack("<H", read(2))
        name = read(name_len).decode()
        (ndim,) = struct.unpack("<B", read(1))
        shape = struct.unpack(f"<{ndim}I", read(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(read(4 * count), dtype="<f4").reshape(shape)
        arrays[name] = np.array(data)  # own the memory, native byte order
    if offset != len(buf):
        raise DataError(f"trailing bytes after last entry in {path}")
    return arrays, metadata


def load_trunk(model: Model, arrays: dict[str, np.ndarray]) -> list[str]:
    """Load pretrained weights into a fine-tune model, by name.

    Head-side parameters may legitimately differ between the two phases:
    the fine-tune model's cls/head are freshly initialized, and the
    pretraining lm_head/expand have no destination.  Anything else
    missing or mismatched is an error.  Returns the loaded names.
    """
    loaded = []
    missing_ok = ("cls", "head.")
    extra_ok = ("lm_head.", "expand.")
    for name, t in model.params.items():
        if name not in arrays:
            if name == "cls" or any(name.startswith(p) for p in missing_ok):
                continue
            raise ConfigError(f"checkpoint lacks trunk parameter {name!r}")
        a = np.asarray(arrays[name])
        if a.shape != t.shape:
            raise ConfigError(f"shape mismatch for {name}: file {a.shape}, model {t.shape}")
        t.data = a.astype(model.cfg.np_dtype)
        loaded.append(name)
    for name in arrays:
        if name not in model.params and not any(name.startswith(p) for p in extra_ok):
            raise ConfigError(f"checkpoint parameter {name!r} has no place in this model")
    return loaded
