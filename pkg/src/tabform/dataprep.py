"""Raw tables (CSV or synthetic) -> windowed, tokenizable samples on disk.

The pipeline: parse rows, derive calendar features from the timestamp,
optionally drop physically inconsistent pollution rows, cut each entity's
chronological row stream into fixed-length windows, split, fit quantile
binners and the target normalizer on the training split only, and write a
prepared-dataset directory (samples.jsonl + schema.json + vocab.json +
manifest.json) whose bytes are identical across reruns for a fixed seed.
"""
from __future__ import annotations

import bisect
import csv
import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from . import __version__, vocab as vocab_mod
from .errors import ConfigError, DataError, SchemaError
from .tensor import RngState

ROLES = ("entity", "timestamp", "categorical", "numerical", "target")
SPLITS = ("train", "val", "test")
NA = "[NA]"
WEEKDAY_NAMES = (
    "Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday",
)
TIME_FIELDS = ("hour", "day", "weekday", "month", "year")


# ---------------------------------------------------------------------------
# schema


@dataclass
class ColumnSpec:
    name: str
    role: str
    boundaries: list[float] | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise SchemaError(f"unknown column role {self.role!r} for {self.name!r}")
        if self.boundaries is not None:
            b = list(self.boundaries)
            if any(b[i] > b[i + 1] for i in range(len(b) - 1)):
                raise SchemaError(f"boundaries for {self.name!r} must be non-decreasing")


@dataclass
class TableSchema:
    """Ordered column list plus windowing and derivation settings."""

    columns: list[ColumnSpec]
    window_length: int = 10
    derived_time_fields: tuple = ()
    entity_as_feature: bool = False
    label_mode: str | None = None  # per_step | per_sequence | None

    def __post_init__(self):
        if self.window_length < 1:
            raise SchemaError("window_length must be >= 1")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names in schema")
        n_entity = sum(c.role == "entity" for c in self.columns)
        n_ts = sum(c.role == "timestamp" for c in self.columns)
        if n_entity != 1:
            raise SchemaError(f"schema needs exactly one entity column, found {n_entity}")
        if n_ts > 1:
            raise SchemaError("schema allows at most one timestamp column")
        unknown = set(self.derived_time_fields) - set(TIME_FIELDS)
        if unknown:
            raise SchemaError(f"unknown derived time fields: {sorted(unknown)}")
        if self.derived_time_fields and n_ts == 0:
            raise SchemaError("derived time fields require a timestamp column")
        if self.label_mode not in (None, "per_step", "per_sequence"):
            raise SchemaError(f"bad label_mode {self.label_mode!r}")

    def _one(self, role: str) -> ColumnSpec | None:
        for c in self.columns:
            if c.role == role:
                return c
        return None

    @property
    def entity_column(self) -> str:
        return self._one("entity").name

    @property
    def timestamp_column(self) -> str | None:
        c = self._one("timestamp")
        return c.name if c else None

    @property
    def target_columns(self) -> list[str]:
        return [c.name for c in self.columns if c.role == "target"]

    def grid_columns(self) -> list[ColumnSpec]:
        """Columns that form the token grid, in their final order.

        The entity feature (when enabled) comes first, then the derived
        calendar fields, then the raw categorical/numerical columns in
        schema order.  Targets never enter the grid.
        """
        cols: list[ColumnSpec] = []
        if self.entity_as_feature:
            cols.append(ColumnSpec(self.entity_column, "categorical"))
        for f in self.derived_time_fields:
            cols.append(ColumnSpec(f, "categorical"))
        for c in self.columns:
            if c.role in ("categorical", "numerical"):
                cols.append(c)
        return cols

    @property
    def n_grid_columns(self) -> int:
        return len(self.grid_columns())

    def to_json(self, normalizer: "TargetNormalizer | None" = None) -> dict:
        return {
            "columns": [
                {"name": c.name, "role": c.role, "boundaries": c.boundaries}
                for c in self.columns
            ],
            "window_length": self.window_length,
            "derived_time_fields": list(self.derived_time_fields),
            "entity_as_feature": self.entity_as_feature,
            "label_mode": self.label_mode,
            "normalizer": normalizer.to_json() if normalizer else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> tuple["TableSchema", "TargetNormalizer | None"]:
        schema = cls(
            columns=[
                ColumnSpec(c["name"], c["role"], c.get("boundaries"))
                for c in obj["columns"]
            ],
            window_length=obj["window_length"],
            derived_time_fields=tuple(obj["derived_time_fields"]),
            entity_as_feature=obj["entity_as_feature"],
            label_mode=obj.get("label_mode"),
        )
        norm = obj.get("normalizer")
        return schema, (TargetNormalizer.from_json(norm) if norm else None)


@dataclass
class Sample:
    """One R-row window: stringly field grid plus labels and split tag."""

    entity: str
    window_start: int
    fields: list[list[str]]
    labels: list | float | None = None
    split: str = ""


# ---------------------------------------------------------------------------
# quantile binning


def fit_quantile_binner(values, n_bins: int = 50) -> list[float]:
    """Boundaries at the interior empirical quantiles of ``values``.

    At most ``n_bins - 1`` boundaries; duplicates are collapsed and
    boundaries at or below the minimum are dropped since they separate
    nothing under the left-closed binning rule.
    """
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise DataError("cannot fit a binner on an empty value list")
    if np.isnan(vals).any():
        raise DataError("NaN encountered while fitting binner")
    if n_bins < 1:
        raise ConfigError(f"n_bins must be >= 1, got {n_bins}")
    qs = np.arange(1, n_bins) / n_bins
    raw = np.quantile(vals, qs) if qs.size else np.empty(0)
    lo = vals.min()
    out: list[float] = []
    for b in raw:
        fb = float(b)
        if fb <= lo:
            continue
        if out and fb == out[-1]:
            continue
        out.append(fb)
    return out


def bin_value(x: float, boundaries: list[float]) -> int:
    """Index of the half-open bin containing ``x``; monotone in ``x``."""
    if isinstance(x, float) and math.isnan(x):
        raise DataError("cannot bin NaN")
    return bisect.bisect_left(boundaries, x)


# ---------------------------------------------------------------------------
# timestamp expansion


def parse_timestamp(ts: str, row_index: int | None = None) -> datetime:
    try:
        return datetime.fromisoformat(ts.strip())
    except (ValueError, AttributeError):
        where = f" at row {row_index}" if row_index is not None else ""
        raise DataError(f"unparseable timestamp {ts!r}{where}") from None


def expand_timestamp(ts: str, recipe, row_index: int | None = None) -> dict[str, str]:
    """Derive the requested calendar fields from an ISO-8601 timestamp."""
    dt = parse_timestamp(ts, row_index)
    out = {}
    for f in recipe:
        if f == "hour":
            out[f] = str(dt.hour)
        elif f == "day":
            out[f] = str(dt.day)
        elif f == "month":
            out[f] = str(dt.month)
        elif f == "year":
            out[f] = str(dt.year)
        elif f == "weekday":
            out[f] = WEEKDAY_NAMES[dt.weekday()]
        else:
            raise ConfigError(f"unknown time field {f!r}")
    return out


# ---------------------------------------------------------------------------
# pollution outlier filter


def filter_pollution_outliers(
    rows: list[dict],
    pm25: str = "PM2.5",
    pm10: str = "PM10",
    remove_when: str = "pm25_gt_pm10",
) -> tuple[list[dict], float]:
    """Drop rows whose fine-particle reading exceeds the coarse one.

    The fine fraction is physically contained in the coarse fraction, so
    PM2.5 > PM10 marks a sensor inconsistency; ``remove_when`` can flip the
    direction.  Returns the kept rows and the removed fraction.
    """
    if remove_when not in ("pm25_gt_pm10", "pm10_gt_pm25"):
        raise ConfigError(f"bad outlier direction {remove_when!r}")
    if rows:
        missing = {pm25, pm10} - set(rows[0])
        if missing:
            raise SchemaError(f"outlier filter needs columns {sorted(missing)}")
    kept = []
    for row in rows:
        try:
            v25, v10 = float(row[pm25]), float(row[pm10])
        except (ValueError, TypeError):
            kept.append(row)
            continue
        bad = v25 > v10 if remove_when == "pm25_gt_pm10" else v10 > v25
        if not bad:
            kept.append(row)
    frac = 0.0 if not rows else (len(rows) - len(kept)) / len(rows)
    return kept, frac


# ---------------------------------------------------------------------------
# windowing and splits


def window_by_entity(
    rows: list[dict], schema: TableSchema, stride: int
) -> list[Sample]:
    """Cut each entity's chronological rows into length-R windows.

    Window starts advance by ``stride``; entities with fewer than R rows
    yield nothing.  Fields are the raw strings of the grid columns (the
    entity feature and calendar fields must already be present on the
    rows); labels are collected from the target columns according to the
    schema's label mode.  Output is ordered by (entity, window_start).
    """
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    R = schema.window_length
    ent_col = schema.entity_column
    ts_col = schema.timestamp_column
    grid_cols = [c.name for c in schema.grid_columns()]
    targets = schema.target_columns

    by_entity: dict[str, list[dict]] = {}
    for i, row in enumerate(rows):
        if ent_col not in row:
            raise SchemaError(f"row {i} missing entity column {ent_col!r}")
        by_entity.setdefault(str(row[ent_col]), []).append(row)

    samples: list[Sample] = []
    for entity in sorted(by_entity):
        ent_rows = by_entity[entity]
        if ts_col is not None:
            ent_rows = sorted(ent_rows, key=lambda r: parse_timestamp(r[ts_col]))
        for start in range(0, len(ent_rows) - R + 1, stride):
            window = ent_rows[start : start + R]
            fields = [[str(r.get(c, NA)) or NA for c in grid_cols] for r in window]
            labels: list | float | None = None
            if schema.label_mode == "per_step":
                labels = [[_to_float(r[t], t) for t in targets] for r in window]
            elif schema.label_mode == "per_sequence":
                labels = _to_float(window[-1][targets[0]], targets[0])
            samples.append(Sample(entity, start, fields, labels))
    return samples


def _to_float(v, col: str) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        raise DataError(f"non-numeric target value {v!r} in column {col!r}") from None


def split_samples(
    samples: list[Sample],
    fractions,
    mode: str,
    rng: RngState,
) -> list[Sample]:
    """Tag each sample train/val/test; deterministic under the rng seed.

    ``by_sample`` shuffles samples; ``by_entity`` shuffles entities and
    keeps every entity's windows in a single split.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ConfigError("fractions must be (train, val, test)")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {fractions}")
    if mode not in ("by_sample", "by_entity"):
        raise ConfigError(f"unknown split mode {mode!r}")

    if mode == "by_sample":
        order = rng.permutation(len(samples))
        sizes = _cut_sizes(len(samples), fractions)
        tags = _tags_from_sizes(sizes)
        out = [replace(s) for s in samples]
        for pos, idx in enumerate(order):
            out[idx].split = tags[pos]
        return out

    entities = sorted({s.entity for s in samples})
    n_nonzero = sum(f > 0 for f in fractions)
    if len(entities) < n_nonzero:
        raise ConfigError(
            f"by_entity split needs at least {n_nonzero} entities, have {len(entities)}"
        )
    order = rng.permutation(len(entities))
    sizes = _cut_sizes(len(entities), fractions)
    # every non-empty fraction must receive at least one entity
    for i, f in enumerate(fractions):
        while f > 0 and sizes[i] == 0:
            donor = int(np.argmax(sizes))
            sizes[donor] -= 1
            sizes[i] += 1
    tags = _tags_from_sizes(sizes)
    ent_split = {entities[idx]: tags[pos] for pos, idx in enumerate(order)}
    out = [replace(s, split=ent_split[s.entity]) for s in samples]
    return out


def _cut_sizes(n: int, fractions) -> list[int]:
    cuts = [int(math.floor(sum(fractions[: i + 1]) * n + 0.5)) for i in range(3)]
    cuts[-1] = n
    sizes = [cuts[0], cuts[1] - cuts[0], cuts[2] - cuts[1]]
    return sizes


def _tags_from_sizes(sizes) -> list[str]:
    tags = []
    for name, k in zip(SPLITS, sizes):
        tags.extend([name] * k)
    return tags


# ---------------------------------------------------------------------------
# target normalizer


@dataclass
class TargetNormalizer:
    """Per-target z-scoring with statistics from the training split."""

    mean: np.ndarray
    std: np.ndarray
    columns: list[str] = field(default_factory=list)

    def apply(self, labels: np.ndarray) -> np.ndarray:
        return (np.asarray(labels, dtype=np.float64) - self.mean) / self.std

    def invert(self, normalized: np.ndarray) -> np.ndarray:
        return np.asarray(normalized, dtype=np.float64) * self.std + self.mean

    def to_json(self) -> dict:
        return {
            "mean": [float(m) for m in self.mean],
            "std": [float(s) for s in self.std],
            "columns": list(self.columns),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TargetNormalizer":
        return cls(
            np.asarray(obj["mean"], dtype=np.float64),
            np.asarray(obj["std"], dtype=np.float64),
            list(obj["columns"]),
        )


def fit_target_normalizer(train_labels, columns=()) -> TargetNormalizer:
    """Fit per-target mean/std (population std) on training labels.

    ``train_labels`` is any array whose last axis indexes the targets.
    """
    arr = np.asarray(train_labels, dtype=np.float64)
    if arr.size == 0:
        raise DataError("cannot fit normalizer on empty labels")
    flat = arr.reshape(-1, arr.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    bad = np.nonzero(std == 0.0)[0]
    if bad.size:
        names = [columns[i] if i < len(columns) else str(i) for i in bad]
        raise ConfigError(f"zero-variance target(s): {names}")
    return TargetNormalizer(mean, std, list(columns))


# ---------------------------------------------------------------------------
# synthetic generators


@dataclass
class SyntheticConfig:
    task: str
    n_entities: int = 100
    rows_per_entity: int | None = None
    window_length: int = 10
    n_categorical: int = 3
    n_numerical: int = 1
    categorical_cardinality: int = 12
    start_hour: int | None = None

    def __post_init__(self):
        if self.task not in (
            "hour_probe",
            "cross_field_regression",
            "default_classification",
        ):
            raise ConfigError(f"unknown synthetic task {self.task!r}")
        if self.n_entities < 1 or self.window_length < 1:
            raise ConfigError("n_entities and window_length must be >= 1")
        if self.n_categorical < 0 or self.n_numerical < 0:
            raise ConfigError("column counts must be >= 0")
        if self.categorical_cardinality < 2:
            raise ConfigError("categorical_cardinality must be >= 2")
        if self.rows_per_entity is None:
            self.rows_per_entity = self.window_length
        if self.task in ("cross_field_regression", "default_classification"):
            if self.rows_per_entity % self.window_length != 0:
                raise ConfigError(
                    "rows_per_entity must be a multiple of window_length for "
                    f"{self.task}"
                )
        if self.start_hour is not None and not 0 <= self.start_hour < 24:
            raise ConfigError("start_hour must be in [0, 24)")


def cross_field_target(code_index: int, cardinality: int) -> float:
    """The declared regression target: an affine map of the signal code."""
    return 2.0 * code_index / (cardinality - 1) - 1.0


def generate_synthetic(cfg: SyntheticConfig, rng: RngState) -> tuple[list[dict], TableSchema]:
    """Emit raw rows plus schema for one of the three desk-scale tasks.

    hour_probe: an Hour column stepping +1 mod 24 down each entity, amid
    noise columns; no labels (masked pretraining fodder).

    cross_field_regression: the per-step target at window row t is a fixed
    function of the signal column at window row (t-1) mod R, i.e. a
    different row and a different column from the target's own position.
    Windows are taken at stride R so the wrap-around is well defined.

    default_classification: one binary label per entity (= per window, as
    each entity spans exactly whole windows), set by thresholding the mean
    signal-code index at the population median.
    """
    rows: list[dict] = []
    R = cfg.window_length
    K = cfg.categorical_cardinality
    cat_cols = [f"c{j}" for j in range(cfg.n_categorical)]
    num_cols = [f"x{j}" for j in range(cfg.n_numerical)]

    per_entity_codes: list[np.ndarray] = []
    for e in range(cfg.n_entities):
        per_entity_codes.append(rng.integers(0, K, (cfg.rows_per_entity,)))

    ent_means = [codes.mean() for codes in per_entity_codes]
    median_mean = float(np.median(ent_means)) if ent_means else 0.0

    for e in range(cfg.n_entities):
        entity = f"e{e:05d}"
        codes = per_entity_codes[e]
        start_hour = (
            cfg.start_hour
            if cfg.start_hour is not None
            else int(rng.integers(0, 24, ()))
        )
        label = int(ent_means[e] > median_mean)
        base = datetime(2024, 3, 1) + timedelta(days=e % 21)
        for t in range(cfg.rows_per_entity):
            ts = base + timedelta(hours=t)
            row: dict = {
                "entity": entity,
                "ts": ts.isoformat(),
            }
            if cfg.task == "hour_probe":
                row["Hour"] = str((start_hour + t) % 24)
            else:
                row["code"] = f"k{codes[t]}"
            for c in cat_cols:
                row[c] = f"v{int(rng.integers(0, K, ()))}"
            for c in num_cols:
                row[c] = f"{float(rng.normal(())):.4f}"
            if cfg.task == "cross_field_regression":
                src = codes[(t // R) * R + ((t % R) - 1) % R]
                row["y"] = f"{cross_field_target(int(src), K):.6f}"
            elif cfg.task == "default_classification":
                row["label"] = str(label)
            rows.append(row)

    columns = [ColumnSpec("entity", "entity"), ColumnSpec("ts", "timestamp")]
    label_mode = None
    if cfg.task == "hour_probe":
        columns.append(ColumnSpec("Hour", "categorical"))
    else:
        columns.append(ColumnSpec("code", "categorical"))
    columns += [ColumnSpec(c, "categorical") for c in cat_cols]
    columns += [ColumnSpec(c, "numerical") for c in num_cols]
    if cfg.task == "cross_field_regression":
        columns.append(ColumnSpec("y", "target"))
        label_mode = "per_step"
    elif cfg.task == "default_classification":
        columns.append(ColumnSpec("label", "target"))
        label_mode = "per_sequence"

    schema = TableSchema(
        columns=columns, window_length=R, label_mode=label_mode
    )
    return rows, schema


# ---------------------------------------------------------------------------
# CSV ingestion


def read_csv_rows(path: str | Path, schema: TableSchema) -> list[dict]:
    """Read a comma-separated UTF-8 table; header must cover the schema."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"raw data file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c.name for c in schema.columns if c.name not in header]
        if missing:
            raise SchemaError(
                f"CSV {path} header (line 1) missing schema columns: {missing}"
            )
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if None in row or any(v is None for v in row.values()):
                raise DataError(f"CSV {path} line {lineno}: field count mismatch")
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# dataset config and the prepare pipeline


RECIPES = (
    "csv",
    "pollution",
    "loan",
    "synthetic:hour_probe",
    "synthetic:cross_field_regression",
    "synthetic:default_classification",
)


@dataclass
class DatasetConfig:
    """Everything ``prepare_dataset`` needs; recipe fills role-specific defaults."""

    recipe: str
    csv_path: str | None = None
    columns: list[dict] | None = None
    window_length: int = 10
    stride: int | None = None
    n_bins: int = 50
    split_fractions: tuple = (0.6, 0.2, 0.2)
    split_mode: str | None = None
    derived_time_fields: tuple | None = None
    entity_as_feature: bool | None = None
    outlier_filter: str | None = None
    label_mode: str | None = None
    n_entities: int = 100
    rows_per_entity: int | None = None
    n_categorical: int = 3
    n_numerical: int = 1
    categorical_cardinality: int = 12
    start_hour: int | None = None

    def __post_init__(self):
        if self.recipe not in RECIPES:
            raise ConfigError(f"unknown recipe {self.recipe!r}; choose from {RECIPES}")
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        if self.recipe == "pollution":
            self._default("derived_time_fields", ("hour", "day", "weekday", "month", "year"))
            self._default("entity_as_feature", True)
            self._default("outlier_filter", "pm25_gt_pm10")
            self._default("label_mode", "per_step")
            self._default("split_mode", "by_sample")
            self._default("stride", self.window_length)
        elif self.recipe == "loan":
            self._default("derived_time_fields", ("day", "month", "year", "weekday"))
            self._default("entity_as_feature", False)
            self._default("label_mode", "per_sequence")
            self._default("split_mode", "by_entity")
            self._default("stride", 1)
        elif self.recipe == "csv":
            self._default("derived_time_fields", ())
            self._default("entity_as_feature", False)
            self._default("split_mode", "by_sample")
            self._default("stride", 1)
        else:  # synthetic
            self._default("derived_time_fields", ())
            self._default("entity_as_feature", False)
            self._default("split_mode", "by_entity")
            self._default("stride", self.window_length)
        if self.recipe.startswith("synthetic:"):
            self.synthetic = SyntheticConfig(
                task=self.recipe.split(":", 1)[1],
                n_entities=self.n_entities,
                rows_per_entity=self.rows_per_entity,
                window_length=self.window_length,
                n_categorical=self.n_categorical,
                n_numerical=self.n_numerical,
                categorical_cardinality=self.categorical_cardinality,
                start_hour=self.start_hour,
            )
        else:
            self.synthetic = None
            if self.csv_path is None:
                raise ConfigError(f"recipe {self.recipe!r} requires csv_path")
            if self.columns is None:
                raise ConfigError(f"recipe {self.recipe!r} requires a columns schema")

    def _default(self, name: str, value) -> None:
        if getattr(self, name) is None:
            setattr(self, name, value)

    def build_schema(self) -> TableSchema:
        cols = [ColumnSpec(c["name"], c["role"]) for c in self.columns or []]
        return TableSchema(
            columns=cols,
            window_length=self.window_length,
            derived_time_fields=tuple(self.derived_time_fields or ()),
            entity_as_feature=bool(self.entity_as_feature),
            label_mode=self.label_mode,
        )


def _expand_rows(rows: list[dict], schema: TableSchema) -> list[dict]:
    if not schema.derived_time_fields:
        return rows
    ts_col = schema.timestamp_column
    out = []
    for i, row in enumerate(rows):
        derived = expand_timestamp(row[ts_col], schema.derived_time_fields, row_index=i)
        merged = dict(row)
        merged.update(derived)
        out.append(merged)
    return out


def _apply_binning(samples: list[Sample], schema: TableSchema) -> None:
    grid = schema.grid_columns()
    num_idx = [
        (j, c) for j, c in enumerate(grid) if c.role == "numerical"
    ]
    for s in samples:
        for row in s.fields:
            for j, col in num_idx:
                raw = row[j]
                if raw == NA:
                    continue
                try:
                    x = float(raw)
                except ValueError:
                    raise DataError(
                        f"non-numeric value {raw!r} in numerical column {col.name!r}"
                    ) from None
                row[j] = str(bin_value(x, col.boundaries or []))


def _fit_binners(samples: list[Sample], schema: TableSchema, n_bins: int) -> None:
    grid = schema.grid_columns()
    for j, col in enumerate(grid):
        if col.role != "numerical":
            continue
        vals = []
        for s in samples:
            if s.split != "train":
                continue
            for row in s.fields:
                if row[j] != NA:
                    vals.append(float(row[j]))
        col.boundaries = fit_quantile_binner(vals, n_bins) if vals else []
        # grid_columns() re-creates specs for derived columns, but numerical
        # specs are shared with the schema, so the boundaries stick there too.


def prepare_dataset(cfg: DatasetConfig, seed: int, out_dir: str | Path) -> Path:
    """Run the full preparation pipeline and write the dataset directory.

    Windowing and binner fitting run sequentially here; outputs are ordered
    by (entity, window_start) so a parallel implementation would merge to
    the same bytes.
    """
    rng = RngState(seed)
    if cfg.synthetic is not None:
        rows, schema = generate_synthetic(cfg.synthetic, rng.child(0))
    else:
        schema = cfg.build_schema()
        rows = read_csv_rows(cfg.csv_path, schema)

    rows = _expand_rows(rows, schema)
    removed_fraction = 0.0
    if cfg.outlier_filter:
        rows, removed_fraction = filter_pollution_outliers(
            rows, remove_when=cfg.outlier_filter
        )

    stride = cfg.stride or schema.window_length
    samples = window_by_entity(rows, schema, stride)
    if not samples:
        raise DataError("preparation produced no windows; check window_length/stride")
    samples = split_samples(samples, cfg.split_fractions, cfg.split_mode, rng.child(1))
    samples.sort(key=lambda s: (s.entity, s.window_start))

    _fit_binners(samples, schema, cfg.n_bins)
    _apply_binning(samples, schema)

    normalizer = None
    if schema.label_mode == "per_step" and schema.target_columns:
        train_labels = [s.labels for s in samples if s.split == "train"]
        normalizer = fit_target_normalizer(
            np.asarray(train_labels, dtype=np.float64), schema.target_columns
        )

    vocab = vocab_mod.build_vocab(
        [s for s in samples if s.split == "train"], schema
    )

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "samples.jsonl", "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(_dumps({
                "entity": s.entity,
                "window_start": s.window_start,
                "fields": s.fields,
                "labels": s.labels,
                "split": s.split,
            }) + "\n")
    (out_dir / "schema.json").write_text(_dumps(schema.to_json(normalizer)) + "\n")
    (out_dir / "vocab.json").write_text(_dumps(vocab.to_json()) + "\n")
    counts = {name: sum(s.split == name for s in samples) for name in SPLITS}
    manifest = {
        "recipe": cfg.recipe,
        "seed": seed,
        "stride": stride,
        "n_bins": cfg.n_bins,
        "split_fractions": list(cfg.split_fractions),
        "split_mode": cfg.split_mode,
        "counts": counts,
        "outlier_removed_fraction": removed_fraction,
        "grid_shape": [schema.window_length, schema.n_grid_columns],
        "tool_version": __version__,
    }
    (out_dir / "manifest.json").write_text(_dumps(manifest) + "\n")
    return out_dir


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# loading prepared datasets


class PreparedDataset:
    """A prepared-dataset directory loaded back into memory."""

    def __init__(self, schema, samples, vocab, normalizer, manifest):
        self.schema = schema
        self.samples = samples
        self.vocab = vocab
        self.normalizer = normalizer
        self.manifest = manifest

    @classmethod
    def load(cls, path: str | Path) -> "PreparedDataset":
        path = Path(path)
        for fname in ("samples.jsonl", "schema.json", "vocab.json", "manifest.json"):
            if not (path / fname).exists():
                raise DataError(f"prepared dataset missing {fname} in {path}")
        schema, normalizer = TableSchema.from_json(
            json.loads((path / "schema.json").read_text())
        )
        vocab = vocab_mod.Vocabulary.from_json(
            json.loads((path / "vocab.json").read_text())
        )
        samples = []
        with open(path / "samples.jsonl", encoding="utf-8") as fh:
            for line in fh:
                obj = json.loads(line)
                samples.append(
                    Sample(
                        obj["entity"],
                        obj["window_start"],
                        obj["fields"],
                        obj["labels"],
                        obj["split"],
                    )
                )
        manifest = json.loads((path / "manifest.json").read_text())
        return cls(schema, samples, vocab, normalizer, manifest)

    def split(self, name: str) -> list[Sample]:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}; choose from {SPLITS}")
        return [s for s in self.samples if s.split == name]

    def grids(self, name: str):
        """Encode a split: (ids (N,R,C) int64, labels array or None, entities)."""
        part = self.split(name)
        ids = np.stack(
            [self.vocab.encode_grid(s.fields) for s in part]
        ) if part else np.zeros((0, self.schema.window_length, self.schema.n_grid_columns), dtype=np.int64)
        labels = None
        if part and part[0].labels is not None:
            labels = np.asarray([s.labels for s in part], dtype=np.float64)
        return ids, labels, [s.entity for s in part]
