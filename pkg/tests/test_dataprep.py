"""Tests for preprocessing: binning, calendar expansion, windows, splits."""
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tabform import dataprep as dp
from tabform.dataprep import (
    ColumnSpec,
    DatasetConfig,
    Sample,
    SyntheticConfig,
    TableSchema,
    bin_value,
    cross_field_target,
    expand_timestamp,
    filter_pollution_outliers,
    fit_quantile_binner,
    fit_target_normalizer,
    generate_synthetic,
    prepare_dataset,
    split_samples,
    window_by_entity,
)
from tabform.errors import ConfigError, DataError, SchemaError
from tabform.tensor import RngState


# ---------------------------------------------------------------------------
# quantile binning


def test_binner_constant_column_degenerate():
    b = fit_quantile_binner([7.0] * 200, n_bins=50)
    assert b == []
    assert bin_value(7.0, b) == 0


def _quantile_oracle(sorted_vals, q):
    # independent linear-interpolation quantile on a pre-sorted list
    pos = q * (len(sorted_vals) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(sorted_vals) - 1)
    return sorted_vals[lo] + (pos - lo) * (sorted_vals[hi] - sorted_vals[lo])


def test_binner_uniform_0_999_query_500():
    vals = list(range(1000))
    b = fit_quantile_binner(vals, n_bins=50)
    # oracle: count interior 1/50-quantiles at or below 500
    sv = sorted(float(v) for v in vals)
    expect = sum(_quantile_oracle(sv, i / 50) < 500 for i in range(1, 50))
    assert expect == 25
    assert bin_value(500, b) == 25


def test_binner_median_split():
    b = fit_quantile_binner([1, 2, 3, 4], n_bins=2)
    # oracle: the single boundary is the median
    assert b == [_quantile_oracle([1.0, 2.0, 3.0, 4.0], 0.5)]
    assert bin_value(1, b) == 0
    assert bin_value(4, b) == 1


def test_binner_at_most_nbins_minus_1_boundaries():
    vals = RngState(0).normal((500,)).tolist()
    assert len(fit_quantile_binner(vals, n_bins=50)) <= 49


def test_binner_empty_input_errors():
    with pytest.raises(DataError):
        fit_quantile_binner([], n_bins=10)


def test_binner_nan_errors():
    with pytest.raises(DataError):
        fit_quantile_binner([1.0, float("nan")], n_bins=4)
    with pytest.raises(DataError):
        bin_value(float("nan"), [0.0])


def test_bin_value_edges():
    b = [0.0, 1.0, 2.0]
    assert bin_value(-5.0, b) == 0
    assert bin_value(99.0, b) == 3


@settings(max_examples=60)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=60), st.floats(-1e6, 1e6))
def test_bin_value_matches_linear_scan(bounds, x):
    b = sorted(bounds)
    # oracle: first index whose boundary is >= x, by linear scan
    expect = 0
    for v in b:
        if v < x:
            expect += 1
        else:
            break
    assert bin_value(x, b) == expect


@settings(max_examples=40)
@given(
    st.lists(st.floats(-100, 100), min_size=2, max_size=80),
    st.integers(2, 20),
    st.floats(-120, 120),
    st.floats(0, 50),
)
def test_binning_monotone(vals, n_bins, x, delta):
    b = fit_quantile_binner(vals, n_bins)
    assert bin_value(x, b) <= bin_value(x + delta, b)


# ---------------------------------------------------------------------------
# timestamp expansion


def test_expand_timestamp_full_recipe():
    out = expand_timestamp(
        "2024-06-01T13:00:00", ("hour", "day", "weekday", "month", "year")
    )
    assert out == {
        "hour": "13",
        "day": "1",
        "weekday": "Saturday",
        "month": "6",
        "year": "2024",
    }


def test_expand_timestamp_loan_recipe_date_only():
    out = expand_timestamp("2023-12-28", ("day", "month", "year", "weekday"))
    assert out["day"] == "28" and out["month"] == "12" and out["year"] == "2023"
    assert out["weekday"] == "Thursday"


def test_expand_timestamp_midnight():
    assert expand_timestamp("2020-01-01T00:00:00", ("hour",)) == {"hour": "0"}


def test_expand_timestamp_unparseable():
    with pytest.raises(DataError, match="row 17"):
        expand_timestamp("not-a-date", ("hour",), row_index=17)


# ---------------------------------------------------------------------------
# outlier filter


def test_outlier_filter_directions():
    rows = [
        {"PM2.5": "60", "PM10": "50", "k": "a"},
        {"PM2.5": "38", "PM10": "80", "k": "b"},
    ]
    kept, frac = filter_pollution_outliers(rows)
    assert [r["k"] for r in kept] == ["b"]
    assert frac == 0.5
    kept2, _ = filter_pollution_outliers(rows, remove_when="pm10_gt_pm25")
    assert [r["k"] for r in kept2] == ["a"]


def test_outlier_filter_empty_and_missing_columns():
    assert filter_pollution_outliers([]) == ([], 0.0)
    with pytest.raises(SchemaError):
        filter_pollution_outliers([{"PM2.5": "1"}])


def test_outlier_filter_bad_direction():
    with pytest.raises(ConfigError):
        filter_pollution_outliers([], remove_when="sideways")


# ---------------------------------------------------------------------------
# windowing


def _mini_schema(R=10, label_mode=None, targets=()):
    cols = [
        ColumnSpec("entity", "entity"),
        ColumnSpec("ts", "timestamp"),
        ColumnSpec("a", "categorical"),
        ColumnSpec("x", "numerical"),
    ] + [ColumnSpec(t, "target") for t in targets]
    return TableSchema(cols, window_length=R, label_mode=label_mode)


def _rows(entity, n, start=0):
    return [
        {
            "entity": entity,
            "ts": f"2024-01-01T{(start + i) % 24:02d}:00:00",
            "a": f"a{i % 3}",
            "x": str(float(i)),
        }
        for i in range(n)
    ]


def test_window_counts():
    schema = _mini_schema()
    assert len(window_by_entity(_rows("e", 12), schema, stride=1)) == 3
    assert len(window_by_entity(_rows("e", 9), schema, stride=1)) == 0
    assert len(window_by_entity(_rows("e", 30), schema, stride=10)) == 3


def test_window_sorts_by_timestamp():
    schema = _mini_schema(R=3)
    rows = _rows("e", 3)
    shuffled = [rows[2], rows[0], rows[1]]
    (w,) = window_by_entity(shuffled, schema, stride=3)
    assert [r[1] for r in w.fields] == ["0.0", "1.0", "2.0"]


def test_window_never_spans_entities():
    schema = _mini_schema(R=5)
    rows = _rows("e1", 7) + _rows("e2", 7)
    out = window_by_entity(rows, schema, stride=1)
    assert len(out) == 6
    assert {w.entity for w in out} == {"e1", "e2"}
    keys = [(w.entity, w.window_start) for w in out]
    assert keys == sorted(keys)


def test_window_collects_per_step_labels():
    schema = _mini_schema(R=2, label_mode="per_step", targets=("y",))
    rows = _rows("e", 2)
    for i, r in enumerate(rows):
        r["y"] = str(10.0 + i)
    (w,) = window_by_entity(rows, schema, stride=2)
    assert w.labels == [[10.0], [11.0]]


def test_window_missing_value_becomes_na():
    schema = _mini_schema(R=1)
    rows = _rows("e", 1)
    rows[0]["a"] = ""
    (w,) = window_by_entity(rows, schema, stride=1)
    assert w.fields[0][0] == dp.NA


def test_window_bad_stride():
    with pytest.raises(ConfigError):
        window_by_entity(_rows("e", 5), _mini_schema(R=2), stride=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(0, 30), st.integers(1, 5))
def test_window_invariants(n_entities, extra_rows, stride):
    R = 4
    schema = _mini_schema(R=R)
    rows = []
    for e in range(n_entities):
        rows += _rows(f"e{e}", R + extra_rows)
    out = window_by_entity(rows, schema, stride=stride)
    per_entity = (R + extra_rows - R) // stride + 1
    assert len(out) == n_entities * per_entity
    for w in out:
        assert len(w.fields) == R


# ---------------------------------------------------------------------------
# splits


def _samples(n, n_entities=None):
    n_entities = n_entities or n
    return [
        Sample(f"e{i % n_entities}", i, [["a", "0"]]) for i in range(n)
    ]


def test_split_by_sample_sizes():
    out = split_samples(_samples(100), (0.6, 0.2, 0.2), "by_sample", RngState(0))
    counts = {t: sum(s.split == t for s in out) for t in ("train", "val", "test")}
    assert counts == {"train": 60, "val": 20, "test": 20}


def test_split_by_entity_sizes():
    out = split_samples(
        _samples(40, n_entities=10), (0.8, 0.2, 0.0), "by_entity", RngState(1)
    )
    ents = {t: {s.entity for s in out if s.split == t} for t in ("train", "val", "test")}
    assert len(ents["train"]) == 8 and len(ents["val"]) == 2 and len(ents["test"]) == 0


def test_split_deterministic():
    a = split_samples(_samples(50), (0.5, 0.25, 0.25), "by_sample", RngState(7))
    b = split_samples(_samples(50), (0.5, 0.25, 0.25), "by_sample", RngState(7))
    assert [s.split for s in a] == [s.split for s in b]


def test_split_by_entity_too_few_entities():
    with pytest.raises(ConfigError):
        split_samples(_samples(4, n_entities=2), (0.6, 0.2, 0.2), "by_entity", RngState(0))


def test_split_fraction_validation():
    with pytest.raises(ConfigError):
        split_samples(_samples(10), (0.5, 0.2, 0.2), "by_sample", RngState(0))
    with pytest.raises(ConfigError):
        split_samples(_samples(10), (0.6, 0.2, 0.2), "by_magic", RngState(0))


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 40), st.integers(1, 999))
def test_split_by_entity_disjoint(n_entities, seed):
    out = split_samples(
        _samples(n_entities * 3, n_entities=n_entities),
        (0.6, 0.2, 0.2),
        "by_entity",
        RngState(seed),
    )
    ents = {t: {s.entity for s in out if s.split == t} for t in ("train", "val", "test")}
    assert not (ents["train"] & ents["val"])
    assert not (ents["train"] & ents["test"])
    assert not (ents["val"] & ents["test"])
    assert all(len(ents[t]) >= 1 for t in ents)


# ---------------------------------------------------------------------------
# normalizer


def test_normalizer_two_point():
    norm = fit_target_normalizer(np.array([[1.0], [3.0]]), ["y"])
    np.testing.assert_allclose(norm.apply(np.array([[1.0], [3.0]])), [[-1.0], [1.0]])


@settings(max_examples=30)
@given(st.lists(st.floats(-1e4, 1e4), min_size=2, max_size=50))
def test_normalizer_roundtrip(vals):
    arr = np.asarray(vals)[:, None]
    if arr.std() == 0:
        return
    norm = fit_target_normalizer(arr, ["y"])
    back = norm.invert(norm.apply(arr))
    assert np.abs(back - arr).max() < 1e-9 * max(1.0, np.abs(arr).max())


def test_normalizer_train_stats_applied_to_val():
    norm = fit_target_normalizer(np.array([[0.0], [2.0]]), ["y"])
    val = norm.apply(np.array([[5.0], [7.0]]))
    assert abs(val.mean()) > 1.0  # val mean is not re-centered


def test_normalizer_zero_variance_errors():
    with pytest.raises(ConfigError, match="y2"):
        fit_target_normalizer(np.array([[1.0, 5.0], [2.0, 5.0]]), ["y1", "y2"])


# ---------------------------------------------------------------------------
# synthetic generators


def test_hour_probe_start_5():
    cfg = SyntheticConfig("hour_probe", n_entities=1, rows_per_entity=10, start_hour=5)
    rows, schema = generate_synthetic(cfg, RngState(0))
    assert [r["Hour"] for r in rows] == [str(h) for h in range(5, 15)]
    assert schema.window_length == 10


def test_hour_probe_wraps_mod_24():
    cfg = SyntheticConfig("hour_probe", n_entities=1, rows_per_entity=30, start_hour=20)
    rows, _ = generate_synthetic(cfg, RngState(0))
    hours = [int(r["Hour"]) for r in rows]
    for a, b in zip(hours, hours[1:]):
        assert b == (a + 1) % 24


def test_hour_sequence_survives_timestamp_sort():
    # timestamps must be strictly increasing per entity, or the windowing
    # sort would scramble the +1 hour sequence
    cfg = SyntheticConfig("hour_probe", n_entities=40, rows_per_entity=50)
    rows, schema = generate_synthetic(cfg, RngState(11))
    out = window_by_entity(rows, schema, stride=schema.window_length)
    hour_idx = [c.name for c in schema.grid_columns()].index("Hour")
    for w in out:
        hours = [int(r[hour_idx]) for r in w.fields]
        for a, b in zip(hours, hours[1:]):
            assert b == (a + 1) % 24


def test_synthetic_deterministic():
    cfg = SyntheticConfig("hour_probe", n_entities=5, rows_per_entity=12)
    a, _ = generate_synthetic(cfg, RngState(9))
    b, _ = generate_synthetic(cfg, RngState(9))
    assert a == b


def test_cross_field_target_recomputation():
    cfg = SyntheticConfig(
        "cross_field_regression", n_entities=4, rows_per_entity=20, window_length=10
    )
    rows, schema = generate_synthetic(cfg, RngState(3))
    K = cfg.categorical_cardinality
    by_entity = {}
    for r in rows:
        by_entity.setdefault(r["entity"], []).append(r)
    for ent_rows in by_entity.values():
        R = schema.window_length
        for w0 in range(0, len(ent_rows), R):
            window = ent_rows[w0 : w0 + R]
            for t in range(R):
                src = window[(t - 1) % R]["code"]
                expect = cross_field_target(int(src[1:]), K)
                assert abs(float(window[t]["y"]) - expect) < 1e-6


def test_default_classification_label_rule():
    cfg = SyntheticConfig("default_classification", n_entities=30, rows_per_entity=10)
    rows, schema = generate_synthetic(cfg, RngState(5))
    assert schema.label_mode == "per_sequence"
    by_entity = {}
    for r in rows:
        by_entity.setdefault(r["entity"], []).append(r)
    means = {e: np.mean([int(r["code"][1:]) for r in rs]) for e, rs in by_entity.items()}
    med = float(np.median(list(means.values())))
    labels = {e: int(rs[0]["label"]) for e, rs in by_entity.items()}
    for e in by_entity:
        assert labels[e] == int(means[e] > med)
    assert 0 < sum(labels.values()) < len(labels)


def test_synthetic_config_validation():
    with pytest.raises(ConfigError):
        SyntheticConfig("nope")
    with pytest.raises(ConfigError):
        SyntheticConfig("cross_field_regression", rows_per_entity=15, window_length=10)
    with pytest.raises(ConfigError):
        SyntheticConfig("hour_probe", start_hour=25)


# ---------------------------------------------------------------------------
# schema validation


def test_schema_requires_single_entity():
    with pytest.raises(SchemaError):
        TableSchema([ColumnSpec("a", "categorical")])
    with pytest.raises(SchemaError):
        TableSchema([ColumnSpec("e1", "entity"), ColumnSpec("e2", "entity")])


def test_schema_grid_column_order():
    schema = TableSchema(
        [
            ColumnSpec("site", "entity"),
            ColumnSpec("ts", "timestamp"),
            ColumnSpec("wd", "categorical"),
            ColumnSpec("temp", "numerical"),
            ColumnSpec("PM2.5", "target"),
        ],
        derived_time_fields=("hour", "day"),
        entity_as_feature=True,
    )
    assert [c.name for c in schema.grid_columns()] == ["site", "hour", "day", "wd", "temp"]
    assert schema.n_grid_columns == 5


def test_schema_rejects_nondecreasing_violation():
    with pytest.raises(SchemaError):
        ColumnSpec("x", "numerical", boundaries=[2.0, 1.0])


# ---------------------------------------------------------------------------
# end-to-end prepare (synthetic)


def test_prepare_dataset_writes_deterministic_dir(tmp_path):
    cfg = DatasetConfig(
        recipe="synthetic:hour_probe",
        n_entities=30,
        rows_per_entity=10,
        n_categorical=2,
        n_numerical=1,
    )
    d1 = prepare_dataset(cfg, seed=0, out_dir=tmp_path / "a")
    d2 = prepare_dataset(cfg, seed=0, out_dir=tmp_path / "b")
    for f in ("samples.jsonl", "schema.json", "vocab.json", "manifest.json"):
        assert (d1 / f).read_bytes() == (d2 / f).read_bytes()
    manifest = json.loads((d1 / "manifest.json").read_text())
    assert sum(manifest["counts"].values()) == 30
    assert manifest["grid_shape"] == [10, 4]  # Hour + 2 cat + 1 num


def test_prepare_csv_roundtrip(tmp_path):
    csv_path = tmp_path / "raw.csv"
    lines = ["station,ts,wd,temp,PM2.5,PM10"]
    for e in range(3):
        for i in range(20):
            pm25 = 10.0 + i
            pm10 = pm25 + (5.0 if i != 7 else -3.0)  # row 7 inconsistent
            lines.append(
                f"s{e},2024-02-0{1 + i // 24}T{i % 24:02d}:00:00,"
                f"d{i % 4},{15.0 + e + i / 7:.3f},{pm25},{pm10}"
            )
    csv_path.write_text("\n".join(lines) + "\n")
    cfg = DatasetConfig(
        recipe="pollution",
        csv_path=str(csv_path),
        columns=[
            {"name": "station", "role": "entity"},
            {"name": "ts", "role": "timestamp"},
            {"name": "wd", "role": "categorical"},
            {"name": "temp", "role": "numerical"},
            {"name": "PM2.5", "role": "target"},
            {"name": "PM10", "role": "target"},
        ],
        window_length=5,
        stride=5,
        n_bins=4,
        split_fractions=(0.6, 0.2, 0.2),
    )
    out = prepare_dataset(cfg, seed=1, out_dir=tmp_path / "prep")
    ds = dp.PreparedDataset.load(out)
    # 19 rows per entity after outlier removal -> 3 windows each
    assert len(ds.samples) == 9
    # grid columns: station, hour, day, weekday, month, year, wd, temp
    assert ds.schema.n_grid_columns == 8
    manifest = ds.manifest
    assert 0.0 < manifest["outlier_removed_fraction"] < 0.1
    ids, labels, ents = ds.grids("train")
    assert ids.shape[1:] == (5, 8)
    assert labels.shape[1:] == (5, 2)
    assert ds.normalizer is not None
    # binned numeric cells are small bin indices, not raw floats
    temp_idx = [c.name for c in ds.schema.grid_columns()].index("temp")
    for s in ds.samples:
        for row in s.fields:
            assert int(row[temp_idx]) <= 4


def test_prepare_missing_csv(tmp_path):
    cfg = DatasetConfig(
        recipe="csv",
        csv_path=str(tmp_path / "absent.csv"),
        columns=[
            {"name": "entity", "role": "entity"},
            {"name": "ts", "role": "timestamp"},
            {"name": "a", "role": "categorical"},
        ],
    )
    with pytest.raises(DataError, match="absent.csv"):
        prepare_dataset(cfg, seed=0, out_dir=tmp_path / "out")


def test_read_csv_header_mismatch(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("foo,bar\n1,2\n")
    schema = _mini_schema(R=1)
    with pytest.raises(SchemaError, match="entity"):
        dp.read_csv_rows(p, schema)


def test_dataset_config_unknown_recipe():
    with pytest.raises(ConfigError):
        DatasetConfig(recipe="mystery")
