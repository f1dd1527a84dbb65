"""Acceptance gate: ten numbered end-to-end checks, one test per criterion.

Each test prints a single ``[criterion N] PASS/FAIL`` line (visible with
``pytest -s`` or in the captured output of a failure).  Criteria 6-8 train
tiny models and dominate the runtime; everything else finishes in seconds.
Nothing here is mocked: the training criteria run the same drivers as the
scripts in ``scripts/``.
"""
import json
import time
from contextlib import contextmanager

import numpy as np
import pytest

from tabform.arch import (
    FAMILIES,
    Model,
    ModelConfig,
    closed_form_attention_pairs,
    match_param_counts,
)
from tabform.errors import MetricError
from tabform.evaluate import average_precision, rmse_avg
from tabform.experiments import (
    cross_field_experiment,
    overfit_smoke,
    probe_experiment,
    tiny_model_config,
)
from tabform.tensor import (
    RngState,
    Tensor,
    cross_entropy,
    gelu,
    layer_norm,
    matmul,
    reshape,
    softmax,
    take,
    tsum,
)
from tabform.train import (
    A_KEEP,
    A_MASK,
    A_RANDOM,
    ACTION_SPLIT,
    SELECT_P,
    apply_masking,
    sample_masking_plan,
)
from tabform.vocab import MASK, Vocabulary
from tabform.cli import main as cli_main
from gradcheck import finite_difference_grad, relative_error
from modeltools import randomize_params


@contextmanager
def criterion(n, label):
    try:
        yield
    except BaseException:
        print(f"[criterion {n:2d}] FAIL — {label}", flush=True)
        raise
    print(f"[criterion {n:2d}] PASS — {label}", flush=True)


# ---------------------------------------------------------------------------
# 1. gradient correctness


def _tiny_cfg(family, **kw):
    base = dict(
        family=family, d=8, heads=2, l1=1,
        l2=0 if family in ("ft_flat", "tabbie") else 1,
        vocab_size=24, rows=3, cols=4, head="masked_lm", dtype="float64",
    )
    base.update(kw)
    return ModelConfig(**base)


def _lm_loss(m, ids, positions, targets):
    logits = m.forward(ids)
    B, R, C, V = logits.shape
    return cross_entropy(take(reshape(logits, (B * R * C, V)), positions), targets)


def test_criterion_01_gradients_match_finite_differences():
    with criterion(1, "gradients vs central differences: families < 1e-3, ops < 1e-6"):
        t0 = time.monotonic()
        rng = RngState(5)

        # elementary ops at the strict tolerance; the weighting vector keeps
        # softmax/layer_norm losses sensitive to more than the invariant sum
        weights = np.arange(6.0)
        cases = {
            "gelu": ([rng.normal((4, 6))], lambda ts: tsum(gelu(ts[0]))),
            "softmax": ([rng.normal((4, 6))], lambda ts: tsum(softmax(ts[0]) * weights)),
            "matmul": ([rng.normal((4, 6)), rng.normal((6, 3))],
                       lambda ts: tsum(matmul(ts[0], ts[1]))),
            "layer_norm": ([rng.normal((4, 6)), 1.0 + 0.1 * rng.normal((6,)),
                            0.1 * rng.normal((6,))],
                           lambda ts: tsum(layer_norm(ts[0], ts[1], ts[2]) * weights)),
        }
        for name, (arrays, make_loss) in cases.items():
            ts = [Tensor(a, requires_grad=True) for a in arrays]
            make_loss(ts).backward()
            fd = finite_difference_grad(
                lambda ts=ts, make_loss=make_loss: float(make_loss(ts).data),
                [t.data for t in ts],
            )
            for t, f_ in zip(ts, fd):
                assert relative_error(t.grad, f_) < 1e-6, name

        # every family's full training loss at generic weights
        positions = np.array([0, 5, 7, 11])
        targets = np.array([4, 9, 15, 21])
        for family in FAMILIES:
            m = Model(_tiny_cfg(family), RngState(11))
            randomize_params(m, seed=30)
            ids = RngState(1).integers(4, 24, (1, 3, 4))
            names = sorted(m.params)
            arrays = [m.params[n].data for n in names]
            loss = _lm_loss(m, ids, positions, targets)
            loss.backward()
            grads = [np.zeros_like(a) if m.params[n].grad is None else m.params[n].grad
                     for n, a in zip(names, arrays)]
            fd = finite_difference_grad(
                lambda m=m, ids=ids: float(_lm_loss(m, ids, positions, targets).data),
                arrays,
            )
            worst = max(relative_error(g_, f_) for g_, f_ in zip(grads, fd))
            assert worst < 1e-3, f"{family}: worst relative error {worst:.2e}"
        assert time.monotonic() - t0 < 120


# ---------------------------------------------------------------------------
# 2. masking statistics


def test_criterion_02_masking_statistics_over_1e5_cells():
    with criterion(2, "Bernoulli(0.15) selection and 80/10/10 actions within 3 sigma"):
        vocab = Vocabulary([(f"k{c}", [str(v) for v in range(10)]) for c in range(10)])
        rng = RngState(7)
        ids = np.empty((1000, 10, 10), dtype=np.int64)
        for c in range(10):
            lo, hi = vocab.column_range(c)
            ids[:, :, c] = rng.integers(lo, hi, (1000, 10))
        n_cells = ids.size
        assert n_cells == 100_000

        plan = sample_masking_plan(ids, RngState(12))
        n_sel = plan.n_selected
        sigma = np.sqrt(n_cells * SELECT_P * (1 - SELECT_P))
        assert abs(n_sel - n_cells * SELECT_P) <= 3 * sigma

        for action, frac in zip((A_MASK, A_RANDOM, A_KEEP), ACTION_SPLIT):
            count = int((plan.actions == action).sum())
            s = np.sqrt(n_sel * frac * (1 - frac))
            assert abs(count - n_sel * frac) <= 3 * s, f"action {action}"

        corrupted = apply_masking(ids, plan, vocab)
        cols = plan.coords[:, 2]
        for action in (A_MASK, A_RANDOM, A_KEEP):
            sel = plan.actions == action
            got = corrupted[tuple(plan.coords[sel].T)]
            if action == A_MASK:
                assert (got == MASK).all()
            elif action == A_KEEP:
                assert (got == plan.original_ids[sel]).all()
            else:
                los = np.array([vocab.column_range(int(c))[0] for c in cols[sel]])
                his = np.array([vocab.column_range(int(c))[1] for c in cols[sel]])
                assert ((got >= los) & (got < his)).all()


# ---------------------------------------------------------------------------
# 3. complexity accounting


def test_criterion_03_attention_pair_counts_match_closed_form():
    with criterion(3, "instrumented pair counts == closed form on four grids; R-doubling ratio 4.0"):
        t0 = time.monotonic()
        grids = [(4, 5), (8, 5), (8, 10), (10, 16)]
        for family in FAMILIES:
            for R, C in grids:
                cfg = ModelConfig(
                    family=family, d=16, heads=2, l1=2,
                    l2=0 if family in ("ft_flat", "tabbie") else 2,
                    vocab_size=30, rows=R, cols=C, dtype="float32",
                )
                report = Model(cfg, RngState(0)).attention_pair_report()
                assert report["match"], f"{family} {R}x{C}: {report}"
                assert report["measured"] == closed_form_attention_pairs(cfg)

        def fieldy_stage2(R, C):
            return closed_form_attention_pairs(
                ModelConfig("fieldy", d=16, heads=2, l1=1, l2=1,
                            vocab_size=30, rows=R, cols=C)
            )["stage2"]

        assert fieldy_stage2(8, 5) / fieldy_stage2(4, 5) == 4.0
        assert time.monotonic() - t0 < 60


# ---------------------------------------------------------------------------
# 4. parameter parity


def test_criterion_04_parameter_parity_within_2_percent():
    with criterion(4, "all five families sized within 2% of the reference count"):
        ref = ModelConfig(
            "tabbert_row", d=64, heads=4, l1=2, l2=1,
            vocab_size=120, rows=10, cols=7,
        )
        report = match_param_counts(ref)
        assert set(report.configs) == set(FAMILIES)
        for family, cfg in report.configs.items():
            enumerated = Model(cfg, RngState(0)).count_params()
            assert enumerated == report.counts[family]
            deviation = abs(enumerated - report.reference_count) / report.reference_count
            assert deviation <= 0.02, f"{family}: {deviation:.4f}"


# ---------------------------------------------------------------------------
# 5. permutation invariances


def _rel_change(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), 1e-12)


def _nontrivial_perm(n, seed):
    rng = RngState(seed)
    while True:
        p = rng.permutation(n)
        if not np.array_equal(p, np.arange(n)):
            return p


def test_criterion_05_permutation_invariances_track_positional_flags():
    with criterion(5, "positional flags off: invariant <= 1e-5; on: changed > 1e-3"):
        row_perm = _nontrivial_perm(3, 2)
        col_perm = _nontrivial_perm(4, 3)

        def cls_out(m, ids):
            return m.cls_output(ids)

        # flags off: invariance
        for family, perms in [
            ("ft_flat", ["rows"]),
            ("fieldy", ["rows", "cols"]),
        ]:
            m = Model(_tiny_cfg(family, head="regression", n_targets=2,
                                use_row_pos_emb=False, use_col_index_emb=False),
                      RngState(4))
            ids = RngState(9).integers(4, 24, (2, 3, 4))
            base = cls_out(m, ids)
            if "rows" in perms:
                assert _rel_change(cls_out(m, ids[:, row_perm, :]), base) <= 1e-5
            if "cols" in perms:
                assert _rel_change(cls_out(m, ids[:, :, col_perm]), base) <= 1e-5

        m = Model(_tiny_cfg("tabbert_row", use_col_index_emb=False), RngState(4))
        ids = RngState(9).integers(4, 24, (2, 3, 4))
        shuffled = ids.copy()
        shuffled[:, 1, :] = shuffled[:, 1, col_perm]
        assert _rel_change(m.stage1_vectors(shuffled), m.stage1_vectors(ids)) <= 1e-5

        # flags on at generic weights: the same permutations move the outputs
        for family, perm_axis in [("ft_flat", "rows"), ("fieldy", "rows"), ("fieldy", "cols")]:
            m = Model(_tiny_cfg(family, head="regression", n_targets=2), RngState(4))
            randomize_params(m, seed=8)
            ids = RngState(9).integers(4, 24, (2, 3, 4))
            base = cls_out(m, ids)
            permuted = ids[:, row_perm, :] if perm_axis == "rows" else ids[:, :, col_perm]
            assert _rel_change(cls_out(m, permuted), base) > 1e-3, f"{family} {perm_axis}"

        m = Model(_tiny_cfg("tabbert_row"), RngState(4))
        randomize_params(m, seed=10)
        shuffled = ids.copy()
        shuffled[:, 1, :] = shuffled[:, 1, col_perm]
        assert _rel_change(m.stage1_vectors(shuffled), m.stage1_vectors(ids)) > 1e-3


# ---------------------------------------------------------------------------
# 9. metric oracles (fast; runs before the training criteria)


def _brute_rmse(preds, targets):
    cols = []
    for c in range(preds.shape[1]):
        cols.append(np.sqrt(np.mean((preds[:, c] - targets[:, c]) ** 2)))
    return float(np.mean(cols))


def _brute_ap(scores, labels):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    total, hits = 0.0, 0
    for rank, i in enumerate(order, start=1):
        if labels[i] == 1:
            hits += 1
            total += hits / rank
    if hits == 0:
        raise MetricError("no positives")
    return total / hits


def test_criterion_09_metric_oracles_on_1000_instances():
    with criterion(9, "rmse_avg and average_precision vs brute force (1e-9) + worked examples"):
        assert average_precision(np.array([0.9, 0.1]), np.array([1, 0])) == 1.0
        assert average_precision(np.array([0.1, 0.9]), np.array([1, 0])) == 0.5
        third = average_precision(np.array([0.9, 0.8, 0.7]), np.array([1, 0, 1]))
        assert abs(third - 5 / 6) < 1e-12

        rng = RngState(42)
        for i in range(1000):
            n = 2 + int(rng.integers(0, 40, ()))
            k = 1 + int(rng.integers(0, 4, ()))
            preds = rng.normal((n, k))
            targets = rng.normal((n, k))
            assert abs(rmse_avg(preds, targets) - _brute_rmse(preds, targets)) < 1e-9

        rng = RngState(43)
        done = 0
        while done < 1000:
            n = 2 + int(rng.integers(0, 40, ()))
            scores = np.round(rng.normal((n,)), 1)  # coarse grid forces ties
            labels = (rng.random((n,)) < 0.4).astype(np.int64)
            if labels.sum() == 0:
                continue
            assert abs(average_precision(scores, labels) - _brute_ap(scores, labels)) < 1e-9
            done += 1


# ---------------------------------------------------------------------------
# 10. determinism


def _snapshot(paths):
    return {p.name: p.read_bytes() for p in paths}


def test_criterion_10_bitwise_determinism(tmp_path):
    with criterion(10, "rerun => bitwise-identical prepared data, checkpoints, metrics.json"):
        data = tmp_path / "data"
        cfg_path = tmp_path / "run.json"
        cfg_path.write_text(json.dumps({
            "dataset": {
                "path": str(data),
                "recipe": "synthetic:cross_field_regression",
                "n_entities": 40, "window_length": 4, "rows_per_entity": 4,
                "n_categorical": 1, "n_numerical": 1,
            },
            "model": {"family": "tabbert_row", "d": 16, "heads": 2, "l1": 1, "l2": 1},
            "pretrain": {"epochs": 1, "batch_size": 8, "lr": 1e-3},
            "finetune": {"epochs": 2, "batch_size": 8, "lr": 1e-3},
            "seeds": [0],
        }))

        prep_files = ["samples.jsonl", "schema.json", "vocab.json", "manifest.json"]
        assert cli_main(["prepare", "--config", str(cfg_path), "--out", str(data)]) == 0
        first = _snapshot([data / f for f in prep_files])
        assert cli_main(["prepare", "--config", str(cfg_path), "--out", str(data)]) == 0
        assert _snapshot([data / f for f in prep_files]) == first

        pre = tmp_path / "pre"
        assert cli_main(["pretrain", "--config", str(cfg_path), "--out", str(pre)]) == 0
        ckpts = [pre / "seed0" / "best.ckpt", pre / "seed0" / "resume.ckpt"]
        first = _snapshot(ckpts)
        assert cli_main(["pretrain", "--config", str(cfg_path), "--out", str(pre)]) == 0
        assert _snapshot(ckpts) == first

        ft = tmp_path / "ft"
        args = ["finetune", "--config", str(cfg_path), "--out", str(ft),
                "--from", str(pre)]
        assert cli_main(args) == 0
        metrics = (ft / "metrics.json").read_bytes()
        ckpt_first = _snapshot([ft / "seed0" / "best.ckpt"])
        assert cli_main(args) == 0
        assert (ft / "metrics.json").read_bytes() == metrics
        assert _snapshot([ft / "seed0" / "best.ckpt"]) == ckpt_first


# ---------------------------------------------------------------------------
# 6. overfit smoke (trains every family; minutes)


def test_criterion_06_overfit_smoke_all_families(tmp_path):
    with criterion(6, "32 fixed samples: masked loss halved <= 200 steps, MSE < 1e-2 <= 500 steps"):
        t0 = time.process_time()
        results = overfit_smoke(tmp_path, progress=print)
        for family, o in results.items():
            assert o.pretrain_halved, (
                f"{family}: masked loss {o.pretrain_initial:.3f} -> {o.pretrain_final:.3f} "
                f"after {o.pretrain_steps} steps (needed < {0.5 * o.pretrain_initial:.3f})"
            )
            assert o.mse_reached, (
                f"{family}: MSE {o.mse_final:.2e} after {o.finetune_steps} steps"
            )
        assert time.process_time() - t0 < 600


# ---------------------------------------------------------------------------
# 8. cross-field regression ordering (trains 10 tiny models; minutes)


def test_criterion_08_cross_field_regression_ordering(tmp_path):
    with criterion(8, "median test RMSE over 5 seeds: field-hierarchical <= row-hierarchical"):
        report = cross_field_experiment(tmp_path, progress=print)
        fieldy = report.median("fieldy")
        tabbert = report.median("tabbert_row")
        print(f"cross-field medians: fieldy {fieldy:.4f} vs tabbert_row {tabbert:.4f}")
        assert fieldy <= tabbert


# ---------------------------------------------------------------------------
# 7. hour probe (pretrains 6 tiny models; the long pole of the suite)


def test_criterion_07_hour_probe_separation(tmp_path):
    with criterion(7, "probe medians over 3 seeds: field >= 0.50 and >= 2x row baseline"):
        report = probe_experiment(tmp_path, progress=print)
        train_s = sum(o.train_seconds for o in report.families.values())
        fieldy = report.median("fieldy")
        tabbert = report.median("tabbert_row")
        print(
            f"probe medians: fieldy {fieldy:.3f} vs tabbert_row {tabbert:.3f} "
            f"(pretraining {train_s:.0f}s)"
        )
        assert train_s <= 1800, f"pretraining took {train_s:.0f}s, over the 30-minute budget"
        assert fieldy >= 0.50, f"fieldy median {fieldy:.3f} below 0.50"
        assert fieldy >= 2 * tabbert, (
            f"fieldy {fieldy:.3f} not twice tabbert_row {tabbert:.3f}"
        )
