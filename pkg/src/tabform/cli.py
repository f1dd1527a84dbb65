"""Command-line front end: prepare, pretrain, finetune, evaluate, probe, bench.

A run is driven by a strict JSON config (unknown keys are rejected at every
level) merged over an optional named preset:

    {
      "preset": "tiny-fieldy",
      "dataset": {"path": "runs/probe-data"},
      "model": {"dropout": 0.1},
      "pretrain": {"epochs": 12, "batch_size": 16, "lr": 1e-3},
      "finetune": {"epochs": 10, "batch_size": 16, "lr": 1e-3},
      "seeds": [0, 1, 2],
      "out_dir": "runs/probe-fieldy"
    }

Model vocabulary size, grid shape, and the output head are always derived
from the prepared dataset and the subcommand, never configured by hand.
Every command echoes its resolved config and a version stamp into the
output directory and exits 0 only when the requested artifact was written.

Seeds run as parallel worker processes when TABFORM_THREADS allows; each
worker caps its own BLAS pools at one thread.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import multiprocessing
import os
import sys
import time
import warnings
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

from . import __version__
from .arch import (
    FAMILIES,
    SINGLE_STAGE,
    Model,
    ModelConfig,
    load_checkpoint,
)
from .dataprep import DatasetConfig, PreparedDataset, prepare_dataset
from .errors import ConfigError, DataError, TabformError
from .evaluate import (
    aggregate_seeds,
    evaluate_checkpoint,
    oracle_copy_accuracy,
    run_probe,
    write_metrics,
)
from .tensor import RngState
from .train import TrainConfig, run_training

DEFAULT_BENCH_GRIDS = "4x5,8x5,8x10,10x16"


# ---------------------------------------------------------------------------
# presets


def _tiny_layers(family: str) -> tuple[int, int]:
    # two-stage families get the 2/1 split; single-stage families carry the
    # same total depth in their one stage (the parity tool's convention)
    if family == "ft_flat":
        return 3, 0
    if family == "tabbie":
        return 2, 0
    return 2, 1


def _tiny_preset(family: str) -> dict:
    l1, l2 = _tiny_layers(family)
    train = {"epochs": 10, "batch_size": 16, "lr": 1e-3, "weight_decay": 0.01}
    return {
        "model": {"family": family, "d": 64, "heads": 4, "l1": l1, "l2": l2,
                  "dropout": 0.0},
        "pretrain": dict(train),
        "finetune": dict(train),
        "seeds": [0],
    }


# reference layer splits, first-stage / second-stage
_REF_PLANS = {
    "pollution": {"ft_flat": (14, 0), "tabbie": (4, 0), "tabbert_row": (6, 1),
                  "tabbert_col": (6, 1), "fieldy": (8, 2)},
    "loan": {"ft_flat": (8, 0), "tabbie": (4, 0), "tabbert_row": (6, 1),
             "tabbert_col": (6, 1), "fieldy": (5, 2)},
}


def _ref_preset(task: str, family: str | None) -> dict:
    # full-scale settings; documented as not desk-runnable at full scale
    if task == "pollution":
        d, drop, batch, pre_epochs, ft_epochs = 800, 0.1, 64, 24, 10
    else:
        d, drop, batch, pre_epochs, ft_epochs = 500, 0.3, 100, 60, 20
    model: dict = {"d": d, "heads": 10, "dropout": drop}
    if family is not None:
        l1, l2 = _REF_PLANS[task][family]
        model.update(family=family, l1=l1, l2=l2)
    return {
        "dataset": {"recipe": task},
        "model": model,
        "pretrain": {"epochs": pre_epochs, "batch_size": batch, "lr": 5e-5,
                     "weight_decay": 0.01},
        "finetune": {"epochs": ft_epochs, "batch_size": batch, "lr": 5e-5,
                     "weight_decay": 0.01},
        "seeds": [0, 1, 2],
    }


def _build_presets() -> dict[str, dict]:
    out = {}
    for fam in FAMILIES:
        out[f"tiny-{fam}"] = _tiny_preset(fam)
        out[f"pollution-ref-{fam}"] = _ref_preset("pollution", fam)
        out[f"loan-ref-{fam}"] = _ref_preset("loan", fam)
    out["pollution-ref"] = _ref_preset("pollution", None)
    out["loan-ref"] = _ref_preset("loan", None)
    return out


PRESETS = _build_presets()


# ---------------------------------------------------------------------------
# config loading


_TOP_KEYS = {"preset", "dataset", "model", "pretrain", "finetune", "seeds", "out_dir"}
_DATASET_KEYS = {f.name for f in dc_fields(DatasetConfig)} | {"path"}
_DERIVED_MODEL_KEYS = {"vocab_size", "rows", "cols", "head", "n_targets", "dtype"}
_MODEL_KEYS = {f.name for f in dc_fields(ModelConfig)} - _DERIVED_MODEL_KEYS
_TRAIN_KEYS = {"epochs", "batch_size", "lr", "weight_decay", "freeze_stage1"}


def _check_keys(section: str, obj, allowed: set[str]) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"config section {section!r} must be a JSON object")
    for key in obj:
        if key in _DERIVED_MODEL_KEYS and section == "model":
            raise ConfigError(
                f"model.{key} is derived from the dataset and subcommand, "
                "not configured"
            )
        if key not in allowed:
            raise ConfigError(
                f"unknown key {key!r} in config section {section!r}; "
                f"allowed: {sorted(allowed)}"
            )


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_run_config(path: str | None) -> dict:
    """Read, preset-expand, and strictly validate a run config file."""
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise DataError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("the run config must be a JSON object")
    _check_keys("top level", raw, _TOP_KEYS)

    preset_name = raw.get("preset")
    resolved = dict(raw)
    if preset_name is not None:
        if preset_name not in PRESETS:
            raise ConfigError(
                f"unknown preset {preset_name!r}; available: {sorted(PRESETS)}"
            )
        resolved = _merge(PRESETS[preset_name], {k: v for k, v in raw.items()
                                                 if k != "preset"})
        resolved["preset"] = preset_name

    for section, allowed in (
        ("dataset", _DATASET_KEYS),
        ("model", _MODEL_KEYS),
        ("pretrain", _TRAIN_KEYS),
        ("finetune", _TRAIN_KEYS),
    ):
        if section in resolved:
            _check_keys(section, resolved[section], allowed)
    if "seeds" in resolved:
        seeds = resolved["seeds"]
        if (
            not isinstance(seeds, list)
            or not seeds
            or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds)
        ):
            raise ConfigError("seeds must be a non-empty list of integers")
        if len(set(seeds)) != len(seeds):
            raise ConfigError(f"seeds contains duplicates: {seeds}")
    if "out_dir" in resolved and not isinstance(resolved["out_dir"], str):
        raise ConfigError("out_dir must be a string path")
    return resolved


def _config_hash(resolved: dict) -> str:
    payload = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def _write_run_stamp(out_dir: Path, command: str, resolved: dict, seeds) -> None:
    stamp = {
        "command": command,
        "version": __version__,
        "config_hash": _config_hash(resolved),
        "seeds": list(seeds),
        "resolved": resolved,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(stamp, sort_keys=True, indent=2) + "\n"
    )


# ---------------------------------------------------------------------------
# shared command plumbing


def _out_dir(args, resolved: dict) -> Path:
    out = args.out or resolved.get("out_dir")
    if out is None:
        raise ConfigError("no output directory: pass --out or set out_dir in the config")
    return Path(out)


def _seed_list(args, resolved: dict) -> list[int]:
    if getattr(args, "seeds", None):
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
        except ValueError:
            raise ConfigError(f"--seeds expects comma-separated integers, got {args.seeds!r}")
        if not seeds:
            raise ConfigError("--seeds parsed to an empty list")
        return seeds
    if getattr(args, "seed", None) is not None:
        return [args.seed]
    return resolved.get("seeds", [0])


def _dataset_from_config(resolved: dict) -> PreparedDataset:
    section = resolved.get("dataset")
    if not section or "path" not in section:
        raise ConfigError(
            "this command needs a prepared dataset: set dataset.path to a "
            "directory written by `tabform prepare`"
        )
    return PreparedDataset.load(section["path"])


def _model_config(resolved: dict, ds: PreparedDataset, head: str, n_targets: int = 1) -> ModelConfig:
    section = dict(resolved.get("model") or {})
    if "family" not in section:
        raise ConfigError("the config must set model.family (or use a tiny-* preset)")
    return ModelConfig(
        vocab_size=ds.vocab.size,
        rows=ds.schema.window_length,
        cols=ds.schema.n_grid_columns,
        head=head,
        n_targets=n_targets,
        **section,
    )


def _train_section(resolved: dict, phase: str) -> dict:
    section = resolved.get(phase)
    if not section:
        raise ConfigError(f"the config needs a {phase!r} section (epochs, batch_size, lr)")
    return dict(section)


def _task_head(ds: PreparedDataset) -> tuple[str, int]:
    """(head, n_targets) implied by the dataset's label mode."""
    mode = ds.schema.label_mode
    if mode == "per_step":
        k = len(ds.schema.target_columns)
        return "regression", ds.schema.window_length * k
    if mode == "per_sequence":
        return "binary", 1
    raise ConfigError(
        "this dataset has no labels; fine-tuning and task evaluation need a "
        "recipe with targets"
    )


def _limit_worker_threads() -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, "1")


def _worker_count(n_jobs: int) -> int:
    raw = os.environ.get("TABFORM_THREADS")
    if raw is None:
        return 1
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"TABFORM_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise ConfigError(f"TABFORM_THREADS must be >= 1, got {cap}")
    return min(cap, n_jobs)


def _train_worker(model_json: dict, train_kw: dict, dataset_path: str, seed: int,
                  out_dir: str, resume: bool, init_from: str | None) -> dict:
    """One seed's training run; safe to execute in a spawned process."""
    ds = PreparedDataset.load(dataset_path)
    cfg = ModelConfig.from_json(model_json)
    tc = TrainConfig(**train_kw)
    res = run_training(cfg, tc, ds, seed, out_dir, resume=resume, init_from=init_from)
    return {
        "seed": seed,
        "best_epoch": res.best_epoch,
        "best_metric": res.best_metric,
        "best_path": str(res.best_path),
    }


def _run_seed_jobs(jobs: list[tuple]) -> list[dict]:
    workers = _worker_count(len(jobs))
    if workers == 1:
        return [_train_worker(*job) for job in jobs]
    ctx = multiprocessing.get_context("spawn")
    with ctx.Pool(processes=workers, initializer=_limit_worker_threads) as pool:
        return pool.starmap(_train_worker, jobs)


# ---------------------------------------------------------------------------
# subcommands


def cmd_prepare(args) -> int:
    resolved = load_run_config(args.config)
    section = dict(resolved.get("dataset") or {})
    section.pop("path", None)
    if "recipe" not in section:
        raise ConfigError("prepare needs a dataset section with a recipe")
    cfg = DatasetConfig(**section)
    seeds = _seed_list(args, resolved)
    seed = seeds[0]
    out = _out_dir(args, resolved)
    prepare_dataset(cfg, seed, out)
    _write_run_stamp(out, "prepare", resolved, [seed])
    manifest = json.loads((out / "manifest.json").read_text())
    print(f"prepared {manifest['recipe']} -> {out}")
    print(f"  samples per split: {manifest['counts']}")
    print(f"  grid shape: {manifest['grid_shape']}")
    return 0


def cmd_pretrain(args) -> int:
    resolved = load_run_config(args.config)
    ds = _dataset_from_config(resolved)
    cfg = _model_config(resolved, ds, head="masked_lm")
    train_kw = {"phase": "pretrain", **_train_section(resolved, "pretrain")}
    TrainConfig(**train_kw)  # fail fast in the parent process
    seeds = _seed_list(args, resolved)
    out = _out_dir(args, resolved)
    ds_path = resolved["dataset"]["path"]
    jobs = [
        (cfg.to_json(), train_kw, ds_path, s, str(out / f"seed{s}"), args.resume, None)
        for s in seeds
    ]
    results = _run_seed_jobs(jobs)
    _write_run_stamp(out, "pretrain", resolved, seeds)
    for r in results:
        print(
            f"seed {r['seed']}: best val_loss {r['best_metric']:.6f} "
            f"at epoch {r['best_epoch']} -> {r['best_path']}"
        )
    return 0


def cmd_finetune(args) -> int:
    resolved = load_run_config(args.config)
    ds = _dataset_from_config(resolved)
    head, n_targets = _task_head(ds)
    cfg = _model_config(resolved, ds, head=head, n_targets=n_targets)
    train_kw = {"phase": "finetune", **_train_section(resolved, "finetune")}
    TrainConfig(**train_kw)
    seeds = _seed_list(args, resolved)
    out = _out_dir(args, resolved)
    ds_path = resolved["dataset"]["path"]

    init = args.init_from
    if init is None:
        warnings.warn(
            "no --from checkpoint given; fine-tuning from randomly "
            "initialized weights",
            stacklevel=1,
        )
    per_seed_init: dict[int, str | None] = {}
    for s in seeds:
        if init is None:
            per_seed_init[s] = None
        elif Path(init).is_dir():
            ckpt = Path(init) / f"seed{s}" / "best.ckpt"
            if not ckpt.exists():
                raise DataError(f"--from directory has no checkpoint for seed {s}: {ckpt}")
            per_seed_init[s] = str(ckpt)
        else:
            per_seed_init[s] = init

    jobs = [
        (cfg.to_json(), train_kw, ds_path, s, str(out / f"seed{s}"), args.resume,
         per_seed_init[s])
        for s in seeds
    ]
    results = _run_seed_jobs(jobs)

    runs = [evaluate_checkpoint(r["best_path"], ds, split="test") for r in results]
    report = aggregate_seeds(runs)
    metrics_path = write_metrics(report, out / "metrics.json")
    _write_run_stamp(out, "finetune", resolved, seeds)
    for r, run in zip(results, runs):
        print(
            f"seed {r['seed']}: best {report.metric_name} (val-selected) "
            f"epoch {r['best_epoch']}, test {run.value:.6f}"
        )
    print(
        f"{report.family} {report.metric_name}: mean {report.mean:.6f}"
        + (f" +/- {report.std:.6f}" if report.std is not None else "")
        + f" over seeds {[r.seed for r in report.seeds]} -> {metrics_path}"
    )
    return 0


def cmd_evaluate(args) -> int:
    resolved = load_run_config(args.config)
    ds = _dataset_from_config(resolved)
    runs = [
        evaluate_checkpoint(p, ds, split=args.split) for p in args.checkpoints
    ]
    report = aggregate_seeds(runs)
    out = _out_dir(args, resolved)
    metrics_path = write_metrics(report, out / "metrics.json")
    _write_run_stamp(out, "evaluate", resolved, [r.seed for r in runs])
    for run in runs:
        print(f"seed {run.seed}: {run.metric_name} = {run.value:.6f} on {args.split}")
    print(
        f"{report.family} {report.metric_name}: mean {report.mean:.6f}"
        + (f" +/- {report.std:.6f}" if report.std is not None else "")
        + f" -> {metrics_path}"
    )
    return 0


def _load_probe_model(ckpt_path: str, ds: PreparedDataset) -> tuple[Model, dict]:
    arrays, meta = load_checkpoint(ckpt_path)
    cfg = ModelConfig.from_json(meta["config"])
    stored = meta.get("vocab_hash")
    if stored is not None and stored != ds.vocab.content_hash():
        raise ConfigError(
            f"checkpoint {ckpt_path} was trained with a different vocabulary "
            "than this dataset"
        )
    model = Model(cfg, RngState(0))
    model.load_state(arrays)
    return model, meta


def cmd_probe(args) -> int:
    resolved = load_run_config(args.config)
    ds = _dataset_from_config(resolved)
    task = ds.manifest.get("recipe", "")
    if "hour_probe" not in task:
        raise ConfigError(
            f"the probe needs a synthetic:hour_probe dataset, got {task!r}"
        )
    ids, _, _ = ds.grids("test")
    if args.limit is not None:
        ids = ids[: args.limit]
    if len(ids) == 0:
        raise ConfigError("the probe has no test sequences to score")

    rows = []
    for ckpt in args.checkpoints:
        model, meta = _load_probe_model(ckpt, ds)
        result = run_probe(
            model,
            ids,
            ds.vocab,
            masked_rows=args.masked_rows,
            restrict_to_column=args.restrict_to_column,
        )
        rows.append(
            {
                "family": model.cfg.family,
                "seed": int(meta.get("seed", 0)),
                "accuracy": result.accuracy,
                "n_scored": result.n_scored,
            }
        )

    rows.append(
        {
            "family": "oracle_copy",
            "seed": None,
            "accuracy": oracle_copy_accuracy(
                ids, ds.vocab, masked_rows=args.masked_rows
            ),
            "n_scored": int(len(ids)) * args.masked_rows,
        }
    )

    per_family: dict[str, dict] = {}
    for row in rows:
        agg = per_family.setdefault(row["family"], {"seeds": [], "accuracies": []})
        agg["seeds"].append(row["seed"])
        agg["accuracies"].append(row["accuracy"])
    for agg in per_family.values():
        agg["median"] = float(np.median(agg["accuracies"]))

    report = {
        "task": task,
        "version": __version__,
        "config_hash": _config_hash(resolved),
        "n_sequences": int(len(ids)),
        "masked_rows": args.masked_rows,
        "restrict_to_column": args.restrict_to_column,
        "rows": rows,
        "per_family": per_family,
    }
    out = _out_dir(args, resolved)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "probe_report.json"
    report_path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    _write_run_stamp(
        out, "probe", resolved, sorted({r["seed"] for r in rows if r["seed"] is not None})
    )
    print(f"hour probe on {len(ids)} sequences, last {args.masked_rows} rows masked")
    for family, agg in sorted(per_family.items()):
        accs = ", ".join(f"{a:.3f}" for a in agg["accuracies"])
        print(f"  {family:12s} median {agg['median']:.3f}  (seeds {agg['seeds']}: {accs})")
    print(f"-> {report_path}")
    return 0


def _parse_grids(text: str) -> list[tuple[int, int]]:
    grids = []
    for part in text.split(","):
        part = part.strip()
        try:
            r, c = part.split("x")
            grids.append((int(r), int(c)))
        except ValueError:
            raise ConfigError(
                f"bad grid {part!r}; expected ROWSxCOLS, e.g. 10x16"
            )
    if not grids:
        raise ConfigError("no grids given")
    return grids


def cmd_bench(args) -> int:
    grids = _parse_grids(args.grids)
    families = args.families.split(",") if args.families else list(FAMILIES)
    for fam in families:
        if fam not in FAMILIES:
            raise ConfigError(f"unknown family {fam!r}; choose from {FAMILIES}")
    out = _out_dir(args, {"out_dir": args.out} if args.out else {})
    out.mkdir(parents=True, exist_ok=True)

    heads, d = 2, 16
    lines = [
        "family,rows,cols,stage,layers,heads,pairs_closed_form,pairs_measured,"
        "match,pairs_per_layer_per_head,forward_wall_ms"
    ]
    all_match = True
    for family in families:
        l1, l2 = (1, 0) if family in SINGLE_STAGE else (1, 1)
        for rows, cols in grids:
            cfg = ModelConfig(
                family=family, d=d, heads=heads, l1=l1, l2=l2, vocab_size=32,
                rows=rows, cols=cols,
            )
            model = Model(cfg, RngState(0))
            ids = RngState(1).integers(4, 32, (1, rows, cols))
            t0 = time.perf_counter()
            model.forward(ids)
            wall_ms = (time.perf_counter() - t0) * 1e3
            report = model.attention_pair_report()
            all_match = all_match and report["match"]
            for stage, closed in sorted(report["closed_form"].items()):
                layers = l1 if stage == "stage1" else l2
                measured = report["measured"].get(stage, 0)
                per_layer = closed // (layers * heads)
                lines.append(
                    f"{family},{rows},{cols},{stage},{layers},{heads},"
                    f"{closed},{measured},{int(closed == measured)},"
                    f"{per_layer},{wall_ms:.2f}"
                )
    bench_path = out / "bench.csv"
    bench_path.write_text("\n".join(lines) + "\n")
    _write_run_stamp(out, "bench", {"grids": args.grids, "families": families}, [])
    for line in lines:
        print(line)
    print(f"-> {bench_path}")
    if not all_match:
        print("error: measured pair counts diverged from the closed form", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tabform",
        description="Compare self-attention layouts on tabular time-series grids.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to a JSON run config")
    common.add_argument("--seed", type=int, help="single seed (overrides config)")
    common.add_argument("--seeds", help="comma-separated seeds (overrides config)")
    common.add_argument("--out", help="output directory (overrides config out_dir)")
    common.add_argument(
        "--resume", action="store_true",
        help="continue an interrupted training run from its resume checkpoint",
    )

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common],
                       help="tokenize and window a dataset onto disk")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("pretrain", parents=[common],
                       help="masked-token pretraining, one run per seed")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common],
                       help="supervised fine-tuning plus test metrics")
    p.add_argument("--from", dest="init_from",
                   help="pretrained checkpoint file, or a pretrain output "
                        "directory with per-seed checkpoints")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", parents=[common],
                       help="score trained checkpoints on a split")
    p.add_argument("--checkpoint", dest="checkpoints", action="append",
                   required=True, help="checkpoint to score (repeatable)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("probe", parents=[common],
                       help="mask the last rows and score hour prediction")
    p.add_argument("--checkpoint", dest="checkpoints", action="append",
                   required=True, help="masked-LM checkpoint (repeatable)")
    p.add_argument("--masked-rows", type=int, default=5)
    p.add_argument("--restrict-to-column", action="store_true",
                   help="argmax over the hour column's ids only")
    p.add_argument("--limit", type=int, help="cap the number of test sequences")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("bench", parents=[common],
                       help="closed-form vs measured attention-pair counts")
    p.add_argument("--grids", default=DEFAULT_BENCH_GRIDS,
                   help="comma-separated ROWSxCOLS list")
    p.add_argument("--families", help="comma-separated subset of families")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TabformError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
