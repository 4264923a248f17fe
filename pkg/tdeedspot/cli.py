"""Command-line interface for tdeedspot.

Subcommands generate the synthetic dataset, train, evaluate, run ablation studies and the
token / pyramid analyses, and regenerate plots from CSVs. All of them are driven by a single
YAML run configuration; ``--set a.b=value`` overrides leaf keys.

Exit codes: 0 success, 2 configuration error, 3 any other failure.
"""

import multiprocessing
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from loguru import logger

import tdeedspot
from tdeedspot import Helper
from tdeedspot.checkpoint import load_checkpoint
from tdeedspot.errors import ConfigError, TdeedError
from tdeedspot.evaluation import discriminability_profile, discriminability_summary, evaluate, pyramid_layer_map
from tdeedspot.models import HEAD_MODE_PRESETS, SKIP_VARIANTS, RunConfig, build_config, load_run_config
from tdeedspot.reporting import (
    PLOT_KINDS,
    regenerate_plot,
    write_csv,
    write_manifest,
    write_table_and_plot,
)
from tdeedspot.spotting import read_predictions, spot_videos, write_predictions
from tdeedspot.storage import annotations_path, ground_truth_from_annotations, load_split, read_annotations, save_split
from tdeedspot.synthdata import collate_clips, generate_dataset, sample_clip
from tdeedspot.tdeed import build_model
from tdeedspot.trainer import METRICS_FILE, seed_everything, train

SPLITS: Tuple[str, ...] = ("train", "val", "test")
SPLIT_SEED_STRIDE: int = 10_000

EXIT_OK: int = 0
EXIT_CONFIG: int = 2
EXIT_FAILURE: int = 3

# study -> cell -> dotted overrides
STUDY_CELLS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "temporal_module": {m: {"model.temporal_module": m} for m in ("sgp", "transformer", "gru")},
    "skip_variant": {v: {"model.temporal_module": "sgp_ed", "model.skip": v} for v in SKIP_VARIANTS},
    "head_mode": {name: {f"model.{k}": v for k, v in upd.items()} for name, upd in HEAD_MODE_PRESETS.items()},
    "pyramid": {
        "sgp_ed": {"model.temporal_module": "sgp_ed"},
        "sgp_pyramid": {"model.temporal_module": "sgp_pyramid", "model.head_mode": "displacement"},
    },
    "shift_module": {
        "none": {"model.backbone.shift_module": "none"},
        "GSM_all": {"model.backbone.shift_module": "GSM", "model.backbone.shift_placement": "all"},
        "GSM_latter_half": {"model.backbone.shift_module": "GSM", "model.backbone.shift_placement": "latter_half"},
        "GSF_all": {"model.backbone.shift_module": "GSF", "model.backbone.shift_placement": "all"},
        "GSF_latter_half": {"model.backbone.shift_module": "GSF", "model.backbone.shift_placement": "latter_half"},
    },
}
POSTPROC_CELLS: Tuple[str, ...] = ("snms", "nms", "none")


# ---------------------------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------------------------


def run_config_hash(cfg: RunConfig) -> str:
    """Hash of the run configuration, ignoring knobs that do not change results."""
    return Helper.config_hash(cfg.model_dump(mode="json", exclude={"train": {"resume", "num_workers"}}))


def _with_overrides(cfg: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    raw = cfg.model_dump(mode="json")
    for key, value in overrides.items():
        raw = Helper.update_deep(raw, Helper.dotted_to_nested(key, value))  # type: ignore
    return build_config(RunConfig, raw)


def _map_columns(deltas: Sequence[int]) -> List[str]:
    return [f"map_d{d}" for d in deltas]


def _ensure_dataset(cfg: RunConfig, noisy: bool = False) -> None:
    if not annotations_path(cfg.data_root, "train").exists():
        logger.info(f"no dataset below {cfg.data_root}, generating it")
        cmd_gen(cfg, noisy=noisy)


# ---------------------------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------------------------


def cmd_gen(cfg: RunConfig, noisy: bool = False, timezone: str = "UTC") -> List[Path]:
    """Generate the train/val/test splits below ``cfg.data_root``.

    Each split renders its own videos from ``generator.seed + index * 10000``.
    """
    root = cfg.data_root
    written: List[Path] = []
    for i, split in enumerate(SPLITS):
        n = getattr(cfg.data.splits, split)
        if n == 0:
            continue
        spec = cfg.data.generator.model_copy(
            update={"num_videos": n, "seed": cfg.data.generator.seed + i * SPLIT_SEED_STRIDE}
        )
        videos = generate_dataset(spec, noisy=noisy)
        written.extend(save_split(root, split, videos, cfg.data.storage, cfg.data.pixel_format, noisy=noisy))
    write_manifest(root, "gen", run_config_hash(cfg), cfg.data.generator.seed, written, timezone)
    return written


def cmd_train(cfg: RunConfig, noisy: bool = False, timezone: str = "UTC") -> Path:
    """Train a model; writes checkpoint, metrics CSV/plot and trainer state below ``output_dir``.

    Returns:
        Path: The checkpoint directory.
    """
    seed_everything(cfg.train.seed)
    _ensure_dataset(cfg, noisy)
    out = cfg.output_dir
    train_videos = load_split(cfg.data_root, "train")
    val_videos = load_split(cfg.data_root, "val") if cfg.data.splits.val > 0 else []
    model = build_model(cfg.model, seed=cfg.train.seed)
    logger.info(
        f"training {cfg.model.temporal_module} ({model.parameter_count():,} parameters) on "
        f"{len(train_videos)} videos for {cfg.train.epochs} epochs"
    )
    result = train(
        model,
        train_videos,
        cfg.train,
        cfg.augment,
        cfg.infer,
        out,
        val_videos=val_videos,
        config_hash=run_config_hash(cfg),
        noisy=noisy,
    )
    metrics_csv = Path(out, METRICS_FILE)
    plot = regenerate_plot(metrics_csv, "metrics")
    artifacts = [metrics_csv, plot, *sorted(result.checkpoint_dir.glob("*"))]
    write_manifest(
        out,
        "train",
        run_config_hash(cfg),
        cfg.train.seed,
        artifacts,
        timezone,
        extra={"best_epoch": result.best_epoch, "best_score": result.best_score, "epochs_run": result.epochs_run},
    )
    return result.checkpoint_dir


def cmd_eval(cfg: RunConfig, noisy: bool = False, timezone: str = "UTC") -> pd.DataFrame:
    """Evaluate a checkpoint (or an existing predictions file) on ``eval.split``.

    Writes ``predictions_<postproc>.json`` per compared post-processing and ``eval.csv`` with one
    row per post-processing and one ``map_d<delta>`` column per tolerance.
    """
    out = cfg.output_dir
    ann = annotations_path(cfg.data_root, cfg.eval.split)
    num_classes, _ = read_annotations(ann)
    gts = ground_truth_from_annotations(ann)
    cols = _map_columns(cfg.eval.deltas)
    rows: List[Dict[str, Any]] = []
    artifacts: List[Path] = []

    if cfg.eval.predictions is not None:
        preds = read_predictions(cfg.eval.predictions)
        scores = evaluate(preds, gts, num_classes, cfg.eval.deltas)
        rows.append({"postproc": "file", "num_predictions": len(preds), **dict(zip(cols, scores.values()))})
    else:
        seed_everything(cfg.train.seed)
        ckpt = cfg.eval.checkpoint or Path(out, "checkpoint")
        model = load_checkpoint(ckpt, device=cfg.train.device)
        videos = load_split(cfg.data_root, cfg.eval.split)
        postprocs = list(dict.fromkeys([cfg.infer.postproc, *cfg.eval.compare_postproc]))
        preds_by = spot_videos(videos, model, model.cfg.clip_length, cfg.infer, postprocs, noisy=noisy)
        for p in postprocs:
            preds = preds_by[p]
            artifacts.append(write_predictions(Path(out, f"predictions_{p}.json"), preds, [v.video_id for v in videos]))
            scores = evaluate(preds, gts, num_classes, cfg.eval.deltas)
            rows.append({"postproc": p, "num_predictions": len(preds), **dict(zip(cols, scores.values()))})

    df = pd.DataFrame(rows, columns=["postproc", "num_predictions", *cols])
    for r in rows:
        logger.info(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    artifacts.append(write_csv(df, Path(out, "eval.csv")))
    write_manifest(out, "eval", run_config_hash(cfg), cfg.train.seed, artifacts, timezone)
    return df


def run_cell(raw: Dict[str, Any], postprocs: Sequence[str], noisy: bool = False, timezone: str = "UTC") -> Dict[str, Any]:
    """Train and evaluate one ablation cell (one configuration, one seed).

    Runs in a worker process; ``raw`` is the fully resolved run configuration of the cell.

    Returns:
        dict: ``postproc -> {delta: mAP}`` plus the parameter count.
    """
    tdeedspot.configure_loguru_default_with_skiplog_filter()
    logger.enable("tdeedspot")
    cfg = build_config(RunConfig, raw)
    ckpt_dir = cmd_train(cfg, noisy=noisy, timezone=timezone)
    model = load_checkpoint(ckpt_dir, device=cfg.train.device)
    ann = annotations_path(cfg.data_root, cfg.eval.split)
    num_classes, _ = read_annotations(ann)
    gts = ground_truth_from_annotations(ann)
    videos = load_split(cfg.data_root, cfg.eval.split)
    preds_by = spot_videos(videos, model, model.cfg.clip_length, cfg.infer, list(postprocs), noisy=noisy)
    return {
        "params": model.parameter_count(),
        "scores": {p: evaluate(preds_by[p], gts, num_classes, cfg.eval.deltas) for p in postprocs},
    }


def cell_config(base: RunConfig, overrides: Dict[str, Any], seed: int, extra: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Configuration of one ablation cell trained with ``seed``.

    Only the training seed varies; the data seed stays the one the shared dataset was generated with.
    """
    return _with_overrides(base, {**overrides, **(extra or {}), "seed": None, "train.seed": seed})


def study_cells(cfg: RunConfig) -> Dict[str, Dict[str, Any]]:
    """Cells of the configured study as ``cell -> dotted overrides``."""
    study = cfg.ablate.study
    if study == "clip_length":
        return {f"L{L}": {"model.clip_length": L, "model.max_len": None} for L in cfg.ablate.clip_lengths}
    if study == "postproc":
        return {"shared": {}}
    return STUDY_CELLS[study]


def cmd_ablate(cfg: RunConfig, noisy: bool = False, timezone: str = "UTC") -> pd.DataFrame:
    """Run an ablation matrix with every seed in ``ablate.seeds`` and report per-cell means.

    Cells share one dataset and own their output subdirectory ``<out>/<study>/<cell>/seed<s>``.
    The ``postproc`` study trains once per seed and evaluates every post-processing on it.
    """
    _ensure_dataset(cfg, noisy)
    study = cfg.ablate.study
    out = cfg.output_dir
    base = _with_overrides(cfg, {"data.root": str(cfg.data_root.resolve())})
    postprocs = list(POSTPROC_CELLS) if study == "postproc" else [cfg.infer.postproc]
    deltas = sorted(set(cfg.eval.deltas) | {cfg.ablate.delta})
    cells = study_cells(cfg)

    jobs: List[Tuple[str, int, Dict[str, Any]]] = []
    for cell, overrides in cells.items():
        for s in cfg.ablate.seeds:
            extra = {"eval.deltas": deltas, "output_dir": str(Path(out, study, cell, f"seed{s}"))}
            cell_cfg = cell_config(base, overrides, s, extra)
            jobs.append((cell, s, cell_cfg.model_dump(mode="json")))
    logger.info(f"study {study}: {len(cells)} cells x {len(cfg.ablate.seeds)} seeds, {cfg.ablate.workers} workers")

    if cfg.ablate.workers > 1:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=cfg.ablate.workers, mp_context=ctx) as pool:
            futures = [pool.submit(run_cell, raw, postprocs, noisy, timezone) for _, _, raw in jobs]
            results = [f.result() for f in futures]
    else:
        results = [run_cell(raw, postprocs, noisy, timezone) for _, _, raw in jobs]

    per_cell: Dict[str, List[Tuple[int, Dict[str, Any]]]] = {}
    for (cell, s, _), res in zip(jobs, results):
        if study == "postproc":
            for p in postprocs:
                per_cell.setdefault(p, []).append((s, {"params": res["params"], "scores": {p: res["scores"][p]}}))
        else:
            per_cell.setdefault(cell, []).append((s, res))

    cols = _map_columns(deltas)
    rows: List[Dict[str, Any]] = []
    for cell, entries in per_cell.items():
        row: Dict[str, Any] = {
            "study": study,
            "cell": cell,
            "seed_count": len(entries),
            "seeds": ";".join(str(s) for s, _ in entries),
            "params": entries[0][1]["params"],
        }
        for d, col in zip(deltas, cols):
            vals = [float(next(iter(r["scores"].values()))[d]) for _, r in entries]
            row[col] = float(np.mean(vals))
            row[f"{col}_std"] = float(np.std(vals))
        rows.append(row)
        logger.info(f"{study}/{cell}: " + " ".join(f"{c}={row[c]:.4f}" for c in cols))

    df = pd.DataFrame(rows, columns=["study", "cell", "seed_count", "seeds", "params", *[x for c in cols for x in (c, f"{c}_std")]])
    csv_path = Path(out, f"{study}.csv")
    png = write_table_and_plot(df, csv_path, "study")
    write_manifest(out, f"ablate:{study}", run_config_hash(cfg), cfg.seed, [csv_path, png], timezone)
    return df


def _analysis_checkpoint(cfg: RunConfig, label: str, overrides: Dict[str, Any], noisy: bool) -> Path:
    """Checkpoint directory of an analysed model.

    Without an explicit checkpoint the model is trained below ``<out>/analyze/<label>``; a finished
    run there is picked up through the trainer state instead of being retrained.
    """
    given = cfg.analyze.checkpoints.get(label)
    if given is not None:
        return given
    cell_dir = Path(cfg.output_dir, "analyze", label)
    logger.info(f"training {label} for the analysis")
    return cmd_train(_with_overrides(cfg, {**overrides, "output_dir": str(cell_dir)}), noisy=noisy)


def probe_batches(cfg: RunConfig, L: int) -> List[torch.Tensor]:
    """Deterministic un-augmented clip batches from ``analyze.split``."""
    videos = [v for v in load_split(cfg.data_root, cfg.analyze.split) if v.length >= L]
    if not videos:
        raise ConfigError(f"no video of split {cfg.analyze.split} has {L} frames", field="analyze.split")
    batches: List[torch.Tensor] = []
    for b in range(cfg.analyze.probe_batches):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.train.seed, b]))
        clips = []
        for _ in range(cfg.train.batch_size):
            v = videos[int(rng.integers(0, len(videos)))]
            clips.append(sample_clip(v, int(rng.integers(0, v.length - L + 1)), L, 0))
        batches.append(collate_clips(clips)["frames"])
    return batches


def cmd_analyze(cfg: RunConfig, noisy: bool = False, timezone: str = "UTC") -> pd.DataFrame:
    """Token-discriminability profiles or per-layer pyramid mAP; CSV + plot."""
    _ensure_dataset(cfg, noisy)
    out = cfg.output_dir
    kind = cfg.analyze.kind
    seed_everything(cfg.train.seed)
    extra: List[Path] = []
    if kind == "discriminability":
        frames = probe_batches(cfg, cfg.model.clip_length)
        parts = []
        for module in cfg.analyze.modules:
            ckpt = _analysis_checkpoint(cfg, module, {"model.temporal_module": module}, noisy)
            model = load_checkpoint(ckpt, device="cpu")
            parts.append(discriminability_profile(model, frames, label=module))
        df = pd.concat(parts, ignore_index=True)
        summary = discriminability_summary(df)
        for row in summary.itertuples():
            logger.info(
                f"{row.module}: final similarity {row.final_similarity:.4f}, "
                f"non-decreasing over {row.non_decreasing_fraction:.0%} of layer pairs (rising={row.rising})"
            )
        extra.append(write_csv(summary, Path(out, "discriminability_summary.csv")))
    else:
        ckpt = _analysis_checkpoint(
            cfg, "sgp_pyramid", {"model.temporal_module": "sgp_pyramid", "model.head_mode": "displacement"}, noisy
        )
        model = load_checkpoint(ckpt, device="cpu")
        videos = load_split(cfg.data_root, cfg.analyze.split)
        df = pyramid_layer_map(model, videos, cfg.infer, cfg.analyze.delta)
    csv_path = Path(out, f"{kind}.csv")
    png = write_table_and_plot(df, csv_path, kind)  # type: ignore[arg-type]
    write_manifest(out, f"analyze:{kind}", run_config_hash(cfg), cfg.train.seed, [csv_path, png, *extra], timezone)
    return df


# ---------------------------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------------------------


def _resolve_config(
    config: Optional[Path],
    overrides: Optional[List[str]],
    output_dir: Optional[Path],
    output_root: Optional[Path],
    seed: Optional[int],
    device: Optional[str],
) -> RunConfig:
    sets = list(overrides or [])
    if seed is not None:
        sets.append(f"seed={seed}")
    if device is not None:
        sets.append(f"train.device={device}")
    if output_dir is not None:
        sets.append(f"output_dir={output_dir}")
    cfg = load_run_config(config, sets)
    if output_root is not None and not cfg.output_dir.is_absolute():
        cfg = _with_overrides(cfg, {"output_dir": str(Path(output_root, cfg.output_dir))})
    return cfg


def _run(
    action: str,
    config: Optional[Path] = None,
    overrides: Optional[List[str]] = None,
    output_dir: Optional[Path] = None,
    output_root: Optional[Path] = None,
    seed: Optional[int] = None,
    device: Optional[str] = None,
    num_threads: Optional[int] = None,
    timezone_name: Optional[str] = None,
    study: Optional[str] = None,
    kind: Optional[str] = None,
    csv_path: Optional[Path] = None,
    out: Optional[Path] = None,
    noisy: Optional[bool] = None,
) -> None:
    """Execute the requested CLI action.

    Args:
        action: One of ``gen``, ``train``, ``eval``, ``ablate``, ``analyze``, ``plot``.
        config: YAML run configuration (defaults apply when ``None``).
        overrides: ``dotted.key=value`` overrides.
        output_dir: Overrides ``output_dir`` of the run configuration.
        output_root: Base directory for relative output directories.
        seed: Master seed.
        device: Torch device.
        num_threads: Torch intra-op threads.
        timezone_name: Timezone of manifest timestamps (defaults to ``UTC``).
        study: Study of ``ablate`` (overrides ``ablate.study``).
        kind: Analysis kind of ``analyze`` or plot kind of ``plot``.
        csv_path: Input table of ``plot``.
        out: Output image of ``plot``.
        noisy: Log per-step / per-video records.
    """
    tdeedspot.configure_loguru_default_with_skiplog_filter()
    logger.enable("tdeedspot")

    noisy = bool(noisy)
    tz = timezone_name or "UTC"
    if num_threads:
        torch.set_num_threads(num_threads)

    if action == "plot":
        if csv_path is None or kind is None:
            raise ConfigError("plot needs a CSV and --kind")
        fp = regenerate_plot(csv_path, kind, out)  # type: ignore[arg-type]
        logger.info(f"wrote {fp}")
        return

    sets = list(overrides or [])
    if action == "ablate" and study:
        sets.append(f"ablate.study={study}")
    if action == "analyze" and kind:
        sets.append(f"analyze.kind={kind}")
    cfg = _resolve_config(config, sets, output_dir, output_root, seed, device)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)

    match action:
        case "gen":
            written = cmd_gen(cfg, noisy, tz)
            logger.info(f"wrote {len(written)} files below {cfg.data_root}")
        case "train":
            ckpt = cmd_train(cfg, noisy, tz)
            logger.info(f"checkpoint: {ckpt}")
        case "eval":
            cmd_eval(cfg, noisy, tz)
        case "ablate":
            cmd_ablate(cfg, noisy, tz)
        case "analyze":
            cmd_analyze(cfg, noisy, tz)
        case _:
            raise ConfigError(f"unknown action: {action}")


def _add_run_options(p: Any) -> None:
    p.add_argument("--config", type=Path, default=None, help="YAML run configuration")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a configuration leaf by dotted path, e.g. train.epochs=2 (repeatable)",
    )
    p.add_argument("--output-dir", type=Path, default=None, help="Directory receiving every artifact of the run")
    p.add_argument("--seed", type=int, default=None, help="Master seed (data generation and training)")
    p.add_argument("--noisy", action="store_true", default=False, help="Log per-step and per-video records")


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point for the tdeedspot CLI.

    Args:
        argv: Command-line arguments. Defaults to ``sys.argv[1:]``.

    Returns:
        int: Process exit code.
    """
    import argparse

    parser = argparse.ArgumentParser(description="tdeedspot CLI")
    parser.add_argument("--device", type=str, default=None, help="Torch device, e.g. cpu or cuda:0")
    parser.add_argument("--num-threads", type=int, default=None, help="Torch intra-op threads")
    parser.add_argument("--timezone", dest="timezone_name", type=str, default=None, help="Timezone of manifest timestamps")
    parser.add_argument("--output-root", type=Path, default=None, help="Base directory for relative output dirs")

    sub = parser.add_subparsers(dest="action", required=True)

    _add_run_options(sub.add_parser("gen", help="Generate the synthetic train/val/test splits"))
    _add_run_options(sub.add_parser("train", help="Train a model (resumes from trainer_state.pt when present)"))
    _add_run_options(sub.add_parser("eval", help="Evaluate a checkpoint or predictions file at every delta"))

    p_abl = sub.add_parser("ablate", help="Run an ablation study over several seeds")
    _add_run_options(p_abl)
    p_abl.add_argument(
        "--study",
        choices=["temporal_module", "skip_variant", "head_mode", "pyramid", "shift_module", "clip_length", "postproc"],
        default=None,
        help="Study to run (defaults to ablate.study of the configuration)",
    )

    p_an = sub.add_parser("analyze", help="Token discriminability or per-layer pyramid mAP")
    _add_run_options(p_an)
    p_an.add_argument("--kind", choices=["discriminability", "pyramid_layers"], default=None)

    p_plot = sub.add_parser("plot", help="Regenerate a plot from its CSV")
    p_plot.add_argument("csv_path", type=Path, help="Input CSV")
    p_plot.add_argument("--kind", choices=list(PLOT_KINDS), required=True)
    p_plot.add_argument("--out", type=Path, default=None, help="Output PNG (defaults to the CSV path with .png)")

    args = parser.parse_args(argv)

    try:
        _run(
            action=args.action,
            config=getattr(args, "config", None),
            overrides=getattr(args, "overrides", None),
            output_dir=getattr(args, "output_dir", None),
            output_root=args.output_root,
            seed=getattr(args, "seed", None),
            device=args.device,
            num_threads=args.num_threads,
            timezone_name=args.timezone_name,
            study=getattr(args, "study", None),
            kind=getattr(args, "kind", None),
            csv_path=getattr(args, "csv_path", None),
            out=getattr(args, "out", None),
            noisy=getattr(args, "noisy", None),
        )
    except ConfigError as e:
        logger.error(f"configuration error: {e}")
        return EXIT_CONFIG
    except TdeedError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_FAILURE
    except Exception as e:
        logger.error(Helper.get_exception_tb_as_string(e))
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
