"""CSV tables, static plots and run manifests.

Every plot is a pure function of its CSV: :func:`regenerate_plot` reads the table back and
renders it with a fixed style, so the same CSV always yields the same PNG bytes.
"""

import datetime
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Literal, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd
import pytz
from loguru import logger as glogger

import tdeedspot
from tdeedspot.Helper import get_pretty_dict_json_no_sort, sha256_file
from tdeedspot.errors import ContractError

PlotKind = Literal["metrics", "study", "discriminability", "pyramid_layers"]
PLOT_KINDS = ("metrics", "study", "discriminability", "pyramid_layers")

MANIFEST_FILE: str = "manifest.json"

_STYLE: Dict[str, Any] = {
    "figure.figsize": (7.0, 4.0),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
}

logger = glogger.bind(classname="reporting")


def write_csv(df: pd.DataFrame, fp: Path) -> Path:
    """Write ``df`` with a fixed float format (bitwise stable across re-runs)."""
    fp.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(fp, index=False, float_format="%.10g")
    return fp


def _save(fig: "plt.Figure", fp: Path) -> Path:
    fp.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(fp, format="png", metadata={"Software": None})
    plt.close(fig)
    return fp


def _require(df: pd.DataFrame, kind: str, *columns: str) -> None:
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise ContractError(f"{kind} plot needs columns {missing}, have {list(df.columns)}")


def plot_metrics(df: pd.DataFrame, fp: Path) -> Path:
    """Training curves: losses on the left axis, validation mAP on the right."""
    _require(df, "metrics", "epoch", "loss_c", "loss_d")
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot(df["epoch"], df["loss_c"], label="L_c", color="tab:blue")
        ax.plot(df["epoch"], df["loss_d"], label="L_d", color="tab:orange")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        val_cols = [c for c in df.columns if c.startswith("val_map")]
        if val_cols and df[val_cols[0]].notna().any():
            ax2 = ax.twinx()
            ax2.plot(df["epoch"], df[val_cols[0]], label=val_cols[0], color="tab:green", marker="o", ms=3)
            ax2.set_ylabel("mAP")
            ax2.set_ylim(0.0, 1.0)
            ax2.legend(loc="upper right")
        ax.legend(loc="upper left")
        return _save(fig, fp)


def plot_study(df: pd.DataFrame, fp: Path) -> Path:
    """Bar chart of the per-cell mean mAP of an ablation study."""
    _require(df, "study", "cell")
    map_cols = [c for c in df.columns if c.startswith("map_d") and not c.endswith("_std")]
    if not map_cols:
        raise ContractError("study plot needs at least one map_d<delta> column")
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        n = len(map_cols)
        width = 0.8 / n
        xs = list(range(len(df)))
        for i, col in enumerate(map_cols):
            err = df[f"{col}_std"] if f"{col}_std" in df.columns else None
            ax.bar([x + (i - (n - 1) / 2) * width for x in xs], df[col], width, yerr=err, label=col, capsize=2)
        ax.set_xticks(xs)
        ax.set_xticklabels([str(c) for c in df["cell"]], rotation=20, ha="right")
        ax.set_ylabel("mAP")
        ax.set_ylim(0.0, 1.0)
        if "study" in df.columns and len(df):
            ax.set_title(str(df["study"].iloc[0]))
        ax.legend()
        return _save(fig, fp)


def plot_discriminability(df: pd.DataFrame, fp: Path) -> Path:
    """Per-stage mean cosine similarity, one line per temporal module."""
    _require(df, "discriminability", "module", "stage_index", "stage", "similarity")
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for module, part in df.groupby("module", sort=False):
            part = part.sort_values("stage_index")
            ax.plot(part["stage_index"], part["similarity"], marker="o", ms=3, label=str(module))
        longest = df.loc[df.groupby("module", sort=False)["stage_index"].transform("size").idxmax()]["module"]
        ticks = df[df["module"] == longest].sort_values("stage_index")
        ax.set_xticks(ticks["stage_index"])
        ax.set_xticklabels(ticks["stage"], rotation=30, ha="right")
        ax.set_ylabel("mean cosine similarity")
        ax.legend()
        return _save(fig, fp)


def plot_pyramid(df: pd.DataFrame, fp: Path) -> Path:
    """Standalone and cumulative mAP per pyramid layer."""
    _require(df, "pyramid_layers", "layer", "standalone_map", "cumulative_map")
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot(df["layer"], df["standalone_map"], marker="o", label="standalone")
        ax.plot(df["layer"], df["cumulative_map"], marker="s", label="cumulative")
        ax.set_xticks(df["layer"])
        ax.set_xlabel("pyramid layer")
        ax.set_ylabel("mAP")
        ax.set_ylim(0.0, 1.0)
        ax.legend()
        return _save(fig, fp)


_PLOTTERS: Dict[str, Callable[[pd.DataFrame, Path], Path]] = {
    "metrics": plot_metrics,
    "study": plot_study,
    "discriminability": plot_discriminability,
    "pyramid_layers": plot_pyramid,
}


def plot_table(df: pd.DataFrame, kind: PlotKind, fp: Path) -> Path:
    if kind not in _PLOTTERS:
        raise ContractError(f"unknown plot kind {kind!r}, expected one of {PLOT_KINDS}")
    return _PLOTTERS[kind](df, fp)


def regenerate_plot(csv_path: Path, kind: PlotKind, out: Optional[Path] = None) -> Path:
    """Render ``csv_path`` as ``kind``; the PNG goes next to the CSV unless ``out`` is given."""
    df = pd.read_csv(csv_path)
    fp = out or csv_path.with_suffix(".png")
    logger.debug(f"plotting {csv_path} as {kind} -> {fp}")
    return plot_table(df, kind, fp)


def write_table_and_plot(df: pd.DataFrame, csv_path: Path, kind: PlotKind) -> Path:
    """Write the CSV, then render the plot from the file just written."""
    write_csv(df, csv_path)
    return regenerate_plot(csv_path, kind)


def write_manifest(
    out_dir: Path,
    command: str,
    config_hash: str,
    seed: Optional[int],
    artifacts: Iterable[Path],
    timezone: datetime.tzinfo | str = "UTC",
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write ``manifest.json`` with the command, config hash, seed and artifact checksums."""
    tz = pytz.timezone(timezone) if isinstance(timezone, str) else timezone
    files: Dict[str, str] = {}
    for a in sorted({Path(p) for p in artifacts}):
        if a.is_file():
            try:
                key = str(a.relative_to(out_dir))
            except ValueError:
                key = str(a)
            files[key] = sha256_file(a)
    doc: Dict[str, Any] = {
        "command": command,
        "version": tdeedspot.__version__,
        "config_hash": config_hash,
        "seed": seed,
        "timestamp": datetime.datetime.now(tz).isoformat(),
        "artifacts": files,
    }
    if extra:
        doc["extra"] = extra
    fp = Path(out_dir, MANIFEST_FILE)
    fp.parent.mkdir(parents=True, exist_ok=True)
    with open(fp, "w", encoding="utf-8") as fout:
        fout.write(get_pretty_dict_json_no_sort(doc, indent=2))
        fout.write("\n")
    return fp
