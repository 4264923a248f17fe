import hashlib
import json
from pathlib import Path

import pandas as pd
import pytest

import tdeedspot
from tdeedspot.errors import ContractError
from tdeedspot.reporting import (
    MANIFEST_FILE,
    PLOT_KINDS,
    plot_table,
    regenerate_plot,
    write_csv,
    write_manifest,
    write_table_and_plot,
)

TABLES = {
    "metrics": pd.DataFrame(
        {
            "epoch": [0, 1, 2],
            "lr": [1e-4, 2e-4, 1e-4],
            "loss": [3.0, 2.5, 2.1],
            "loss_c": [2.0, 1.8, 1.5],
            "loss_d": [1.0, 0.7, 0.6],
            "val_map_d1": [0.1, 0.25, 0.3],
        }
    ),
    "study": pd.DataFrame(
        {
            "study": ["skip_variant"] * 2,
            "cell": ["sgp_mixer", "none"],
            "map_d1": [0.6, 0.4],
            "map_d1_std": [0.02, 0.05],
            "map_d2": [0.7, 0.5],
            "map_d2_std": [0.01, 0.03],
        }
    ),
    "discriminability": pd.DataFrame(
        {
            "module": ["sgp_ed"] * 3 + ["gru"] * 2,
            "stage_index": [0, 1, 2, 0, 1],
            "stage": ["backbone", "positional", "enc0", "backbone", "positional"],
            "similarity": [0.5, 0.55, 0.4, 0.5, 0.7],
        }
    ),
    "pyramid_layers": pd.DataFrame(
        {"layer": [0, 1, 2], "stride": [1, 2, 4], "standalone_map": [0.5, 0.3, 0.1], "cumulative_map": [0.5, 0.55, 0.52]}
    ),
}


@pytest.mark.parametrize("kind", PLOT_KINDS)
def test_plot_regeneration_is_byte_identical(tmp_path: Path, kind: str) -> None:
    csv_path = write_csv(TABLES[kind], Path(tmp_path, f"{kind}.csv"))
    first = regenerate_plot(csv_path, kind)  # type: ignore[arg-type]
    assert first == csv_path.with_suffix(".png")
    blob = first.read_bytes()
    assert blob[:8] == b"\x89PNG\r\n\x1a\n"
    again = regenerate_plot(csv_path, kind, Path(tmp_path, "again.png"))  # type: ignore[arg-type]
    assert again.read_bytes() == blob


def test_csv_is_stable(tmp_path: Path) -> None:
    a = write_csv(TABLES["metrics"], Path(tmp_path, "a.csv")).read_bytes()
    b = write_csv(pd.read_csv(Path(tmp_path, "a.csv")), Path(tmp_path, "b.csv")).read_bytes()
    assert a == b


def test_unknown_kind_and_missing_columns(tmp_path: Path) -> None:
    with pytest.raises(ContractError):
        plot_table(TABLES["metrics"], "histogram", Path(tmp_path, "x.png"))  # type: ignore[arg-type]
    with pytest.raises(ContractError):
        plot_table(TABLES["metrics"], "pyramid_layers", Path(tmp_path, "x.png"))


def test_manifest_hashes_artifacts(tmp_path: Path) -> None:
    png = write_table_and_plot(TABLES["study"], Path(tmp_path, "skip_variant.csv"), "study")
    csv_path = Path(tmp_path, "skip_variant.csv")
    fp = write_manifest(tmp_path, "ablate:skip_variant", "abc", 7, [csv_path, png, Path(tmp_path, "missing")], "UTC")
    assert fp.name == MANIFEST_FILE
    doc = json.loads(fp.read_text())
    assert doc["command"] == "ablate:skip_variant"
    assert doc["version"] == tdeedspot.__version__
    assert doc["seed"] == 7
    assert doc["timestamp"].endswith("+00:00")
    assert doc["artifacts"] == {
        "skip_variant.csv": hashlib.sha256(csv_path.read_bytes()).hexdigest(),
        "skip_variant.png": hashlib.sha256(png.read_bytes()).hexdigest(),
    }
