import json
from pathlib import Path

import pytest
import torch

from tdeedspot.checkpoint import (
    BEST_FILE,
    CONFIG_FILE,
    MODEL_FILE,
    TDCK_MAGIC,
    load_checkpoint,
    read_tensors,
    save_checkpoint,
    write_tensors,
)
from tdeedspot.errors import ContractError
from tdeedspot.models import ModelCfg
from tdeedspot.tdeed import build_model


def test_file_starts_with_magic(tmp_path: Path, tiny_model_cfg: ModelCfg) -> None:
    fp = save_checkpoint(tmp_path, build_model(tiny_model_cfg, seed=0))
    assert fp.name == MODEL_FILE
    assert fp.read_bytes()[:5] == TDCK_MAGIC
    assert Path(tmp_path, CONFIG_FILE).exists()


def test_tensors_keep_names_and_shapes(tmp_path: Path) -> None:
    tensors = {"a": torch.arange(6, dtype=torch.float32).view(2, 3), "scalar": torch.tensor(7.0), "count": torch.tensor(3)}
    loaded = read_tensors(write_tensors(Path(tmp_path, "t.tdck"), tensors))
    assert list(loaded) == ["a", "scalar", "count"]
    assert torch.equal(loaded["a"], tensors["a"])
    assert loaded["scalar"].shape == ()
    assert loaded["count"].item() == 3.0


def test_reload_reproduces_outputs_bitwise(
    tmp_path: Path, tiny_model_cfg: ModelCfg, clip_batch: torch.Tensor
) -> None:
    model = build_model(tiny_model_cfg, seed=4).eval()
    save_checkpoint(tmp_path, model)
    again = load_checkpoint(tmp_path)
    assert not again.training
    with torch.no_grad():
        a, b = model(clip_batch), again(clip_batch)
    assert torch.equal(a.class_probs, b.class_probs)
    assert torch.equal(a.displacements, b.displacements)


def test_architecture_mismatch(tmp_path: Path, tiny_model_cfg: ModelCfg) -> None:
    save_checkpoint(tmp_path, build_model(tiny_model_cfg, seed=0))
    fp = Path(tmp_path, CONFIG_FILE)
    raw = json.loads(fp.read_text())
    raw["num_blocks"] = 3
    fp.write_text(json.dumps(raw))
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path)


def test_best_is_preferred(tmp_path: Path, tiny_model_cfg: ModelCfg) -> None:
    last = build_model(tiny_model_cfg, seed=0)
    best = build_model(tiny_model_cfg, seed=1)
    save_checkpoint(tmp_path, last)
    assert load_checkpoint(tmp_path).state_dict()["heads.0.cls.weight"].equal(
        last.state_dict()["heads.0.cls.weight"]
    )
    write_tensors(Path(tmp_path, BEST_FILE), best.state_dict())
    loaded = load_checkpoint(tmp_path).state_dict()
    assert all(torch.equal(loaded[k].float(), v.float()) for k, v in best.state_dict().items())
    explicit = load_checkpoint(tmp_path, MODEL_FILE).state_dict()
    assert all(torch.equal(explicit[k].float(), v.float()) for k, v in last.state_dict().items())
