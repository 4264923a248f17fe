from pathlib import Path
from typing import Any, Callable, Dict, List

import pytest
import torch

from tdeedspot.models import BackboneCfg, GeneratorSpec, ModelCfg, RunConfig, build_config
from tdeedspot.synthdata import SyntheticVideo, generate_dataset


@pytest.fixture()
def tiny_spec() -> GeneratorSpec:
    return GeneratorSpec(
        num_videos=2, video_length=64, num_classes=4, sparsity=0.05, clip_length=16, frame_size=16, seed=3
    )


@pytest.fixture()
def tiny_videos(tiny_spec: GeneratorSpec) -> List[SyntheticVideo]:
    return generate_dataset(tiny_spec)


@pytest.fixture()
def tiny_backbone_cfg() -> BackboneCfg:
    return BackboneCfg(d=16, tiny_widths=(8, 8, 16, 16))


@pytest.fixture()
def tiny_model_cfg(tiny_backbone_cfg: BackboneCfg) -> ModelCfg:
    return ModelCfg(backbone=tiny_backbone_cfg, clip_length=16, num_blocks=2, k=2, num_classes=4, radius=1)


@pytest.fixture()
def clip_batch() -> torch.Tensor:
    g = torch.Generator().manual_seed(0)
    return torch.rand(2, 16, 3, 16, 16, generator=g)


def _tiny_run_raw(out: Path, **sections: Dict[str, Any]) -> Dict[str, Any]:
    """Smallest run configuration that trains end to end in a few seconds."""
    raw: Dict[str, Any] = {
        "seed": 0,
        "output_dir": str(out),
        "data": {
            "splits": {"train": 2, "val": 0, "test": 1},
            "generator": {
                "video_length": 64,
                "clip_length": 16,
                "frame_size": 16,
                "sparsity": 0.05,
                "C": 4,
            },
        },
        "model": {
            "L": 16,
            "B": 2,
            "C": 4,
            "r_E": 1,
            "backbone": {"d": 16, "tiny_widths": [8, 8, 16, 16]},
        },
        "augment": {"enabled": False, "mixup": False},
        "train": {"epochs": 2, "warmup_epochs": 1, "clips_per_epoch": 4, "batch_size": 2},
    }
    for name, upd in sections.items():
        raw.setdefault(name, {}).update(upd)
    return raw


@pytest.fixture()
def tiny_run_raw() -> Callable[..., Dict[str, Any]]:
    return _tiny_run_raw


@pytest.fixture()
def tiny_run(tmp_path: Path) -> RunConfig:
    return build_config(RunConfig, _tiny_run_raw(Path(tmp_path, "run")))
