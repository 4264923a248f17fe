from pathlib import Path

import pytest

from tdeedspot.errors import ConfigError
from tdeedspot.models import (
    GeneratorSpec,
    ModelCfg,
    RunConfig,
    SgpCfg,
    TrainCfg,
    build_config,
    load_run_config,
)


def test_sparsity_presets_resolve() -> None:
    assert GeneratorSpec(sparsity="fs-like").sparsity == pytest.approx(0.0023)
    assert GeneratorSpec(sparsity="fd-like").sparsity == pytest.approx(0.022)


def test_events_per_video_is_floor_of_density() -> None:
    assert GeneratorSpec(video_length=1000, sparsity=0.002).events_per_video == 2
    assert GeneratorSpec(video_length=1000, sparsity=0.022).events_per_video == 22


@pytest.mark.parametrize(
    "raw, field",
    [
        ({"C": 1}, "num_classes"),
        ({"sparsity": 0.2}, "sparsity"),
        ({"video_length": 300, "clip_length": 100}, "video_length"),
    ],
)
def test_generator_errors_name_the_field(raw: dict, field: str) -> None:
    with pytest.raises(ConfigError) as ei:
        build_config(GeneratorSpec, raw)
    assert ei.value.field == field


def test_unknown_keys_are_rejected() -> None:
    with pytest.raises(ConfigError):
        build_config(RunConfig, {"train": {"epochz": 3}})


def test_warmup_must_be_shorter_than_training() -> None:
    with pytest.raises(ConfigError) as ei:
        build_config(TrainCfg, {"epochs": 3, "warmup_epochs": 3})
    assert ei.value.field == "warmup_epochs"


def test_steps_per_epoch() -> None:
    assert TrainCfg(clips_per_epoch=5000, batch_size=8).steps_per_epoch == 625


def test_group_norm_groups_nearest_to_eight() -> None:
    cfg = SgpCfg()
    assert cfg.groups_for(368) == 8
    assert cfg.groups_for(6) == 6
    assert cfg.groups_for(16) == 8
    assert cfg.groups_for(12) == 6


def test_pyramid_rejects_dilation_head() -> None:
    with pytest.raises(ConfigError):
        build_config(ModelCfg, {"temporal_module": "sgp_pyramid", "head_mode": "dilation", "dilation": 1})


def test_like_variants_require_native_width() -> None:
    with pytest.raises(ConfigError):
        build_config(ModelCfg, {"backbone": {"variant": "200MF-like", "d": 64}})
    assert build_config(ModelCfg, {"backbone": {"variant": "200MF-like", "d": 368}}).backbone.d == 368


def test_head_mode_presets() -> None:
    cfg = ModelCfg()
    dil1 = cfg.with_head_preset("dil1")
    assert dil1.head_mode == "dilation" and dil1.dilation == 1 and not dil1.uses_displacement
    assert cfg.with_head_preset("rE1").radius == 1
    with pytest.raises(ConfigError):
        cfg.with_head_preset("rE7")


def test_master_seed_propagates() -> None:
    cfg = build_config(RunConfig, {"seed": 11})
    assert cfg.data.generator.seed == 11
    assert cfg.train.seed == 11


def test_class_count_must_agree() -> None:
    with pytest.raises(ConfigError) as ei:
        build_config(RunConfig, {"model": {"C": 3}})
    assert ei.value.field == "model.num_classes"


def test_load_run_config_applies_dotted_overrides(tmp_path: Path) -> None:
    fp = Path(tmp_path, "run.yaml")
    fp.write_text("train:\n  epochs: 4\n  warmup_epochs: 1\n", encoding="utf-8")
    cfg = load_run_config(fp, ["train.epochs=6", "eval.deltas=[0,1,2]", "model.skip=sum"])
    assert cfg.train.epochs == 6
    assert cfg.train.warmup_epochs == 1
    assert cfg.eval.deltas == [0, 1, 2]
    assert cfg.model.skip == "sum"


def test_load_run_config_rejects_malformed_override() -> None:
    with pytest.raises(ConfigError):
        load_run_config(None, ["train.epochs"])
