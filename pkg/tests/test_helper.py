from pathlib import Path

import pytest

from tdeedspot import Helper


def test_update_deep_merges_nested_dicts() -> None:
    base = {"a": {"b": 1, "c": 2}, "l": [1, 2, 3]}
    out = Helper.update_deep(base, {"a": {"c": 5}, "l": [9]})
    assert out == {"a": {"b": 1, "c": 5}, "l": [9]}


def test_dotted_overrides_parse_yaml_scalars() -> None:
    raw = Helper.apply_dotted_overrides({"train": {"epochs": 50}}, ["train.epochs=2", "eval.deltas=[1, 2]", "model.skip=none"])
    assert raw == {"train": {"epochs": 2}, "eval": {"deltas": [1, 2]}, "model": {"skip": "none"}}
    with pytest.raises(ValueError):
        Helper.apply_dotted_overrides({}, ["train.epochs"])


def test_config_hash_ignores_key_order() -> None:
    assert Helper.config_hash({"a": 1, "b": [1, 2]}) == Helper.config_hash({"b": [1, 2], "a": 1})
    assert Helper.config_hash({"a": 1}) != Helper.config_hash({"a": 2})


def test_sha256_file(tmp_path: Path) -> None:
    fp = Path(tmp_path, "x.bin")
    fp.write_bytes(b"abc")
    assert Helper.sha256_file(fp, chunk_size=2) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def test_exception_traceback_string() -> None:
    try:
        raise RuntimeError("boom")
    except RuntimeError as e:
        tb = Helper.get_exception_tb_as_string(e)
    assert "RuntimeError: boom" in tb
