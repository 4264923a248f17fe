from pathlib import Path
from typing import List

import numpy as np
import pytest

from tdeedspot.errors import ContractError
from tdeedspot.storage import (
    annotations_path,
    ground_truth_from_annotations,
    load_split,
    packed_path,
    read_annotations,
    read_packed,
    save_split,
)
from tdeedspot.synthdata import SyntheticVideo


@pytest.mark.parametrize("storage", ["packed", "npz"])
def test_split_survives_disk(tmp_path: Path, tiny_videos: List[SyntheticVideo], storage: str) -> None:
    written = save_split(tmp_path, "train", tiny_videos, storage=storage)  # type: ignore[arg-type]
    assert annotations_path(tmp_path, "train") in written
    loaded = load_split(tmp_path, "train")
    assert [v.video_id for v in loaded] == [v.video_id for v in tiny_videos]
    for a, b in zip(loaded, tiny_videos):
        assert np.array_equal(a.frames, b.frames)
        assert a.events == b.events
        assert a.num_classes == b.num_classes


def test_annotation_document_layout(tmp_path: Path, tiny_videos: List[SyntheticVideo]) -> None:
    save_split(tmp_path, "val", tiny_videos)
    num_classes, videos = read_annotations(annotations_path(tmp_path, "val"))
    assert num_classes == 4
    assert videos[0]["id"] == tiny_videos[0].video_id
    assert videos[0]["length"] == 64
    gts = ground_truth_from_annotations(annotations_path(tmp_path, "val"))
    assert len(gts) == sum(len(v.events) for v in tiny_videos)


def test_packed_header_and_f32_payload(tmp_path: Path, tiny_videos: List[SyntheticVideo]) -> None:
    save_split(tmp_path, "test", tiny_videos, pixel_format="f32")
    raw = packed_path(tmp_path, "test").read_bytes()
    assert raw[:5] == b"PESV1"
    assert raw[5] == 1
    frames = read_packed(packed_path(tmp_path, "test"))
    vid = tiny_videos[0].video_id
    assert frames[vid].dtype == np.float32
    assert np.allclose(frames[vid], tiny_videos[0].frames_float())


def test_packed_save_is_byte_stable(tmp_path: Path, tiny_videos: List[SyntheticVideo]) -> None:
    save_split(Path(tmp_path, "a"), "train", tiny_videos)
    save_split(Path(tmp_path, "b"), "train", tiny_videos)
    for fp in (annotations_path, packed_path):
        assert fp(Path(tmp_path, "a"), "train").read_bytes() == fp(Path(tmp_path, "b"), "train").read_bytes()


def test_bad_magic(tmp_path: Path) -> None:
    fp = Path(tmp_path, "x.pesv")
    fp.write_bytes(b"NOPE!" + bytes(17))
    with pytest.raises(ContractError):
        read_packed(fp)
