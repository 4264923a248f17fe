"""Persistence of synthetic datasets.

Annotations: one JSON document per split::

    {"num_classes": C, "videos": [{"id": ..., "length": T, "fps": 25.0,
                                   "events": [{"frame": f, "class": c}, ...]}, ...]}

Frames: either one packed binary per split (``<split>.pesv``) or one compressed ``.npz`` per
video (``<split>_frames/<video_id>.npz``). The packed layout is::

    b"PESV1" | u8 flag (0 = u8 pixels, 1 = f32 pixels) | u32 count | u32 H | u32 W | u32 channels
    then per video: u32 T | u16 id_len | id (utf-8) | T*H*W*channels pixels, row-major, little-endian
"""

import json
import struct
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from loguru import logger as glogger

from tdeedspot.Helper import get_pretty_dict_json_no_sort
from tdeedspot.errors import ContractError
from tdeedspot.models import EventAnnotation
from tdeedspot.synthdata import SyntheticVideo

PESV_MAGIC: bytes = b"PESV1"
_HEADER = struct.Struct("<5sBIIII")
_VIDEO_HEADER = struct.Struct("<IH")


def annotations_path(root: Path, split: str) -> Path:
    """Annotation JSON of a split."""
    return Path(root, f"{split}.json")


def packed_path(root: Path, split: str) -> Path:
    """Packed frame file of a split."""
    return Path(root, f"{split}.pesv")


def npz_dir(root: Path, split: str) -> Path:
    """Directory holding the per-video npz files of a split."""
    return Path(root, f"{split}_frames")


def write_annotations(fp: Path, videos: List[SyntheticVideo]) -> Path:
    """Write the annotation JSON of a split."""
    doc: Dict[str, Any] = {
        "num_classes": videos[0].num_classes if videos else 0,
        "videos": [
            {
                "id": v.video_id,
                "length": v.length,
                "fps": v.fps,
                "events": [{"frame": e.frame, "class": e.class_id} for e in v.events],
            }
            for v in videos
        ],
    }
    fp.parent.mkdir(parents=True, exist_ok=True)
    with open(fp, "w", encoding="utf-8") as fout:
        fout.write(get_pretty_dict_json_no_sort(doc, indent=2))
        fout.write("\n")
    return fp


def read_annotations(fp: Path) -> Tuple[int, List[Dict[str, Any]]]:
    """Read an annotation JSON.

    Returns:
        tuple: ``(num_classes, videos)`` where each video dict carries ``id``, ``length``,
        ``fps`` and ``events`` (a list of :class:`EventAnnotation`).
    """
    with open(fp, encoding="utf-8") as fin:
        doc = json.load(fin)
    videos: List[Dict[str, Any]] = []
    num_classes = int(doc.get("num_classes", 0))
    for v in doc["videos"]:
        events = sorted(
            (EventAnnotation(video_id=v["id"], frame=int(e["frame"]), class_id=int(e["class"])) for e in v["events"]),
            key=lambda e: e.frame,
        )
        num_classes = max([num_classes] + [e.class_id for e in events])
        videos.append({"id": v["id"], "length": int(v["length"]), "fps": float(v.get("fps", 25.0)), "events": events})
    return num_classes, videos


def ground_truth_from_annotations(fp: Path) -> List[EventAnnotation]:
    """All ground-truth events of an annotation file, flattened."""
    _, videos = read_annotations(fp)
    return [e for v in videos for e in v["events"]]


def write_packed(fp: Path, videos: List[SyntheticVideo], pixel_format: Literal["u8", "f32"] = "u8") -> Path:
    """Write all frames of a split into one packed PESV1 file."""
    if not videos:
        raise ContractError("cannot pack an empty split")
    _, H, W, Cc = videos[0].frames.shape
    flag = 0 if pixel_format == "u8" else 1
    fp.parent.mkdir(parents=True, exist_ok=True)
    with open(fp, "wb") as fout:
        fout.write(_HEADER.pack(PESV_MAGIC, flag, len(videos), H, W, Cc))
        for v in videos:
            if v.frames.shape[1:] != (H, W, Cc):
                raise ContractError(f"{v.video_id}: frame dims {v.frames.shape[1:]} != {(H, W, Cc)}")
            vid = v.video_id.encode("utf-8")
            fout.write(_VIDEO_HEADER.pack(v.length, len(vid)))
            fout.write(vid)
            if flag == 0:
                px = v.frames if v.frames.dtype == np.uint8 else np.round(np.clip(v.frames, 0, 1) * 255).astype(np.uint8)
                fout.write(np.ascontiguousarray(px).tobytes())
            else:
                fout.write(np.ascontiguousarray(v.frames_float(), dtype="<f4").tobytes())
    return fp


def read_packed(fp: Path) -> Dict[str, np.ndarray]:
    """Read a packed PESV1 file into ``video_id -> frames``."""
    with open(fp, "rb") as fin:
        buf = fin.read()
    magic, flag, count, H, W, Cc = _HEADER.unpack_from(buf, 0)
    if magic != PESV_MAGIC:
        raise ContractError(f"{fp}: not a PESV1 file (magic {magic!r})")
    dtype = np.dtype(np.uint8) if flag == 0 else np.dtype("<f4")
    off = _HEADER.size
    ret: Dict[str, np.ndarray] = {}
    for _ in range(count):
        T, id_len = _VIDEO_HEADER.unpack_from(buf, off)
        off += _VIDEO_HEADER.size
        vid = buf[off : off + id_len].decode("utf-8")
        off += id_len
        n = T * H * W * Cc
        arr = np.frombuffer(buf, dtype=dtype, count=n, offset=off).reshape(T, H, W, Cc)
        off += n * dtype.itemsize
        ret[vid] = arr.astype(np.float32) if flag == 1 else arr.copy()
    return ret


def save_split(
    root: Path,
    split: str,
    videos: List[SyntheticVideo],
    storage: Literal["packed", "npz"] = "packed",
    pixel_format: Literal["u8", "f32"] = "u8",
    noisy: bool = False,
) -> List[Path]:
    """Persist a split (annotations + frames).

    Returns:
        list[Path]: Every file written.
    """
    logger = glogger.bind(classname="storage", skiplog=not noisy)
    written = [write_annotations(annotations_path(root, split), videos)]
    if storage == "packed":
        written.append(write_packed(packed_path(root, split), videos, pixel_format))
    else:
        d = npz_dir(root, split)
        d.mkdir(parents=True, exist_ok=True)
        for v in videos:
            fp = Path(d, f"{v.video_id}.npz")
            np.savez_compressed(fp, frames=v.frames)
            written.append(fp)
    logger.info(f"split {split}: {len(videos)} videos written below {root}")
    return written


def load_split(root: Path, split: str, limit: Optional[int] = None) -> List[SyntheticVideo]:
    """Load a split written by :func:`save_split` (either storage layout)."""
    num_classes, metas = read_annotations(annotations_path(root, split))
    if limit is not None:
        metas = metas[:limit]
    pp = packed_path(root, split)
    frames_by_id: Dict[str, np.ndarray] = read_packed(pp) if pp.exists() else {}
    videos: List[SyntheticVideo] = []
    for m in metas:
        if m["id"] in frames_by_id:
            frames = frames_by_id[m["id"]]
        else:
            with np.load(Path(npz_dir(root, split), f"{m['id']}.npz")) as z:
                frames = z["frames"]
        if frames.shape[0] != m["length"]:
            raise ContractError(f"{m['id']}: {frames.shape[0]} frames stored, annotations say {m['length']}")
        videos.append(
            SyntheticVideo(video_id=m["id"], frames=frames, events=m["events"], num_classes=num_classes, fps=m["fps"])
        )
    return videos
