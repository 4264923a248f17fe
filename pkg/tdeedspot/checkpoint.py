"""Flat named-tensor checkpoint format.

``<name>.tdck`` layout::

    b"TDCK1" | u32 count
    then per tensor: u16 name_len | name (utf-8) | u8 ndim | u32 dims[ndim] | prod(dims) little-endian f32

Integer buffers (BatchNorm step counters) are stored as f32 and cast back on load. The model
configuration is serialized next to the weights as ``model.json``.
"""

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import torch
from loguru import logger as glogger

from tdeedspot.Helper import get_pretty_dict_json_no_sort
from tdeedspot.errors import ContractError
from tdeedspot.models import ModelCfg, build_config
from tdeedspot.tdeed import TDEED

TDCK_MAGIC: bytes = b"TDCK1"
MODEL_FILE: str = "model.tdck"
BEST_FILE: str = "best.tdck"
CONFIG_FILE: str = "model.json"

logger = glogger.bind(classname="checkpoint")


def write_tensors(fp: Path, tensors: Dict[str, torch.Tensor]) -> Path:
    """Write named tensors in the flat checkpoint format."""
    fp.parent.mkdir(parents=True, exist_ok=True)
    with open(fp, "wb") as fout:
        fout.write(TDCK_MAGIC)
        fout.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            arr = t.detach().cpu().to(torch.float32).numpy()
            bname = name.encode("utf-8")
            fout.write(struct.pack("<H", len(bname)))
            fout.write(bname)
            fout.write(struct.pack("<B", arr.ndim))
            if arr.ndim:
                fout.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fout.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return fp


def read_tensors(fp: Path) -> "OrderedDict[str, torch.Tensor]":
    """Read a flat checkpoint into ``name -> float32 tensor``."""
    with open(fp, "rb") as fin:
        buf = fin.read()
    if buf[:5] != TDCK_MAGIC:
        raise ContractError(f"{fp}: not a TDCK1 checkpoint")
    (count,) = struct.unpack_from("<I", buf, 5)
    off = 9
    ret: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape: Tuple[int, ...] = struct.unpack_from(f"<{ndim}I", buf, off) if ndim else ()
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        ret[name] = torch.from_numpy(arr.astype(np.float32))
    return ret


def save_checkpoint(ckpt_dir: Path, model: TDEED, filename: str = MODEL_FILE) -> Path:
    """Write ``model``'s weights to ``ckpt_dir/filename`` and its configuration to ``model.json``."""
    fp = write_tensors(Path(ckpt_dir, filename), model.state_dict())
    with open(Path(ckpt_dir, CONFIG_FILE), "w", encoding="utf-8") as fout:
        fout.write(get_pretty_dict_json_no_sort(model.cfg.model_dump(mode="json"), indent=2))
        fout.write("\n")
    return fp


def load_model_cfg(ckpt_dir: Path) -> ModelCfg:
    with open(Path(ckpt_dir, CONFIG_FILE), encoding="utf-8") as fin:
        raw: Dict[str, Any] = json.load(fin)
    return build_config(ModelCfg, raw)


def load_checkpoint(ckpt_dir: Path, filename: Optional[str] = None, device: str = "cpu") -> TDEED:
    """Rebuild a model from ``model.json`` and load its weights.

    ``filename`` defaults to ``best.tdck`` when present, ``model.tdck`` otherwise. The model is
    returned in eval mode.
    """
    if filename is None:
        filename = BEST_FILE if Path(ckpt_dir, BEST_FILE).exists() else MODEL_FILE
    cfg = load_model_cfg(ckpt_dir)
    model = TDEED(cfg)
    tensors = read_tensors(Path(ckpt_dir, filename))
    state = model.state_dict()
    missing = set(state) - set(tensors)
    unexpected = set(tensors) - set(state)
    if missing or unexpected:
        raise ContractError(f"checkpoint/model mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
    for name, ref in state.items():
        if tuple(tensors[name].shape) != tuple(ref.shape):
            raise ContractError(f"{name}: shape {tuple(tensors[name].shape)} != {tuple(ref.shape)}")
    model.load_state_dict(OrderedDict((k, tensors[k].to(state[k].dtype)) for k in state))
    logger.debug(f"loaded {len(tensors)} tensors from {Path(ckpt_dir, filename)}")
    return model.to(device).eval()
