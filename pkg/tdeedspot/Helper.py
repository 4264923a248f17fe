"""Helper utilities for JSON pretty printing, config merging and hashing.

This module provides convenience functions to pretty print dictionaries,
serialize complex objects (paths, numpy scalars/arrays, datetimes, ...) to
JSON, deep-merge nested configuration dicts, apply dotted ``key=value``
overrides and checksum artifacts.
"""

import hashlib
import json
import traceback
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Any, Dict, List

import numpy as np
import yaml


class ComplexEncoder(json.JSONEncoder):
    """JSON encoder that supports common Python types used in this project."""

    def default(self, obj: Any) -> Any:
        """Serialize complex objects to JSON-friendly representations.

        Args:
            obj: Object to serialize.

        Returns:
            Any: JSON-serializable representation.
        """
        if hasattr(obj, "repr_json"):
            return obj.repr_json()
        elif hasattr(obj, "model_dump"):
            return obj.model_dump(mode="json")
        elif isinstance(obj, Path):
            return obj.as_posix()
        elif isinstance(obj, np.integer):
            return int(obj)
        elif isinstance(obj, np.floating):
            return float(obj)
        elif isinstance(obj, np.ndarray):
            return obj.tolist()
        elif isinstance(obj, datetime):
            return obj.isoformat()
        elif isinstance(obj, date):
            return obj.strftime("%Y-%m-%d")
        elif isinstance(obj, timedelta):
            return str(obj)
        else:
            return json.JSONEncoder.default(self, obj)


def get_pretty_dict_json_no_sort(data: Any, indent: int = 4) -> str:
    """Return a pretty-formatted JSON string without sorting keys.

    Args:
        data: Any JSON-serializable data structure.
        indent: Indentation level for formatting.

    Returns:
        str: JSON string.
    """
    return json.dumps(data, indent=indent, sort_keys=False, cls=ComplexEncoder)


def update_deep(base: Dict[str, Any] | List[Any], u: Dict[str, Any] | List[Any]) -> Dict[str, Any] | List[Any]:
    """Recursively merge ``u`` into ``base`` for dicts and lists.

    Lists are merged element-wise and truncated/extended to the length of ``u``.

    Args:
        base: Base dictionary or list to be mutated/returned.
        u: Update structure (dict/list) to merge in.

    Returns:
        dict | list: The updated base structure.
    """
    if isinstance(u, dict):
        if not isinstance(base, dict):
            base = {}

        for k, v in u.items():
            if isinstance(v, dict) or isinstance(v, list):
                base[k] = update_deep(base.get(k, {}), v)
            else:
                base[k] = v

    elif isinstance(u, list):
        if not isinstance(base, list):
            base = []

        while len(base) < len(u):
            base.append(None)
        while len(base) > len(u):
            base.pop()

        for i, v in enumerate(u):
            if isinstance(v, dict) or isinstance(v, list):
                base[i] = update_deep(base[i] if base[i] is not None else ({} if isinstance(v, dict) else []), v)  # type: ignore
            else:
                base[i] = v

    return base


def dotted_to_nested(dotted_key: str, value: Any) -> Dict[str, Any]:
    """Turn ``"a.b.c"`` and a value into ``{"a": {"b": {"c": value}}}``.

    Args:
        dotted_key: Dotted path of a leaf key.
        value: Leaf value.

    Returns:
        dict: Nested dictionary.
    """
    ret: Dict[str, Any] = {}
    cur = ret
    parts = dotted_key.split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return ret


def apply_dotted_overrides(base: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """Apply ``key.path=value`` overrides to a nested config dict.

    Values are parsed as YAML scalars/flow collections, so ``train.epochs=2``
    yields an int and ``eval.deltas=[1,2]`` a list.

    Args:
        base: Nested configuration dictionary (mutated and returned).
        overrides: Strings of the form ``dotted.key=value``.

    Returns:
        dict: The updated configuration.

    Raises:
        ValueError: If an override is not of the form ``key=value``.
    """
    for ov in overrides:
        if "=" not in ov:
            raise ValueError(f"override {ov!r} is not of the form key=value")
        key, raw = ov.split("=", 1)
        value = yaml.safe_load(raw) if raw.strip() else None
        base = update_deep(base, dotted_to_nested(key.strip(), value))  # type: ignore
    return base


def sha256_file(fp: Path, chunk_size: int = 1 << 20) -> str:
    """Return the hex sha256 digest of a file."""
    h = hashlib.sha256()
    with open(fp, "rb") as fin:
        while True:
            chunk = fin.read(chunk_size)
            if not chunk:
                break
            h.update(chunk)
    return h.hexdigest()


def config_hash(data: Any) -> str:
    """Return the sha256 of the canonical (sorted, compact) JSON form of ``data``."""
    canon = json.dumps(data, sort_keys=True, separators=(",", ":"), cls=ComplexEncoder)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def get_exception_tb_as_string(exc: Exception) -> str:
    """Return a full traceback string for an exception.

    Args:
        exc: Exception instance.

    Returns:
        str: Multiline traceback string.
    """
    tb1: traceback.TracebackException = traceback.TracebackException.from_exception(exc)
    return "".join(tb1.format())
