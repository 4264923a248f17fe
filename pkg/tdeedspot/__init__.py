"""tdeedspot package.

Precise event spotting on synthetic video: a per-frame backbone with gate-shift modules, an
SGP encoder-decoder with SGP-Mixer skip connections, classification and displacement heads,
plus training, full-video inference, tolerance-based mAP and the analysis tooling around it.
"""

__version__ = "0.1.0"

import os
import sys
from typing import Any, Callable, Dict

from loguru import logger as glogger

glogger.disable(__name__)


def _loguru_skiplog_filter(record: dict) -> bool:
    """Filter function to hide records with ``extra['skiplog']`` set.

    Intended for ``loguru``'s ``filter=`` parameter: per-step and per-video records are bound
    with ``skiplog=not noisy`` and vanish unless a command runs with ``--noisy``.

    Args:
        record (dict): Loguru record dictionary.

    Returns:
        bool: ``True`` to keep the record, ``False`` to skip it.
    """
    return not record.get("extra", {}).get("skiplog", False)


def configure_loguru_default_with_skiplog_filter(
    loguru_filter: Callable[[Dict[str, Any]], bool] = _loguru_skiplog_filter,
) -> None:
    """Configure a default ``loguru`` sink on stderr with the skiplog filter.

    The level comes from ``LOGURU_LEVEL`` (default ``DEBUG``).

    Args:
        loguru_filter: A callable taking a record dict and returning ``True`` if the record
            should be emitted. Defaults to :func:`_loguru_skiplog_filter`.
    """
    os.environ["LOGURU_LEVEL"] = os.getenv("LOGURU_LEVEL", "DEBUG")
    glogger.remove()
    logger_fmt: str = (
        "<green>{time:YYYY-MM-DD HH:mm:ss.SSS}</green> | <level>{level: <8}</level> | <cyan>{module}</cyan>::<cyan>{extra[classname]}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>"
    )
    glogger.add(sys.stderr, level=os.getenv("LOGURU_LEVEL"), format=logger_fmt, filter=loguru_filter)  # type: ignore
    glogger.configure(extra={"classname": "None", "skiplog": False})


from .errors import ConfigError, ContractError, DivergenceError, RangeError, TdeedError

from .models import (
    AugmentCfg,
    BackboneCfg,
    EventAnnotation,
    GeneratorSpec,
    InferCfg,
    ModelCfg,
    RunConfig,
    SgpCfg,
    SpottedEvent,
    TrainCfg,
    load_run_config,
)

from .synthdata import ClipSample, SyntheticVideo, assign_targets, augment, generate_dataset, mixup, sample_clip
from .backbone import FrameBackbone, GateShift, TokenSequence, extract, gate_shift
from .sgp import SGPLayer, SGPMixerLayer, add_positional, sgp_layer, sgp_mixer_layer, skip_fuse, temporal_pool, upsample
from .tdeed import TDEED, FramePredictions, baseline_forward, build_model, pyramid_forward
from .trainer import combined_loss, dilate_labels, lr_at, train
from .spotting import decode_candidates, nms, soft_nms, stitch
from .evaluation import average_precision, discriminability, discriminability_profile, map_at, pyramid_layer_map
