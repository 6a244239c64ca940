"""
Утилитные функции
"""

import hashlib
import json
import logging
import math
import sys
from typing import Any, Optional

from globals import LOG_FILE, LOG_LEVEL

logger = logging.getLogger(__name__)


def setup_logging(level: Optional[str] = None):
    """Настройка логирования"""
    handlers = [logging.StreamHandler(sys.stderr)]
    if LOG_FILE:
        handlers.append(logging.FileHandler(LOG_FILE))

    logging.basicConfig(
        level=(level or LOG_LEVEL).upper(),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True
    )


def normalize_angle(angle: float) -> float:
    """Угол в диапазоне (-pi, pi]"""
    a = math.remainder(angle, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    return a


def content_hash(payload: Any) -> str:
    """sha256 канонического JSON"""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
