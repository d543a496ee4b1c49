#!/usr/bin/env python3
"""
Utilities - Helper functions
"""

import hashlib
import json
import logging
import os
import zlib
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


# Configure logging
def setup_logging(
    name: str,
    level: str = "INFO",
    log_file: Optional[str] = None,
    max_bytes: int = 10485760,
    backup_count: int = 10
) -> logging.Logger:
    """Setup logging for module, optionally mirrored to a rotating file"""
    logger = logging.getLogger(name)

    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(handler)

    if log_file and not any(isinstance(h, RotatingFileHandler) for h in logger.handlers):
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(
            log_file, maxBytes=max_bytes, backupCount=backup_count
        )
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(file_handler)

    logger.setLevel(getattr(logging, level.upper(), logging.INFO))
    return logger


def expand_env(value: Any) -> Any:
    """Expand ${VAR} placeholders in every string of a config document"""
    if isinstance(value, str):
        return os.path.expandvars(value)
    elif isinstance(value, dict):
        return {k: expand_env(v) for k, v in value.items()}
    elif isinstance(value, list):
        return [expand_env(v) for v in value]
    return value


def set_nested(data: Dict, path: str, value: Any) -> Dict:
    """Set nested dict value using dot notation, creating levels as needed"""
    keys = path.split(".")
    node = data
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            node[key] = {}
        node = node[key]
    node[keys[-1]] = value
    return data


def merge_dicts(dict1: Dict, dict2: Dict) -> Dict:
    """Deep merge two dictionaries"""
    result = dict1.copy()
    for key, value in dict2.items():
        if isinstance(value, dict) and isinstance(result.get(key), dict):
            result[key] = merge_dicts(result[key], value)
        else:
            result[key] = value
    return result


def derive_seed(master_seed: int, name: str) -> int:
    """Derive a named sub-seed from the master seed"""
    sequence = np.random.SeedSequence(entropy=master_seed, spawn_key=(zlib.crc32(name.encode()),))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def seed_fanout(master_seed: int, names: Sequence[str] = ("data", "split", "sr_init", "classifier_init", "shuffle")) -> Dict[str, int]:
    """Named sub-seeds recorded in training logs"""
    return {name: derive_seed(master_seed, name) for name in names}


def config_hash(document: Dict) -> str:
    """Stable sha256 of a JSON-serializable config document"""
    payload = json.dumps(document, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode()).hexdigest()
