#!/usr/bin/env python3
"""
Result Cache - File-backed store of completed protocol cells

Each entry is one JSON file under the cache directory, so a rerun of the
protocol on the same run directory can skip work that already finished.
"""

import json
import logging
import os
import re
from pathlib import Path
from typing import Any, Dict, Optional, Union

logger = logging.getLogger(__name__)


class ResultCache:
    """Persist JSON-serializable results keyed by cell name"""

    def __init__(self, directory: Union[str, Path], enabled: bool = True):
        """Initialize result cache"""
        self.directory = Path(directory)
        self.enabled = enabled
        self.hits = 0
        self.misses = 0

        if self.enabled:
            self.directory.mkdir(parents=True, exist_ok=True)
            logger.info(f"Result cache at {self.directory}")

    def _path(self, key: str) -> Path:
        return self.directory / (re.sub(r"[^A-Za-z0-9_.-]", "_", key) + ".json")

    def get(self, key: str) -> Optional[Any]:
        """Get a stored result, None on miss"""
        if not self.enabled:
            return None

        path = self._path(key)
        if not path.exists():
            self.misses += 1
            return None
        try:
            with open(path, 'r') as f:
                entry = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.warning(f"Cache read error for {key}: {e}")
            self.misses += 1
            return None

        if entry.get("key") != key:
            self.misses += 1
            return None
        self.hits += 1
        logger.debug(f"Cache hit: {key}")
        return entry["value"]

    def set(self, key: str, value: Any) -> bool:
        """Store a result; the write is atomic"""
        if not self.enabled:
            return False

        path = self._path(key)
        tmp_path = path.with_suffix(".tmp")
        try:
            with open(tmp_path, 'w') as f:
                json.dump({"key": key, "value": value}, f, indent=2, sort_keys=True)
            os.replace(tmp_path, path)
            logger.debug(f"Cache set: {key}")
            return True
        except (OSError, TypeError) as e:
            logger.warning(f"Cache set error for {key}: {e}")
            return False

    def delete(self, key: str) -> bool:
        """Delete one entry"""
        if not self.enabled:
            return False

        path = self._path(key)
        if path.exists():
            path.unlink()
            logger.debug(f"Cache deleted: {key}")
        return True

    def clear(self) -> bool:
        """Delete every entry"""
        if not self.enabled:
            return False

        for path in self.directory.glob("*.json"):
            path.unlink()
        self.hits = self.misses = 0
        logger.info("Cache cleared")
        return True

    def get_stats(self) -> Dict:
        """Get cache statistics"""
        if not self.enabled:
            return {
                "enabled": False,
                "message": "Cache disabled"
            }

        return {
            "enabled": True,
            "directory": str(self.directory),
            "entries": len(list(self.directory.glob("*.json"))),
            "hits": self.hits,
            "misses": self.misses
        }
