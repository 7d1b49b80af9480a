"""Content-addressed store for generated texts.

Entries are keyed by (encoding key, node, layer) and written once: a second
write of identical text is a no-op, a write of different text under an
existing key is an integrity error. On disk the cache is one JSONL shard per
encoding key, so independently configured runs never share a file and a run
can resume by replaying its shard.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple


class CacheIntegrityError(Exception):
    """An existing cache key was written with different text."""


@dataclass(frozen=True)
class CacheEntry:
    node: str
    layer: int
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def to_record(self) -> Dict:
        return {
            "node": self.node,
            "layer": self.layer,
            "text": self.text,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
        }


class RepresentationCache:
    """Append-only JSONL-backed cache; safe for concurrent readers and writers."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._loaded: set[str] = set()
        self._entries: Dict[Tuple[str, str, int], CacheEntry] = {}

    def _shard_path(self, key_hash: str) -> Path:
        return self.root / f"{key_hash}.jsonl"

    def _ensure_loaded(self, key_hash: str) -> None:
        if key_hash in self._loaded:
            return
        path = self._shard_path(key_hash)
        if path.is_file():
            with path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    entry = CacheEntry(
                        node=rec["node"],
                        layer=int(rec["layer"]),
                        text=rec["text"],
                        prompt_tokens=int(rec.get("prompt_tokens", 0)),
                        completion_tokens=int(rec.get("completion_tokens", 0)),
                    )
                    self._entries[(key_hash, entry.node, entry.layer)] = entry
        self._loaded.add(key_hash)

    def get(self, key_hash: str, node: str, layer: int) -> Optional[CacheEntry]:
        with self._lock:
            self._ensure_loaded(key_hash)
            return self._entries.get((key_hash, node, layer))

    def put(self, key_hash: str, entry: CacheEntry) -> bool:
        """Store an entry; returns False when an identical entry already exists."""
        with self._lock:
            self._ensure_loaded(key_hash)
            key = (key_hash, entry.node, entry.layer)
            existing = self._entries.get(key)
            if existing is not None:
                if existing.text != entry.text:
                    raise CacheIntegrityError(
                        f"conflicting write for node={entry.node!r} layer={entry.layer} "
                        f"under key {key_hash}"
                    )
                return False
            self._entries[key] = entry
            with self._shard_path(key_hash).open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry.to_record(), ensure_ascii=False, sort_keys=True) + "\n")
            return True

    def entries(self, key_hash: str) -> List[CacheEntry]:
        with self._lock:
            self._ensure_loaded(key_hash)
            return [e for (kh, _, _), e in sorted(self._entries.items()) if kh == key_hash]
