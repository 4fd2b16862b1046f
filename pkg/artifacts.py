"""Output files: atomic writes, content hashes and the per-run manifest."""

import hashlib
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Union

import pandas as pd

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """Write to a temp file in the target directory, then rename over the target"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: PathLike, document: Any) -> Path:
    return atomic_write_text(path, json.dumps(document, indent=2, sort_keys=True) + "\n")


def write_csv(path: PathLike, frame: pd.DataFrame) -> Path:
    return atomic_write_text(path, frame.to_csv(index=False, lineterminator="\n"))


def bytes_sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


@dataclass
class RunManifest:
    """What a command produced: config snapshot, output hashes, wall-clock per phase."""

    command: str
    tool_version: str
    config: Dict[str, Any]
    files: Dict[str, str] = field(default_factory=dict)
    wallclock_ms: Dict[str, float] = field(default_factory=dict)
    notes: Dict[str, Any] = field(default_factory=dict)

    def add_file(self, path: PathLike, kind: str = "output") -> str:
        digest = file_sha256(path)
        self.files[str(path)] = digest
        self.notes.setdefault("kinds", {})[str(path)] = kind
        return digest

    @property
    def file_list(self) -> List[str]:
        return sorted(self.files)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def write(self, path: PathLike) -> Path:
        written = write_json(path, self.to_dict())
        logger.info(f"Wrote run manifest {written} ({len(self.files)} files)")
        return written
