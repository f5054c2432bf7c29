"""Atomic output writes and per-directory run manifests."""

import hashlib
import json
import logging
import os
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, Sequence, Union

from pydantic import BaseModel, Field

from . import __version__


logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
MANIFEST_NAME = "manifest.json"


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: PathLike, payload: Any) -> Path:
    return atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_csv(
    path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]
) -> Path:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    return atomic_write_text(path, "\n".join(lines) + "\n")


def file_digest(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest(BaseModel):
    """Provenance for one command invocation; timestamps live only here."""

    command: str
    flags: Dict[str, Any] = Field(default_factory=dict)
    seed: int = 0
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    tool_version: str = __version__
    started_at: str = ""
    wall_time_s: float = 0.0


class RunRecorder:
    """Collects inputs and outputs of a command and writes its manifest."""

    def __init__(self, command: str, flags: Dict[str, Any], seed: int = 0):
        self.manifest = RunManifest(
            command=command,
            flags={k: _plain(v) for k, v in sorted(flags.items())},
            seed=seed,
            started_at=datetime.now(timezone.utc).isoformat(),
        )
        self._start = time.perf_counter()

    def add_inputs(self, paths: Iterable[PathLike]) -> None:
        for p in paths:
            self.manifest.inputs[str(p)] = file_digest(p)

    def add_output(self, path: PathLike) -> None:
        self.manifest.outputs[Path(path).name] = file_digest(path)

    def write(self, out_dir: PathLike) -> Path:
        self.manifest.wall_time_s = round(time.perf_counter() - self._start, 3)
        path = Path(out_dir) / MANIFEST_NAME
        write_json(path, self.manifest.model_dump(mode="json"))
        logger.info("Wrote manifest %s", path)
        return path


def _plain(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value
