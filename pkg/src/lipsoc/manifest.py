"""Run manifests: seed, version, config snapshot, timestamps, hardware."""
from __future__ import annotations

import hashlib
import json
import os
import platform
import subprocess
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5, check=True)
        return f"v{__version__}-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        return f"v{__version__}"


def hardware_string() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} x{os.cpu_count()}; {platform.platform()}"


def manifest_id(seed: int, command: str, config: dict) -> str:
    """Content hash of what determines the outputs (not of timestamps)."""
    blob = json.dumps({"seed": seed, "command": command, "config": config}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def file_digest(path) -> str:
    """``sha256:<first 16 hex digits>`` of a file's bytes."""
    return "sha256:" + hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    seed: int
    command: str
    config: dict
    version: str = field(default_factory=version_string)
    hardware: str = field(default_factory=hardware_string)
    started: str = field(default_factory=_now)
    finished: str = ""

    @property
    def id(self) -> str:
        return manifest_id(self.seed, self.command, self.config)

    def finish(self) -> None:
        self.finished = _now()

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / f"manifest-{self.command.replace(' ', '-')}.json"
        data = asdict(self) | {"id": self.id}
        path.write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + "\n")
        return path
