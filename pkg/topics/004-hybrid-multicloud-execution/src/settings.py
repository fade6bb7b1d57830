"""Process settings: dotenv files, HYBRIDMESH_* variables, logging setup and the errors log."""
from __future__ import annotations

import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

TOOL_NAME = "hybridmesh"
TOOL_VERSION = "0.1.0"
DEFAULT_PORT = 9015

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


@dataclass(frozen=True)
class Settings:
    out_dir: Path
    host: str
    port: int
    log_level: str


ENV_FILES = (".env.local", ".env")


def parse_env_file(path: Path) -> dict[str, str]:
    """KEY=VALUE pairs of a dotenv file; comments, blanks and malformed lines are skipped."""
    pairs: dict[str, str] = {}
    for raw in path.read_text(encoding="utf-8").splitlines():
        entry = raw.strip().removeprefix("export ").strip()
        if entry.startswith("#"):
            continue
        key, sep, value = entry.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            continue
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        pairs.setdefault(key, value)
    return pairs


def load_dotenv(start: Path | None = None) -> Path | None:
    """Apply dotenv files from ``start`` (default cwd) upwards; already-set variables win."""
    here = start or Path.cwd()
    found = [d / name for d in (here, *here.parents) for name in ENV_FILES if (d / name).is_file()]
    for path in found:
        for key, value in parse_env_file(path).items():
            os.environ.setdefault(key, value)
    return found[0] if found else None


def load_settings_from_env(*, out_dir: str | None = None) -> Settings:
    """Resolve runtime settings; HYBRIDMESH_OUT_DIR wins over the --out-dir flag."""
    load_dotenv()
    env_out = (os.getenv("HYBRIDMESH_OUT_DIR") or "").strip()
    resolved_out = Path(env_out or out_dir or "results")

    raw_port = (os.getenv("PORT") or "").strip()
    try:
        port = int(raw_port) if raw_port else DEFAULT_PORT
    except ValueError:
        port = DEFAULT_PORT

    return Settings(
        out_dir=resolved_out,
        host=(os.getenv("HYBRIDMESH_HOST") or "127.0.0.1").strip(),
        port=port,
        log_level=(os.getenv("HYBRIDMESH_LOG_LEVEL") or "INFO").strip().upper(),
    )


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time."""

    def __init__(self) -> None:
        super().__init__(sys.stderr)

    @property  # type: ignore[override]
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, _value) -> None:
        pass


def configure_logging(level: str = "INFO") -> None:
    root = logging.getLogger()
    if any(getattr(h, "_hybridmesh", False) for h in root.handlers):
        root.setLevel(level)
        return
    handler = _StderrHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler._hybridmesh = True  # type: ignore[attr-defined]
    root.addHandler(handler)
    root.setLevel(level)


def append_text(path: Path, line: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as f:
        f.write(line.rstrip() + "\n")
