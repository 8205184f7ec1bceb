"""Run manifests: one YAML record per command invocation."""

import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml  # type: ignore[import-untyped]
from app.version import __version__
from pydantic import BaseModel, ConfigDict, Field

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.yaml"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunManifest(BaseModel):
    """What was run, with which resolved config, and what it produced."""

    model_config = ConfigDict(extra="forbid")

    command: str
    argv: List[str]
    config: Dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None
    artifacts: Dict[str, str] = Field(default_factory=dict)
    version: str = __version__
    status: str = "running"
    started_at: str = Field(default_factory=_now)
    finished_at: Optional[str] = None

    def finish(self, status: str) -> "RunManifest":
        self.status = status
        self.finished_at = _now()
        return self

    def write(self, directory: Union[str, Path], name: str = MANIFEST_FILE) -> Path:
        path = Path(directory) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            yaml.safe_dump(self.model_dump(mode="json"), f, sort_keys=False)
        logger.info(f"Wrote run manifest to {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunManifest":
        with open(path, "r") as f:
            return cls.model_validate(yaml.safe_load(f))
