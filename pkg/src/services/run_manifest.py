"""Run manifest: what a command was given and every file it wrote."""

import logging
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

from pydantic import BaseModel, Field

from src.models.exceptions import NdrError

MANIFEST_NAME = "manifest.json"
PACKAGE_NAME = "ndr-recon"

logger = logging.getLogger(__name__)


def code_version() -> str:
    try:
        return metadata.version(PACKAGE_NAME)
    except metadata.PackageNotFoundError:
        return "0.0.0+source"


class RunManifest(BaseModel):
    """Reproducibility record of one command run.

    Artifact paths are stored relative to ``run_dir``.
    """

    command: str
    run_dir: str
    seed: int = 0
    config: Dict[str, Any] = Field(default_factory=dict)
    config_hash: Optional[str] = None
    dataset_hash: Optional[str] = None
    code_version: str = Field(default_factory=code_version)
    created_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    artifacts: List[str] = Field(default_factory=list)

    def add_artifacts(self, paths: Iterable[Path]) -> None:
        root = Path(self.run_dir).resolve()
        for path in paths:
            resolved = Path(path).resolve()
            try:
                entry = str(resolved.relative_to(root))
            except ValueError:
                entry = str(resolved)
            if entry not in self.artifacts:
                self.artifacts.append(entry)

    def missing_artifacts(self) -> List[str]:
        root = Path(self.run_dir)
        return [a for a in self.artifacts if not (root / a).exists()]

    def validate_artifacts(self) -> None:
        """
        Check that every listed artifact exists.

        Raises:
            NdrError: Naming the missing files
        """
        missing = self.missing_artifacts()
        if missing:
            raise NdrError(f"Manifest lists missing artifacts: {', '.join(missing)}")

    def write(self, path: Optional[Path] = None) -> Path:
        target = Path(path) if path is not None else Path(self.run_dir) / MANIFEST_NAME
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(self.model_dump_json(indent=2))
        logger.info(f"Wrote manifest with {len(self.artifacts)} artifacts to {target}")
        return target

    @classmethod
    def read(cls, path: Path) -> "RunManifest":
        return cls.model_validate_json(Path(path).read_text())
