"""Run manifests for duohand.

Every command that writes files also writes a ``manifest.yaml`` next to them,
listing each artifact with its sha256 so a run directory can be verified
later.
"""

import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from . import __version__
from .container import file_sha256
from .errors import ContainerIOError, ManifestHashError

logger = logging.getLogger(__name__)

MANIFEST_FILENAME = "manifest.yaml"


def artifact_version() -> str:
    """``git describe`` of the source checkout, or the package version."""
    try:
        import git

        repo = git.Repo(Path(__file__).resolve().parent, search_parent_directories=True)
        return str(repo.git.describe("--always", "--dirty"))
    except ImportError:
        # GitPython refuses to import without a git executable
        pass
    except Exception as e:
        logger.debug("no git version available: %s", e)
    return f"v{__version__}"


@dataclass
class RunManifest:
    """What a command read and wrote.

    Attributes:
        command: Name of the command that produced the run.
        output_dir: Directory holding the artifacts.
        config: Configuration snapshot.
        dataset: ``{"path", "sha256"}`` of the input dataset, if any.
        artifacts: Output files by role, each ``{"path", "sha256"}`` with the
            path relative to ``output_dir``.
        created: UTC timestamp, ISO 8601.
        version: Artifact version string.
    """

    command: str
    output_dir: str
    config: Dict[str, Any] = field(default_factory=dict)
    dataset: Optional[Dict[str, str]] = None
    artifacts: Dict[str, Dict[str, str]] = field(default_factory=dict)
    created: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    version: str = field(default_factory=artifact_version)

    def add_artifact(self, role: str, path: Path, sha256: Optional[str] = None) -> None:
        """Record an output file that lives under ``output_dir``."""
        path = Path(path)
        rel = path.resolve().relative_to(Path(self.output_dir).resolve())
        self.artifacts[role] = {
            "path": rel.as_posix(),
            "sha256": sha256 or file_sha256(path),
        }

    def set_dataset(self, path: Path, sha256: Optional[str] = None) -> None:
        path = Path(path)
        self.dataset = {"path": str(path.resolve()), "sha256": sha256 or file_sha256(path)}

    def artifact_path(self, role: str) -> Path:
        return Path(self.output_dir) / self.artifacts[role]["path"]

    def verify(self) -> None:
        """Re-hash every artifact.

        Raises:
            ManifestHashError: if a file is missing or its hash differs.
        """
        for role in self.artifacts:
            path = self.artifact_path(role)
            try:
                digest = file_sha256(path)
            except ContainerIOError as e:
                raise ManifestHashError(f"{role}: {e}") from e
            if digest != self.artifacts[role]["sha256"]:
                raise ManifestHashError(f"{role}: {path} does not match its recorded hash")

    def save(self, path: Optional[Path] = None) -> Path:
        path = Path(path) if path is not None else Path(self.output_dir) / MANIFEST_FILENAME
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            yaml.safe_dump(asdict(self), f, default_flow_style=False, sort_keys=False)
        return path


def load_manifest(run_dir: Path, verify: bool = True) -> RunManifest:
    """Load ``manifest.yaml`` from a run directory.

    The stored ``output_dir`` is replaced by ``run_dir`` so moved run
    directories still resolve.
    """
    path = Path(run_dir) / MANIFEST_FILENAME
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ContainerIOError(f"cannot read manifest {path}: {e}") from e
    data["output_dir"] = str(Path(run_dir))
    manifest = RunManifest(**data)
    if verify:
        manifest.verify()
    return manifest
