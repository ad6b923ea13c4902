"""Run manifests: config hash, seeds, library versions and artifact digests."""
import json
import logging
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np
import PIL
import scipy
from cryptography.hazmat.primitives import hashes

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
MANIFEST_FILE = "manifest.json"
CHUNK = 1 << 20


class ManifestError(Exception):
    pass


def sha256_bytes(data: bytes) -> str:
    digest = hashes.Hash(hashes.SHA256())
    digest.update(data)
    return digest.finalize().hex()


def sha256_file(path: PathLike) -> str:
    digest = hashes.Hash(hashes.SHA256())
    try:
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(CHUNK), b""):
                digest.update(chunk)
    except OSError as e:
        raise ManifestError(f"Failed to hash {path}: {e}") from e
    return digest.finalize().hex()


def config_hash(config: Dict) -> str:
    """Digest of the canonical (sorted-key, compact) JSON form"""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return sha256_bytes(canonical.encode("utf-8"))


def library_versions() -> Dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "Pillow": PIL.__version__,
    }


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: Dict
    seeds: Dict[str, int]
    artifacts: Dict[str, str] = field(default_factory=dict)

    def add_artifacts(self, paths: Iterable[PathLike], root: Optional[PathLike] = None) -> None:
        for path in paths:
            path = Path(path)
            if not path.is_file():
                continue
            key = str(path.relative_to(root)) if root is not None and path.is_relative_to(root) else str(path)
            self.artifacts[key] = sha256_file(path)

    def to_dict(self) -> Dict:
        return {
            "command": self.command,
            "argv": list(self.argv),
            "config_sha256": config_hash(self.config),
            "config": self.config,
            "seeds": dict(self.seeds),
            "versions": library_versions(),
            "artifacts": dict(sorted(self.artifacts.items())),
        }

    def write(self, out_dir: PathLike) -> Path:
        path = Path(out_dir) / MANIFEST_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        logger.info(f"Wrote manifest with {len(self.artifacts)} artifacts to {path}")
        return path
