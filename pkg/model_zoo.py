"""
Model zoo manifest and verified artifact download.

A manifest (JSON or YAML, local path or http(s) URL) holds
{"entries": [{model_id, task, config_path, artifact_url, byte_size, sha256, metrics}]}.
Fetching streams into <dest>/<name>.part, resumes with a byte range when the
server honours it, and only renames the file into place once size and sha256
both match.
"""

import hashlib
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Union
from urllib.parse import urlparse

import requests
import yaml

from fashion_errors import ChecksumError, ConfigError, DataError, TrainingError, UsageError, ValidationError

logger = logging.getLogger(__name__)

SHA256_RE = re.compile(r"^[0-9a-f]{64}$")
CHUNK_SIZE = 64 * 1024
TIMEOUT = 30


@dataclass(frozen=True)
class ZooEntry:
    model_id: str
    task: str
    config_path: str
    artifact_url: str
    byte_size: int
    sha256: str
    metrics: Dict[str, float] = field(default_factory=dict)

    @property
    def filename(self) -> str:
        name = Path(urlparse(self.artifact_url).path).name
        return name or f"{self.model_id}.ckpt"


@dataclass
class ZooManifest:
    entries: List[ZooEntry]
    source: str = ""

    def get(self, model_id: str) -> ZooEntry:
        for entry in self.entries:
            if entry.model_id == model_id:
                return entry
        known = ", ".join(e.model_id for e in self.entries) or "none"
        raise UsageError(f"unknown model id '{model_id}' (known: {known})")


def _is_url(location: str) -> bool:
    return urlparse(location).scheme in ("http", "https")


def _parse_entry(raw: Any, index: int, source: str) -> ZooEntry:
    if not isinstance(raw, dict):
        raise ValidationError(f"{source}: entry {index} must be a mapping")
    try:
        entry = ZooEntry(model_id=str(raw["model_id"]), task=str(raw["task"]),
                         config_path=str(raw["config_path"]), artifact_url=str(raw["artifact_url"]),
                         byte_size=int(raw["byte_size"]), sha256=str(raw["sha256"]),
                         metrics={str(k): float(v) for k, v in raw.get("metrics", {}).items()})
    except KeyError as e:
        raise ValidationError(f"{source}: entry {index} is missing {e}") from None
    except (TypeError, ValueError, AttributeError) as e:
        raise ValidationError(f"{source}: entry {index}: {e}") from None
    if not SHA256_RE.match(entry.sha256):
        raise ValidationError(f"{source}: entry '{entry.model_id}' sha256 must be 64 lowercase hex chars")
    if entry.byte_size < 0:
        raise ValidationError(f"{source}: entry '{entry.model_id}' has a negative byte_size")
    return entry


def parse_manifest(text: str, source: str = "<manifest>") -> ZooManifest:
    try:
        # JSON manifests parse as YAML too
        document = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ValidationError(f"{source}: cannot parse manifest: {e}") from None
    if not isinstance(document, dict) or not isinstance(document.get("entries", None), list):
        raise ValidationError(f"{source}: manifest must be a mapping with an 'entries' list")
    entries = [_parse_entry(raw, i, source) for i, raw in enumerate(document["entries"])]
    seen = set()
    for entry in entries:
        if entry.model_id in seen:
            raise ValidationError(f"{source}: duplicate model id '{entry.model_id}'")
        seen.add(entry.model_id)
    return ZooManifest(entries, source)


def load_manifest(location: Union[str, Path]) -> ZooManifest:
    location = str(location)
    if _is_url(location):
        try:
            response = requests.get(location, timeout=TIMEOUT)
            response.raise_for_status()
        except requests.RequestException as e:
            raise DataError(f"cannot download manifest {location}: {e}") from None
        return parse_manifest(response.text, location)
    path = Path(location)
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    return parse_manifest(path.read_text(encoding="utf-8"), str(path))


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(CHUNK_SIZE), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _download(url: str, part: Path) -> None:
    """Stream url into part, continuing from its current size when possible"""
    offset = part.stat().st_size if part.exists() else 0
    headers = {"Range": f"bytes={offset}-"} if offset else {}
    with requests.get(url, headers=headers, stream=True, timeout=TIMEOUT) as response:
        if response.status_code == 416 and offset:
            # already complete (or longer than the artifact); the checksum decides
            return
        response.raise_for_status()
        mode = "ab" if offset and response.status_code == 206 else "wb"
        if offset and mode == "wb":
            logger.info("server ignored the byte range, restarting %s", part.name)
        with open(part, mode) as f:
            for chunk in response.iter_content(chunk_size=CHUNK_SIZE):
                if chunk:
                    f.write(chunk)


def verify_artifact(path: Union[str, Path], entry: ZooEntry) -> None:
    path = Path(path)
    size = path.stat().st_size
    if size != entry.byte_size:
        raise ChecksumError(f"{entry.model_id}: expected {entry.byte_size} bytes, got {size}")
    digest = sha256_file(path)
    if digest != entry.sha256:
        raise ChecksumError(f"{entry.model_id}: sha256 mismatch (expected {entry.sha256[:12]}, got {digest[:12]})")


def fetch(manifest: ZooManifest, model_id: str, dest: Union[str, Path]) -> Path:
    """Download and verify one artifact; a failed check removes the file"""
    entry = manifest.get(model_id)
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    target = dest / entry.filename
    if target.is_file():
        try:
            verify_artifact(target, entry)
            logger.info("%s already present and verified", target)
            return target
        except ChecksumError:
            target.unlink()
    part = target.with_name(target.name + ".part")
    try:
        _download(entry.artifact_url, part)
    except requests.RequestException as e:
        raise TrainingError(f"cannot download {entry.artifact_url}: {e}") from None
    try:
        verify_artifact(part, entry)
    except ChecksumError:
        part.unlink(missing_ok=True)
        raise
    part.replace(target)
    logger.info("fetched %s (%d bytes)", target, entry.byte_size)
    return target
