"""Case records and manifest files.

Every training and evaluation command consumes manifests only: a JSON array
of case records with paths stored relative to the manifest file.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .volumes import MaskSet, Volume3D, load_mask, load_volume

ROLES = ("pathological", "normal", "synthetic")
SPLITS = ("train", "test")


class ManifestError(ValueError):
    """Malformed manifest or case record."""


@dataclass
class CaseRecord:
    """One case: volume path, per-class mask paths, role, and provenance."""

    volume_path: str
    mask_paths: list[str]
    role: str
    provenance: str = ""
    seed: int = 0
    split: str = "train"
    class_names: list[str] = field(default_factory=list)
    boundary_path: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ManifestError(f"unknown role {self.role!r}, expected one of {ROLES}")
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}, expected one of {SPLITS}")
        if self.role == "synthetic" and not self.provenance:
            raise ManifestError("synthetic records must carry the generating method name")
        if not self.class_names:
            self.class_names = [f"class_{i}" for i in range(len(self.mask_paths))]


def _relativize(path: str, base: Path) -> str:
    # record paths are filesystem paths (absolute or CWD-relative); anchor
    # them before rebasing onto the manifest directory
    return os.path.relpath(Path(path).resolve(), base)


def save_manifest(records: list[CaseRecord], path: str | Path) -> Path:
    """Write records as a JSON array; paths become relative to the manifest dir."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    payload = []
    for rec in records:
        d = asdict(rec)
        d["volume_path"] = _relativize(rec.volume_path, base)
        d["mask_paths"] = [_relativize(m, base) for m in rec.mask_paths]
        if rec.boundary_path is not None:
            d["boundary_path"] = _relativize(rec.boundary_path, base)
        payload.append(d)
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    return path


def load_manifest(path: str | Path, check_paths: bool = True) -> list[CaseRecord]:
    """Read a manifest; relative paths are resolved against the manifest dir."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"missing manifest {path}")
    base = path.parent.resolve()

    def _resolve(p: str) -> str:
        q = Path(p)
        return str(q if q.is_absolute() else base / q)

    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"unparseable manifest {path}: {exc}") from exc
    if not isinstance(payload, list):
        raise ManifestError(f"manifest {path} must be a JSON array")
    records = []
    for entry in payload:
        rec = CaseRecord(
            volume_path=_resolve(entry["volume_path"]),
            mask_paths=[_resolve(m) for m in entry["mask_paths"]],
            role=entry["role"],
            provenance=entry.get("provenance", ""),
            seed=int(entry.get("seed", 0)),
            split=entry.get("split", "train"),
            class_names=list(entry.get("class_names", [])),
            boundary_path=_resolve(entry["boundary_path"]) if entry.get("boundary_path") else None,
            extra=dict(entry.get("extra", {})),
        )
        if check_paths and not Path(rec.volume_path).with_suffix(".json").exists():
            raise ManifestError(f"volume path does not resolve: {rec.volume_path}")
        records.append(rec)
    return records


def load_case(record: CaseRecord) -> tuple[Volume3D, MaskSet]:
    """Load the volume and mask set for one record."""
    import numpy as np

    volume = load_volume(record.volume_path)
    if record.mask_paths:
        masks = [load_mask(p) for p in record.mask_paths]
    else:
        masks = [np.zeros(volume.spatial_dims, dtype=np.uint8)]
    names = record.class_names or [f"class_{i}" for i in range(len(masks))]
    return volume, MaskSet(masks, names[: len(masks)])


def load_boundary(record: CaseRecord):
    if record.boundary_path is None:
        raise ManifestError(f"record for {record.volume_path} carries no boundary mask")
    return load_mask(record.boundary_path)


def split_records(records: list[CaseRecord], split: str) -> list[CaseRecord]:
    if split not in SPLITS:
        raise ManifestError(f"unknown split {split!r}")
    return [r for r in records if r.split == split]


def manifest_hash(records: list[CaseRecord]) -> str:
    """Stable content hash used to tag metric reports."""
    import hashlib

    blob = json.dumps([asdict(r) for r in records], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
