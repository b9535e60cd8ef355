"""Procedural phantom volumes: smooth-noise backgrounds, an organ blob, and
class-separable lesions with known intensity peaks.

Realism is a non-goal; determinism and class separability are the goals, so
every acceptance test can train and verify on generated data.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .manifests import CaseRecord, save_manifest
from .volumes import MaskSet, Volume3D, save_mask, save_volume

_PLACEMENT_RETRIES = 25


class PhantomError(ValueError):
    pass


@dataclass
class LesionClassSpec:
    """One lesion class: intensity peaks (multi-peak mode), texture noise
    width, size range, and optional nesting inside another class."""

    name: str
    peaks: tuple[float, ...] = (0.5,)
    peak_weights: tuple[float, ...] | None = None
    sigma: float = 0.05
    radius_range: tuple[float, float] = (2.0, 4.5)
    nested_in: str | None = None

    def __post_init__(self) -> None:
        if len(self.peaks) < 1:
            raise PhantomError(f"class {self.name!r} needs at least one intensity peak")
        if any(abs(p) > 0.95 for p in self.peaks):
            raise PhantomError("intensity peaks must stay inside the normalized range")
        if self.peak_weights is not None and len(self.peak_weights) != len(self.peaks):
            raise PhantomError("peak_weights length must match peaks")
        self.peaks = tuple(float(p) for p in self.peaks)


@dataclass
class PhantomSpec:
    """Geometry and texture parameters for one phantom family."""

    classes: list[LesionClassSpec] = field(default_factory=list)
    dims: tuple[int, int, int] = (32, 32, 16)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    background_level: float = -0.75
    background_noise: float = 0.08
    organ_level: float = -0.15
    organ_noise: float = 0.08
    organ_axes_frac: tuple[float, float, float] = (0.40, 0.40, 0.42)
    noise_smoothness: float = 1.5
    preset: str = "custom"

    def __post_init__(self) -> None:
        if not self.classes:
            raise PhantomError("phantom spec needs at least one lesion class")
        self.dims = tuple(int(d) for d in self.dims)

    def to_json(self) -> dict:
        return asdict(self)


def cardiac_phantom_spec(dims=(32, 32, 16)) -> PhantomSpec:
    """Two-class phantom: a bright lesion with a darker core nested inside it."""
    return PhantomSpec(
        classes=[
            LesionClassSpec("bright", peaks=(0.55,), sigma=0.05, radius_range=(2.6, 4.6)),
            LesionClassSpec(
                "core", peaks=(-0.45,), sigma=0.05, radius_range=(1.2, 2.2), nested_in="bright"
            ),
        ],
        dims=dims,
        preset="cardiac",
    )


def lung_phantom_spec(dims=(32, 32, 16)) -> PhantomSpec:
    """Single-class phantom whose lesion intensities form three separated peaks."""
    return PhantomSpec(
        classes=[
            LesionClassSpec(
                "nodule",
                peaks=(-0.25, 0.2, 0.65),
                sigma=0.05,
                radius_range=(2.2, 4.4),
            )
        ],
        dims=dims,
        background_level=-0.8,
        organ_level=-0.35,
        preset="lung",
    )


PRESETS = {"cardiac": cardiac_phantom_spec, "lung": lung_phantom_spec}


def multi_peak_assignment(class_spec: LesionClassSpec, rng: np.random.Generator) -> int:
    """Categorical draw of the intensity peak used for one lesion."""
    k = len(class_spec.peaks)
    if k == 0:
        raise PhantomError("empty peak list")
    weights = class_spec.peak_weights
    if weights is None:
        p = np.full(k, 1.0 / k)
    else:
        p = np.asarray(weights, dtype=np.float64)
        p = p / p.sum()
    return int(rng.choice(k, p=p))


def _smooth_field(dims, rng, sigma) -> np.ndarray:
    noise = rng.standard_normal(dims)
    smooth = ndimage.gaussian_filter(noise, sigma=sigma)
    std = smooth.std()
    return smooth / std if std > 0 else smooth


def _organ_mask(spec: PhantomSpec) -> np.ndarray:
    zz, yy, xx = np.meshgrid(*(np.arange(d) for d in spec.dims), indexing="ij")
    center = [(d - 1) / 2.0 for d in spec.dims]
    axes = [max(f * d, 2.0) for f, d in zip(spec.organ_axes_frac, spec.dims)]
    q = sum(((g - c) / a) ** 2 for g, c, a in zip((zz, yy, xx), center, axes))
    return (q <= 1.0).astype(np.uint8)


def _ellipsoid_mask(dims, center, radius, rng) -> np.ndarray:
    zz, yy, xx = np.meshgrid(*(np.arange(d) for d in dims), indexing="ij")
    axes = radius * rng.uniform(0.75, 1.25, size=3)
    q = sum(((g - c) / a) ** 2 for g, c, a in zip((zz, yy, xx), center, axes))
    wobble = 0.25 * _smooth_field(dims, rng, sigma=1.0)
    return (q + wobble <= 1.0).astype(np.uint8)


def _place_lesion(
    organ: np.ndarray, parent: np.ndarray | None, cls: LesionClassSpec, rng: np.random.Generator
) -> np.ndarray:
    dims = organ.shape
    dist = ndimage.distance_transform_edt(organ)
    for attempt in range(_PLACEMENT_RETRIES):
        shrink = 1.0 - 0.6 * attempt / _PLACEMENT_RETRIES  # relax size if placement fails
        radius = rng.uniform(*cls.radius_range) * shrink
        if parent is not None:
            candidates = np.argwhere(parent)
        else:
            candidates = np.argwhere(dist >= max(radius * 0.8, 1.0))
        if len(candidates) == 0:
            continue
        center = candidates[rng.integers(len(candidates))]
        mask = _ellipsoid_mask(dims, center, radius, rng)
        mask &= organ
        if parent is not None:
            mask &= parent
            if (parent & ~mask).sum() < 4:
                continue  # carving would hollow out the parent
        if mask.sum() >= 4:
            return mask
    raise PhantomError(f"lesion of class {cls.name!r} does not fit the organ after retries")


def generate_phantom_case(
    spec: PhantomSpec, role: str, rng: np.random.Generator
) -> tuple[Volume3D, MaskSet, np.ndarray, CaseRecord]:
    """Generate one case: volume, lesion masks, organ region, and a record
    stub (paths are filled in when the case is written to disk)."""
    if role not in ("pathological", "normal"):
        raise PhantomError(f"phantom role must be pathological or normal, got {role!r}")
    dims = spec.dims
    organ = _organ_mask(spec)
    volume = spec.background_level + spec.background_noise * _smooth_field(
        dims, rng, spec.noise_smoothness
    )
    organ_tex = spec.organ_level + spec.organ_noise * _smooth_field(dims, rng, spec.noise_smoothness)
    volume = np.where(organ.astype(bool), organ_tex, volume)

    masks: dict[str, np.ndarray] = {c.name: np.zeros(dims, dtype=np.uint8) for c in spec.classes}
    peak_indices: list[int] = []
    if role == "pathological":
        for cls in spec.classes:
            parent = masks[cls.nested_in] if cls.nested_in else None
            if parent is not None and parent.sum() == 0:
                raise PhantomError(f"class {cls.name!r} nests in empty class {cls.nested_in!r}")
            lesion = _place_lesion(organ, parent, cls, rng)
            if parent is not None:
                masks[cls.nested_in] = (parent & ~lesion).astype(np.uint8)
            masks[cls.name] = lesion
            peak_idx = multi_peak_assignment(cls, rng)
            peak_indices.append(peak_idx)
            texture = cls.peaks[peak_idx] + cls.sigma * rng.standard_normal(dims)
            volume = np.where(lesion.astype(bool), texture, volume)
    else:
        peak_indices = []

    volume = np.clip(volume, -1.0, 1.0).astype(np.float32)
    mask_set = MaskSet([masks[c.name] for c in spec.classes], [c.name for c in spec.classes])
    record = CaseRecord(
        volume_path="",
        mask_paths=[],
        role=role,
        provenance=f"phantom:{spec.preset}",
        seed=0,
        class_names=[c.name for c in spec.classes],
        extra={"peak_indices": peak_indices},
    )
    return Volume3D(volume, spec.spacing), mask_set, organ, record


def generate_phantom_dataset(
    spec: PhantomSpec,
    counts: dict[str, int],
    seed: int,
    outdir: str | Path,
    test_count: int = 0,
) -> Path:
    """Write a full phantom dataset (LVOL cases + manifest) and return the
    manifest path. ``counts`` gives the training-set sizes; ``test_count``
    adds held-out pathological cases with split="test"."""
    n_path = int(counts.get("pathological", 0))
    n_norm = int(counts.get("normal", 0))
    if n_path < 0 or n_norm < 0 or test_count < 0:
        raise PhantomError("case counts must be nonnegative")
    outdir = Path(outdir)
    cases_dir = outdir / "cases"
    cases_dir.mkdir(parents=True, exist_ok=True)

    roles = (
        [("pathological", "train")] * n_path
        + [("normal", "train")] * n_norm
        + [("pathological", "test")] * test_count
    )
    case_seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=max(len(roles), 1))
    records = []
    for idx, (role, split) in enumerate(roles):
        case_seed = int(case_seeds[idx])
        volume, mask_set, organ, record = generate_phantom_case(
            spec, role, np.random.default_rng(case_seed)
        )
        stem = cases_dir / f"case_{idx:04d}"
        save_volume(volume, stem)
        mask_paths = []
        if role == "pathological":
            for name, mask in zip(mask_set.class_names, mask_set.masks):
                mpath = Path(f"{stem}_mask_{name}")
                save_mask(mask, mpath, spec.spacing)
                mask_paths.append(str(mpath))
        organ_path = Path(f"{stem}_organ")
        save_mask(organ, organ_path, spec.spacing)
        record.volume_path = str(stem)
        record.mask_paths = mask_paths
        record.seed = case_seed
        record.split = split
        record.boundary_path = str(organ_path)
        records.append(record)
    return save_manifest(records, outdir / "manifest.json")
