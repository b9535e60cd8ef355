"""Volume and mask containers plus the LVOL on-disk container format.

LVOL is a deliberately boring format: a JSON header next to a raw
little-endian float32 payload, so golden files are bit-exact and portable.
Voxel order is fixed as (z, y, x, channel).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LVOL_FORMAT_VERSION = 1

# Padding default: normalized air/empty value, matching the [-1, 1] range.
DEFAULT_PAD_VALUE = -1.0


class VolumeError(ValueError):
    """Malformed volume, mask, or container file."""


@dataclass
class Volume3D:
    """Dense float32 volume indexed (z, y, x, channel), spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_range: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[..., np.newaxis]
        if arr.ndim != 4:
            raise VolumeError(f"expected 3D or 4D array, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise VolumeError("volume contains non-finite values")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise VolumeError(f"spacing must be 3 positive floats, got {self.spacing}")
        self.data = arr
        self.spacing = tuple(float(s) for s in self.spacing)
        self.intensity_range = tuple(float(v) for v in self.intensity_range)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def spatial_dims(self) -> tuple[int, int, int]:
        return self.data.shape[:3]  # type: ignore[return-value]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def copy(self) -> "Volume3D":
        return Volume3D(self.data.copy(), self.spacing, self.intensity_range)


@dataclass
class MaskSet:
    """One binary volume per lesion class, pairwise disjoint.

    The background mask is derived, never stored: background = 1 - union.
    Overlapping classes are rejected because the per-class channel
    composition is only well defined on disjoint masks.
    """

    masks: list[np.ndarray]
    class_names: list[str]

    def __post_init__(self) -> None:
        if len(self.masks) < 1:
            raise VolumeError("MaskSet needs at least one class")
        if len(self.class_names) != len(self.masks):
            raise VolumeError("class_names length must match mask count")
        cleaned = []
        for name, m in zip(self.class_names, self.masks):
            m = np.asarray(m)
            if m.ndim == 4 and m.shape[3] == 1:
                m = m[..., 0]
            if m.ndim != 3:
                raise VolumeError(f"mask '{name}' must be a 3D volume, got shape {m.shape}")
            vals = np.unique(m)
            if not np.all(np.isin(vals, (0, 1))):
                raise VolumeError(f"mask '{name}' is not binary")
            cleaned.append(m.astype(np.uint8))
        dims = cleaned[0].shape
        if any(m.shape != dims for m in cleaned):
            raise VolumeError("masks must share dims")
        total = np.zeros(dims, dtype=np.int64)
        for m in cleaned:
            total += m
        if total.max() > 1:
            raise VolumeError("masks overlap; multi-class masks must be disjoint")
        self.masks = cleaned

    @property
    def n_classes(self) -> int:
        return len(self.masks)

    @property
    def spatial_dims(self) -> tuple[int, int, int]:
        return self.masks[0].shape  # type: ignore[return-value]

    @property
    def union(self) -> np.ndarray:
        out = np.zeros(self.spatial_dims, dtype=np.uint8)
        for m in self.masks:
            out |= m
        return out

    @property
    def background(self) -> np.ndarray:
        return (1 - self.union).astype(np.uint8)

    def stack(self) -> np.ndarray:
        """Masks as a (D, H, W, n) float32 array."""
        return np.stack(self.masks, axis=-1).astype(np.float32)

    def is_empty(self) -> bool:
        return all(m.sum() == 0 for m in self.masks)

    @classmethod
    def empty(cls, spatial_dims: tuple[int, int, int], class_names: list[str]) -> "MaskSet":
        return cls([np.zeros(spatial_dims, dtype=np.uint8) for _ in class_names], list(class_names))


@dataclass
class RoiSpec:
    """Crop window: center voxel (z, y, x) and output size (d, h, w)."""

    center: tuple[int, int, int]
    size: tuple[int, int, int]

    def __post_init__(self) -> None:
        if len(self.center) != 3 or len(self.size) != 3:
            raise VolumeError("RoiSpec center and size must have 3 components")
        if any(s < 1 for s in self.size):
            raise VolumeError(f"RoiSpec size must be positive, got {self.size}")
        self.center = tuple(int(c) for c in self.center)
        self.size = tuple(int(s) for s in self.size)


# Default ROI sizes exposed as config defaults (d, h, w).
ROI_SIZE_LUNG = (64, 64, 32)
ROI_SIZE_CARDIAC = (72, 72, 10)


def crop_pad_array(
    data: np.ndarray, center: tuple[int, int, int], size: tuple[int, int, int], pad_value: float
) -> np.ndarray:
    """Crop a (D, H, W, ...) array around ``center``, padding out-of-bounds voxels.

    The window starts at center - size // 2 along each axis.
    """
    out_shape = tuple(size) + data.shape[3:]
    out = np.full(out_shape, pad_value, dtype=data.dtype)
    src_slices = []
    dst_slices = []
    for axis in range(3):
        start = int(center[axis]) - size[axis] // 2
        stop = start + size[axis]
        src_lo = max(start, 0)
        src_hi = min(stop, data.shape[axis])
        if src_lo >= src_hi:
            return out  # window entirely outside the source
        src_slices.append(slice(src_lo, src_hi))
        dst_slices.append(slice(src_lo - start, src_hi - start))
    out[tuple(dst_slices)] = data[tuple(src_slices)]
    return out


def crop_pad_roi(volume: Volume3D, roi: RoiSpec, pad_value: float = DEFAULT_PAD_VALUE) -> Volume3D:
    """Crop/pad a volume to the ROI window; out-of-bounds voxels get ``pad_value``."""
    data = crop_pad_array(volume.data, roi.center, roi.size, pad_value)
    return Volume3D(data, volume.spacing, volume.intensity_range)


def crop_pad_mask_set(mask_set: MaskSet, roi: RoiSpec) -> MaskSet:
    """Crop/pad every class mask to the ROI window (padding is background)."""
    masks = [crop_pad_array(m, roi.center, roi.size, 0) for m in mask_set.masks]
    return MaskSet(masks, list(mask_set.class_names))


def normalize_intensity(volume: Volume3D, window: tuple[float, float]) -> Volume3D:
    """Clip to ``window`` then map affinely onto [-1, 1]."""
    lo, hi = float(window[0]), float(window[1])
    if hi <= lo:
        raise VolumeError(f"degenerate intensity window {window}")
    clipped = np.clip(volume.data, lo, hi)
    scaled = (clipped - lo) / (hi - lo) * 2.0 - 1.0
    return Volume3D(scaled.astype(np.float32), volume.spacing, (-1.0, 1.0))


def _lvol_paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".raw")


def save_volume(volume: Volume3D, path: str | Path) -> None:
    """Write an LVOL pair: `<name>.json` header + `<name>.raw` payload.

    Serialization is deterministic, so saving the same volume twice yields
    byte-identical files.
    """
    header_path, raw_path = _lvol_paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    d, h, w, c = volume.dims
    header = {
        "format_version": LVOL_FORMAT_VERSION,
        "dims": [d, h, w, c],
        "spacing": list(volume.spacing),
        "dtype": "f32le",
        "channels": c,
    }
    header_path.write_text(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
    raw_path.write_bytes(np.ascontiguousarray(volume.data, dtype="<f4").tobytes())


def load_volume(path: str | Path) -> Volume3D:
    """Read an LVOL pair back into a Volume3D.

    Raises VolumeError on a missing file, a header/payload size mismatch, or
    non-finite payload values.
    """
    header_path, raw_path = _lvol_paths(path)
    if not header_path.exists():
        raise VolumeError(f"missing header file {header_path}")
    if not raw_path.exists():
        raise VolumeError(f"missing payload file {raw_path}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeError(f"unparseable header {header_path}: {exc}") from exc
    dims = header.get("dims")
    if not isinstance(dims, list) or len(dims) != 4 or any(int(v) < 1 for v in dims):
        raise VolumeError(f"bad dims in header {header_path}: {dims}")
    if header.get("dtype") != "f32le":
        raise VolumeError(f"unsupported dtype {header.get('dtype')!r}")
    d, h, w, c = (int(v) for v in dims)
    payload = raw_path.read_bytes()
    expected = d * h * w * c * 4
    if len(payload) != expected:
        raise VolumeError(
            f"payload size mismatch for {raw_path}: expected {expected} bytes, got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(d, h, w, c).copy()
    if not np.isfinite(data).all():
        raise VolumeError(f"non-finite values in {raw_path}")
    spacing = tuple(float(s) for s in header.get("spacing", (1.0, 1.0, 1.0)))
    lo = min(-1.0, float(data.min()))
    hi = max(1.0, float(data.max()))
    return Volume3D(data, spacing, (lo, hi))


def save_mask(mask: np.ndarray, path: str | Path, spacing=(1.0, 1.0, 1.0)) -> None:
    """Store a binary mask as a single-channel LVOL volume."""
    save_volume(Volume3D(mask.astype(np.float32), spacing, (0.0, 1.0)), path)


def load_mask(path: str | Path) -> np.ndarray:
    vol = load_volume(path)
    data = vol.data[..., 0]
    mask = data > 0.5
    if not np.all((data == 0) | (data == 1)):
        raise VolumeError(f"mask file {path} is not binary")
    return mask.astype(np.uint8)
