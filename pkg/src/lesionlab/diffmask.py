"""Lesion-mask diffusion: boundary-constrained sampling with control-sphere
conditioning, plus the exact minimal enclosing sphere and smoothing
post-processing.

Mask fields are diffused in a +/-1 encoding (foreground +1, background -1)
so they live in the same value range as image diffusion; -1 is the
"no lesion" empty value used outside the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .engine import (
    Checkpoint,
    TrainConfig,
    _run_training,
    _TrainCase,
    forward_diffuse,
    reverse_step,
)
from .manifests import load_boundary, load_case, load_manifest
from .schedules import DiffusionSchedule, build_schedule
from .unet import Denoiser3D
from .volumes import MaskSet, RoiSpec, crop_pad_array

EMPTY_VALUE = -1.0
DEFAULT_KERNEL = 3
DEFAULT_THRESHOLD = 0.0

_CONTAIN_EPS = 1e-10


class MaskModelError(ValueError):
    pass


@dataclass
class BoundingSphere:
    """Center (z, y, x) in voxel coordinates and radius in voxels."""

    center: tuple[float, float, float]
    radius: float

    def __post_init__(self) -> None:
        if self.radius < 0 or not np.isfinite(self.radius):
            raise MaskModelError(f"invalid sphere radius {self.radius}")
        self.center = tuple(float(c) for c in self.center)


def _circumsphere(pts: np.ndarray):
    """Sphere through all points with center in their affine hull, or None if
    the points are affinely dependent."""
    p0 = pts[0]
    if len(pts) == 1:
        return p0.astype(float), 0.0
    U = pts[1:] - p0
    G = U @ U.T
    rhs = 0.5 * np.einsum("ij,ij->i", U, U)
    try:
        lam = np.linalg.solve(G, rhs)
    except np.linalg.LinAlgError:
        return None
    center = p0 + lam @ U
    return center, float(np.sum((center - p0) ** 2))


def _support_sphere(pts: np.ndarray):
    """Minimal sphere of a support set of at most 4 points (smallest valid
    circumsphere over all subsets)."""
    if len(pts) == 0:
        return np.zeros(3), -1.0
    best = None
    for size in range(1, len(pts) + 1):
        for combo in combinations(range(len(pts)), size):
            cs = _circumsphere(pts[list(combo)])
            if cs is None:
                continue
            center, r2 = cs
            slack = r2 * _CONTAIN_EPS + _CONTAIN_EPS
            if np.all(np.sum((pts - center) ** 2, axis=1) <= r2 + slack):
                if best is None or r2 < best[1]:
                    best = (center, r2)
    if best is None:
        raise MaskModelError("degenerate support set")
    return best


def _min_enclosing_sphere(points: np.ndarray, rng: np.random.Generator):
    """Welzl's algorithm, iterative (explicit stack) so large masks cannot
    blow the recursion limit."""
    points = points[rng.permutation(len(points))]
    result = (np.zeros(3), -1.0)
    stack: list[tuple[int, tuple[int, ...], int]] = [(0, (), 0)]
    while stack:
        idx, support, phase = stack.pop()
        if phase == 0:
            if idx == len(points) or len(support) == 4:
                result = _support_sphere(points[list(support)])
            else:
                stack.append((idx, support, 1))
                stack.append((idx + 1, support, 0))
        else:
            center, r2 = result
            p = points[idx]
            if np.sum((p - center) ** 2) > r2 + r2 * _CONTAIN_EPS + _CONTAIN_EPS:
                stack.append((idx + 1, support + (idx,), 0))
    return result


def bounding_sphere(mask: np.ndarray) -> BoundingSphere:
    """Exact minimal enclosing sphere of the foreground voxel centers."""
    mask = np.asarray(mask).astype(bool)
    if mask.ndim == 4:
        mask = mask[..., 0]
    if not mask.any():
        raise MaskModelError("cannot bound an empty mask")
    coords = np.argwhere(mask).astype(np.float64)
    if len(coords) > 200:
        # Interior voxels are convex combinations of their neighbors and can
        # never be support points, so the surface shell is sufficient.
        surface = mask & ~ndimage.binary_erosion(mask, border_value=0)
        coords = np.argwhere(surface).astype(np.float64)
    center, r2 = _min_enclosing_sphere(coords, np.random.default_rng(0))
    radius = float(np.sqrt(np.maximum(np.sum((coords - center) ** 2, axis=1).max(), 0.0)))
    return BoundingSphere(tuple(center), radius)


def rasterize_sphere(sphere: BoundingSphere, dims: tuple[int, int, int]) -> np.ndarray:
    """Binary volume: voxel on iff its center lies within the sphere radius."""
    if any(d < 1 for d in dims):
        raise MaskModelError(f"dims must be positive, got {dims}")
    zz, yy, xx = np.meshgrid(
        np.arange(dims[0]), np.arange(dims[1]), np.arange(dims[2]), indexing="ij"
    )
    cz, cy, cx = sphere.center
    d2 = (zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2
    return (d2 <= sphere.radius**2 + 1e-9).astype(np.uint8)


def as_boundary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim == 4:
        mask = mask[..., 0]
    vals = np.unique(mask)
    if not np.all(np.isin(vals, (0, 1))):
        raise MaskModelError("boundary mask must be binary")
    if mask.sum() == 0:
        raise MaskModelError("boundary mask is empty")
    return mask.astype(np.uint8)


def constrained_mask_step(
    o_prev: np.ndarray,
    t: int,
    boundary: np.ndarray,
    schedule: DiffusionSchedule,
    eps_b: np.ndarray,
    empty_value: float = EMPTY_VALUE,
) -> np.ndarray:
    """Mask-domain composition: keep the generated field inside the boundary
    and replace the outside with the forward-diffused empty value, so the
    noise statistics stay what the denoiser expects."""
    o_prev = np.asarray(o_prev, dtype=np.float32)
    if o_prev.ndim == 3:
        o_prev = o_prev[..., np.newaxis]
    eps_b = np.asarray(eps_b, dtype=np.float32)
    if eps_b.ndim == 3:
        eps_b = eps_b[..., np.newaxis]
    boundary = np.asarray(boundary)
    if boundary.ndim == 4:
        boundary = boundary[..., 0]
    if o_prev.shape[:3] != boundary.shape or o_prev.shape != eps_b.shape:
        raise MaskModelError(
            f"dim mismatch: o_prev {o_prev.shape}, boundary {boundary.shape}, eps_b {eps_b.shape}"
        )
    empty = np.full_like(o_prev, empty_value)
    if t - 1 == 0:
        outside = empty
    else:
        outside = forward_diffuse(empty, t - 1, eps_b, schedule)
    return np.where(boundary.astype(bool)[..., None], o_prev, outside).astype(np.float32)


def smooth_binarize(
    raw_channel: np.ndarray,
    kernel_size: int = DEFAULT_KERNEL,
    threshold: float = DEFAULT_THRESHOLD,
    boundary: np.ndarray | None = None,
) -> np.ndarray:
    """Mean-filter then threshold a raw mask field; re-intersected with the
    boundary when one is given."""
    if kernel_size % 2 == 0:
        raise MaskModelError(f"kernel size must be odd, got {kernel_size}")
    raw = np.asarray(raw_channel, dtype=np.float32)
    if raw.ndim == 4:
        raw = raw[..., 0]
    smoothed = ndimage.uniform_filter(raw, size=kernel_size, mode="nearest")
    out = (smoothed > threshold).astype(np.uint8)
    if boundary is not None:
        out &= as_boundary(boundary)
    return out


@dataclass
class MaskSample:
    """Raw generated channels plus the post-processed binary masks."""

    raw: np.ndarray  # (D, H, W, n) in [-1, 1]
    masks: MaskSet


def sample_mask(
    mask_model: Denoiser3D | Checkpoint,
    boundary: np.ndarray,
    control_spheres: list[BoundingSphere],
    schedule: DiffusionSchedule | None = None,
    rng: np.random.Generator | None = None,
    kernel_size: int = DEFAULT_KERNEL,
    threshold: float = DEFAULT_THRESHOLD,
    class_names: list[str] | None = None,
) -> MaskSample:
    """Full boundary-constrained reverse loop with control-sphere channels
    concatenated to the input at every step.

    Binarized masks are guaranteed subsets of the boundary; overlaps between
    classes are resolved by channel order (earlier channels win).
    """
    if isinstance(mask_model, Checkpoint):
        if schedule is None:
            schedule = mask_model.schedule
        mask_model = mask_model.denoiser
    if schedule is None or rng is None:
        raise MaskModelError("sample_mask needs a schedule and an rng")
    boundary = as_boundary(boundary)
    n = mask_model.contract.image_channels
    if len(control_spheres) != n:
        raise MaskModelError(f"{n}-channel mask model needs {n} control spheres")
    dims = boundary.shape
    spheres = np.stack(
        [rasterize_sphere(s, dims).astype(np.float32) for s in control_spheres], axis=-1
    )
    x = rng.standard_normal(dims + (n,)).astype(np.float32)
    for t in range(schedule.T, 0, -1):
        o_prev = reverse_step(mask_model, x, t, schedule, rng, concat=spheres)
        eps_b = rng.standard_normal(dims + (n,)).astype(np.float32)
        x = constrained_mask_step(o_prev, t, boundary, schedule, eps_b)
    raw = np.clip(x, -1.0, 1.0)

    names = class_names or [f"class_{i}" for i in range(n)]
    claimed = np.zeros(dims, dtype=np.uint8)
    masks = []
    for i in range(n):
        binary = smooth_binarize(raw[..., i], kernel_size, threshold, boundary)
        binary &= 1 - claimed
        claimed |= binary
        masks.append(binary)
    return MaskSample(raw=raw, masks=MaskSet(masks, names))


def _prepare_mask_case(masks: MaskSet, boundary: np.ndarray, config: TrainConfig) -> _TrainCase:
    boundary = as_boundary(boundary)
    if boundary.shape != masks.spatial_dims:
        raise MaskModelError("boundary dims differ from mask dims")
    if config.roi_size is not None:
        coords = np.argwhere(boundary)
        center = tuple(int(round(c)) for c in coords.mean(axis=0))
        roi = RoiSpec(center, config.roi_size)
        masks = MaskSet(
            [crop_pad_array(m, roi.center, roi.size, 0) for m in masks.masks],
            list(masks.class_names),
        )
        boundary = crop_pad_array(boundary, roi.center, roi.size, 0)
    encoded = masks.stack() * 2.0 - 1.0  # (D, H, W, n) in {-1, +1}
    dims = masks.spatial_dims
    sphere_channels = np.zeros(dims + (masks.n_classes,), dtype=np.float32)
    for i, m in enumerate(masks.masks):
        if m.sum() == 0:
            continue  # empty class: zero sphere channel, target stays all -1
        sphere_channels[..., i] = rasterize_sphere(bounding_sphere(m), dims)
    return _TrainCase(
        x0=encoded.astype(np.float32),
        class_masks=masks.stack(),
        union=boundary[..., None].astype(np.float32),
        tokens=None,
        concat=sphere_channels,
    )


def train_mask_model(manifest, config: TrainConfig) -> Checkpoint:
    """Train the mask-domain denoiser: +/-1-encoded class masks as the image,
    control-sphere channels concatenated, loss restricted to the boundary."""
    if config.conditioning != "none":
        raise MaskModelError("mask models use control-sphere conditioning only")
    if isinstance(manifest, (str, Path)):
        records = load_manifest(manifest)
    else:
        records = list(manifest)
    records = [
        r for r in records if r.role == "pathological" and r.split == "train" and r.mask_paths
    ]
    if not records:
        raise MaskModelError("manifest contains no pathological training cases with masks")
    cases = []
    for rec in records:
        _, masks = load_case(rec)
        if masks.is_empty():
            continue
        boundary = load_boundary(rec)
        cases.append(_prepare_mask_case(masks, boundary, config))
    if not cases:
        raise MaskModelError("no case in the manifest has a nonempty lesion mask")
    n = config.channels
    if any(c.x0.shape[3] != n for c in cases):
        raise MaskModelError(f"config.channels={n} does not match the manifest's mask classes")
    dims = {c.x0.shape for c in cases}
    if len(dims) > 1:
        raise MaskModelError(f"cases must share dims for batched training, got {sorted(dims)}")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    denoiser = Denoiser3D(
        image_channels=n,
        cond_channels=n,
        base_channels=config.base_channels,
        channel_mults=config.channel_mults,
        time_dim=config.time_dim,
        heads=config.heads,
    )
    schedule = build_schedule(config.schedule, config.T)
    loss_trace = _run_training(denoiser, cases, config, schedule, rng, loss_masks="shared")
    return Checkpoint(denoiser, schedule, config, loss_trace, config.seed, domain="mask")
