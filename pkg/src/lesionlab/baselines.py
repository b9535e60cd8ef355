"""Comparison methods: Copy-Paste, hand-crafted mask/texture synthesis, and
the named engine recipes the diffusion baselines reduce to."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .engine import EngineError, TrainConfig
from .volumes import Volume3D


class BaselineError(ValueError):
    pass


def copy_paste(
    donor_volume: Volume3D,
    donor_mask: np.ndarray,
    target_volume: Volume3D,
    target_location: tuple[int, int, int],
) -> tuple[Volume3D, np.ndarray]:
    """Translate the donor lesion so its bounding-box center lands at
    ``target_location`` and copy the donor voxels under the mask onto the
    target. Off-mask voxels are untouched, bit for bit."""
    donor_mask = np.asarray(donor_mask)
    if donor_mask.ndim == 4:
        donor_mask = donor_mask[..., 0]
    donor_mask = donor_mask.astype(bool)
    out = target_volume.data.copy()
    out_mask = np.zeros(target_volume.spatial_dims, dtype=np.uint8)
    if not donor_mask.any():
        return Volume3D(out, target_volume.spacing, target_volume.intensity_range), out_mask
    coords = np.argwhere(donor_mask)
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    center = (lo + hi) // 2
    offset = np.asarray(target_location, dtype=int) - center
    shifted = coords + offset
    if shifted.min() < 0 or np.any(shifted >= np.asarray(target_volume.spatial_dims)):
        raise BaselineError("translated donor mask falls outside the target volume")
    out[shifted[:, 0], shifted[:, 1], shifted[:, 2]] = donor_volume.data[
        coords[:, 0], coords[:, 1], coords[:, 2]
    ]
    out_mask[shifted[:, 0], shifted[:, 1], shifted[:, 2]] = 1
    return Volume3D(out, target_volume.spacing, target_volume.intensity_range), out_mask


@dataclass
class HandcraftParams:
    """Knobs for the heuristic mask/texture generator. Defaults are tuned on
    phantoms and make no claim of matching any clinical recipe."""

    ellipsoid_count: tuple[int, int] = (1, 3)
    axis_range: tuple[float, float] = (2.0, 4.0)
    morph_ops: tuple[int, int] = (0, 2)
    noise_mean: float = 0.4
    noise_std: float = 0.15
    blur_sigma: float = 0.8
    interp_factor: int = 2

    def __post_init__(self) -> None:
        for name, rng in (
            ("ellipsoid_count", self.ellipsoid_count),
            ("axis_range", self.axis_range),
            ("morph_ops", self.morph_ops),
        ):
            if rng[0] > rng[1] or rng[0] < 0:
                raise BaselineError(f"bad {name} range {rng}")
        if self.ellipsoid_count[1] < 1 or self.axis_range[0] <= 0:
            raise BaselineError("ellipsoid count and axis lengths must be positive")
        if self.interp_factor < 1:
            raise BaselineError("interp_factor must be >= 1")


def _random_ellipsoid(dims, rng, params: HandcraftParams, center=None) -> np.ndarray:
    zz, yy, xx = np.meshgrid(*(np.arange(d) for d in dims), indexing="ij")
    if center is None:
        center = [rng.uniform(0.25 * d, 0.75 * d) for d in dims]
    axes = rng.uniform(*params.axis_range, size=3)
    q = sum(((g - c) / a) ** 2 for g, c, a in zip((zz, yy, xx), center, axes))
    return (q <= 1.0).astype(np.uint8)


def handcrafted_mask(
    dims: tuple[int, int, int], params: HandcraftParams, rng: np.random.Generator
) -> np.ndarray:
    """Union of overlapping random ellipsoids followed by a random sequence of
    dilations and erosions; retried until nonempty."""
    if any(d < 1 for d in dims):
        raise BaselineError(f"dims must be positive, got {dims}")
    for _ in range(10):
        count = int(rng.integers(params.ellipsoid_count[0], params.ellipsoid_count[1] + 1))
        anchor = [rng.uniform(0.3 * d, 0.7 * d) for d in dims]
        mask = np.zeros(dims, dtype=np.uint8)
        for i in range(max(count, 1)):
            jitter = [c + rng.uniform(-2, 2) for c in anchor] if i else anchor
            mask |= _random_ellipsoid(dims, rng, params, center=jitter)
        n_ops = int(rng.integers(params.morph_ops[0], params.morph_ops[1] + 1))
        for _ in range(n_ops):
            if rng.random() < 0.5:
                mask = ndimage.binary_dilation(mask).astype(np.uint8)
            else:
                mask = ndimage.binary_erosion(mask).astype(np.uint8)
        if mask.any():
            return mask
    raise BaselineError("handcrafted mask came out empty after retries")


def handcrafted_texture(
    target: Volume3D, mask: np.ndarray, params: HandcraftParams, rng: np.random.Generator
) -> Volume3D:
    """Fill the masked region with blurred, interpolated Gaussian noise around
    the configured mean, blended at the mask edge. Off-mask voxels are
    returned unchanged, bit for bit."""
    mask = np.asarray(mask)
    if mask.ndim == 4:
        mask = mask[..., 0]
    if mask.shape != target.spatial_dims:
        raise BaselineError(f"mask dims {mask.shape} differ from target {target.spatial_dims}")
    mask = mask.astype(bool)
    dims = target.spatial_dims
    f = params.interp_factor
    coarse_dims = tuple(max(d // f, 1) for d in dims)
    coarse = params.noise_mean + params.noise_std * rng.standard_normal(coarse_dims)
    fill = ndimage.zoom(coarse, [d / c for d, c in zip(dims, coarse_dims)], order=1)
    fill = ndimage.gaussian_filter(fill, sigma=params.blur_sigma)
    # Blend weight saturates to 1 in the mask interior and feathers the rim;
    # it is exactly zero outside the mask.
    w = np.clip(ndimage.gaussian_filter(mask.astype(np.float64), sigma=1.0) * 2.0, 0.0, 1.0)
    blended = (1.0 - w) * target.data[..., 0] + w * fill
    out = np.where(mask, blended.astype(np.float32), target.data[..., 0])
    return Volume3D(out[..., np.newaxis], target.spacing, target.intensity_range)


BASELINE_NAMES = (
    "repaint",
    "cond_diffusion",
    "lefusion",
    "lefusion_h",
    "lefusion_j",
    "lefusion_j_h",
)


def baseline_recipe(name: str, channels: int | None = None, **overrides) -> TrainConfig:
    """Engine config implementing a named method: the baselines differ from
    the lesion-focused variants only in loss mode, conditioning, sampler,
    and channel count."""
    recipes = {
        "repaint": dict(loss_mode="global", conditioning="none", sampler="inpaint"),
        "cond_diffusion": dict(
            loss_mode="global", conditioning="concat_background_mask", sampler="plain"
        ),
        "lefusion": dict(loss_mode="lesion_focused", conditioning="none", sampler="inpaint"),
        "lefusion_h": dict(loss_mode="lesion_focused", conditioning="histogram", sampler="inpaint"),
        "lefusion_j": dict(
            loss_mode="lesion_focused", conditioning="none", sampler="inpaint", channels=2
        ),
        "lefusion_j_h": dict(
            loss_mode="lesion_focused", conditioning="histogram", sampler="inpaint", channels=2
        ),
    }
    if name not in recipes:
        raise EngineError(f"unknown method {name!r}; valid methods: {', '.join(BASELINE_NAMES)}")
    kwargs = dict(recipes[name])
    if channels is not None:
        kwargs["channels"] = channels
    kwargs.update(overrides)
    return TrainConfig(**kwargs)
