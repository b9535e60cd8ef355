"""Segmentation and image-quality metrics, plus the diversity and
histogram-shift analyses.

Dice, NSD, and SSIM are reported on a 0-100 scale; PSNR in dB with an
infinite sentinel for identical inputs. SSIM can go below 0 for
anti-correlated inputs and is reported as computed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .histograms import HistControlParams, HistogramCondition, predict_output_histogram

DEFAULT_NSD_TAU = 1.0  # voxel-sized tolerance, scaled by spacing
DEFAULT_PSNR_PEAK = 2.0  # dynamic range of [-1, 1] data
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class MetricError(ValueError):
    pass


def _as_mask(a) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim == 4:
        a = a[..., 0]
    return a.astype(bool)


def _as_image(a) -> np.ndarray:
    a = np.asarray(a.data if hasattr(a, "data") else a, dtype=np.float64)
    if a.ndim == 4:
        a = a[..., 0]
    return a


def dice(a, b) -> float:
    """Overlap score 100 * 2|A n B| / (|A| + |B|); both-empty counts as 100."""
    a, b = _as_mask(a), _as_mask(b)
    if a.shape != b.shape:
        raise MetricError(f"mask dims differ: {a.shape} vs {b.shape}")
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 100.0
    return 100.0 * 2.0 * int((a & b).sum()) / (sa + sb)


def _boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a face-adjacent background (or out-of-volume)
    neighbor."""
    eroded = ndimage.binary_erosion(
        mask, structure=ndimage.generate_binary_structure(3, 1), border_value=0
    )
    return mask & ~eroded


def nsd(a, b, tau: float = DEFAULT_NSD_TAU, spacing=(1.0, 1.0, 1.0)) -> float:
    """Normalized surface distance: the fraction of each mask's boundary
    voxels lying within ``tau`` (in mm, via spacing) of the other's boundary,
    averaged over both directions, times 100."""
    a, b = _as_mask(a), _as_mask(b)
    if a.shape != b.shape:
        raise MetricError(f"mask dims differ: {a.shape} vs {b.shape}")
    if not a.any() and not b.any():
        return 100.0
    if not a.any() or not b.any():
        return 0.0
    ba, bb = _boundary_voxels(a), _boundary_voxels(b)
    spacing = tuple(float(s) for s in spacing)

    def directed(src: np.ndarray, dst: np.ndarray) -> float:
        # Distance (in mm) from every voxel to the nearest dst boundary voxel.
        dist = ndimage.distance_transform_edt(~dst, sampling=spacing)
        return float(np.mean(dist[src] <= tau + 1e-9))

    return 100.0 * 0.5 * (directed(ba, bb) + directed(bb, ba))


def psnr(a, b, region=None, peak: float = DEFAULT_PSNR_PEAK) -> float:
    """10 log10(peak^2 / MSE) over the region; identical inputs give inf."""
    a, b = _as_image(a), _as_image(b)
    if a.shape != b.shape:
        raise MetricError(f"dims differ: {a.shape} vs {b.shape}")
    diff2 = (a - b) ** 2
    if region is not None:
        m = _as_mask(region)
        if m.shape != a.shape:
            raise MetricError("region dims differ from image dims")
        if not m.any():
            raise MetricError("empty region")
        diff2 = diff2[m]
    mse = float(diff2.mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a, b, region=None, window: int = SSIM_WINDOW, data_range: float = DEFAULT_PSNR_PEAK) -> float:
    """Windowed SSIM (uniform window, standard stabilization constants),
    averaged over the region, times 100."""
    a, b = _as_image(a), _as_image(b)
    if a.shape != b.shape:
        raise MetricError(f"dims differ: {a.shape} vs {b.shape}")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def win(x):
        return ndimage.uniform_filter(x, size=window, mode="reflect")

    mu_a, mu_b = win(a), win(b)
    var_a = win(a * a) - mu_a**2
    var_b = win(b * b) - mu_b**2
    cov = win(a * b) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    if region is not None:
        m = _as_mask(region)
        if m.shape != a.shape:
            raise MetricError("region dims differ from image dims")
        if not m.any():
            raise MetricError("empty region")
        return 100.0 * float(ssim_map[m].mean())
    return 100.0 * float(ssim_map.mean())


def diversity_report(paired_samples) -> dict:
    """Mean pairwise PSNR/SSIM over lesion regions for same-input,
    different-seed generation pairs. Lower values mean more diverse output."""
    pairs = list(paired_samples)
    if not pairs:
        raise MetricError("diversity report needs at least one pair")
    psnrs, ssims = [], []
    for gen1, gen2, mask in pairs:
        psnrs.append(psnr(gen1, gen2, region=mask))
        ssims.append(ssim(gen1, gen2, region=mask))
    mean_psnr = math.inf if any(math.isinf(v) for v in psnrs) else float(np.mean(psnrs))
    return {
        "n_pairs": len(pairs),
        "mean_psnr": mean_psnr,
        "mean_ssim": float(np.mean(ssims)),
        "psnr_per_pair": [v if math.isfinite(v) else "inf" for v in psnrs],
        "ssim_per_pair": ssims,
    }


def histogram_shift_report(
    cases: list[list[tuple[HistogramCondition, HistogramCondition]]],
    control_histograms: list[HistogramCondition],
    fitted_params: HistControlParams,
) -> dict:
    """Compare generated lesion histograms against the log-linear control
    model, per control.

    ``cases[i]`` holds (source, generated) histogram pairs produced under
    ``control_histograms[i]``. Reports the per-control mean generated
    histogram, the model-predicted histogram, their L1 gap, and whether mean
    generated intensity increases monotonically across the ordered controls.
    """
    if len(cases) != len(control_histograms):
        raise MetricError("one case group per control histogram required")
    if any(len(group) == 0 for group in cases) or not cases:
        raise MetricError("every control needs at least one generated case")
    per_control = []
    mean_intensities = []
    for group, control in zip(cases, control_histograms):
        gen = np.mean([g.bins for _, g in group], axis=0)
        gen_hist = HistogramCondition(gen / gen.sum(), control.range, control.bin_count)
        src = np.mean([s.bins for s, _ in group], axis=0)
        src_hist = HistogramCondition(src / src.sum(), control.range, control.bin_count)
        predicted = predict_output_histogram(src_hist, control, fitted_params)
        gap = float(np.abs(predicted.bins - gen_hist.bins).sum())
        mean_intensities.append(gen_hist.mean_intensity())
        per_control.append(
            {
                "mean_generated": gen_hist.to_json(),
                "predicted": predicted.to_json(),
                "l1_gap": gap,
                "mean_intensity": gen_hist.mean_intensity(),
                "n_cases": len(group),
            }
        )
    diffs = np.diff(mean_intensities)
    return {
        "per_control": per_control,
        "mean_intensities": mean_intensities,
        "monotone_increasing": bool(np.all(diffs > 0)) if len(diffs) else True,
        "mean_l1_gap": float(np.mean([c["l1_gap"] for c in per_control])),
    }


@dataclass
class MetricReport:
    """Per-case and aggregate metric values for one method/manifest pair."""

    method: str
    manifest_hash: str
    per_case: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    schema_version: int = 1

    def to_json(self) -> str:
        def sanitize(v):
            if isinstance(v, float) and math.isinf(v):
                return "inf"
            if isinstance(v, dict):
                return {k: sanitize(x) for k, x in v.items()}
            if isinstance(v, list):
                return [sanitize(x) for x in v]
            return v

        payload = {
            "schema_version": self.schema_version,
            "method": self.method,
            "manifest_hash": self.manifest_hash,
            "per_case": sanitize(self.per_case),
            "aggregate": sanitize(self.aggregate),
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        return cls(
            method=d["method"],
            manifest_hash=d["manifest_hash"],
            per_case=d["per_case"],
            aggregate=d["aggregate"],
            schema_version=d.get("schema_version", 1),
        )
