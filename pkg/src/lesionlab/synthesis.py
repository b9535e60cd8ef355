"""Synthetic-case generation: applies a named method to a manifest and writes
new synthetic cases + manifest.

Settings mirror the downstream-augmentation protocol: synthesizing onto
pathological cases reuses their real masks; synthesizing onto normals takes
masks from a donor, the hand-crafted generator, or the mask-diffusion model;
a multiplier > 1 produces several samples per source case.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .baselines import HandcraftParams, copy_paste, handcrafted_mask, handcrafted_texture
from .diffmask import BoundingSphere, bounding_sphere, sample_mask
from .engine import Checkpoint, sample_inpaint, sample_plain
from .histograms import HistogramClusterModel, extract_histogram, sample_inference_histogram
from .manifests import CaseRecord, load_boundary, load_case, save_manifest
from .volumes import MaskSet, Volume3D, save_mask, save_volume

MASK_SOURCES = ("real", "copied", "handcrafted", "diffmask")


class SynthesisError(ValueError):
    pass


@dataclass
class SynthesisPlan:
    """Everything a synthesis run needs beyond the input manifest."""

    method: str
    source_role: str = "pathological"  # pathological -> P'-style, normal -> N'-style
    mask_source: str = "real"
    multiplier: int = 1
    texture_checkpoint: Checkpoint | None = None
    mask_checkpoint: Checkpoint | None = None
    cluster_model: HistogramClusterModel | None = None
    histogram_strategy: str = "cluster_centroid"
    handcraft: HandcraftParams | None = None
    sphere_jitter: float = 1.0
    sphere_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.mask_source not in MASK_SOURCES:
            raise SynthesisError(f"unknown mask source {self.mask_source!r}")
        if self.source_role == "normal" and self.mask_source == "real":
            raise SynthesisError("normal cases carry no real lesion masks; pick a mask source")
        if self.multiplier < 1:
            raise SynthesisError("multiplier must be >= 1")


def _donor(records: list[CaseRecord], rng: np.random.Generator) -> CaseRecord:
    donors = [r for r in records if r.role == "pathological" and r.split == "train" and r.mask_paths]
    if not donors:
        raise SynthesisError("no pathological donor cases available")
    return donors[int(rng.integers(len(donors)))]


def _handcrafted_mask_set(
    dims, class_names, boundary, params: HandcraftParams, rng: np.random.Generator
) -> MaskSet:
    masks = []
    carrier = None
    for depth, _name in enumerate(class_names):
        p = params if depth == 0 else HandcraftParams(
            ellipsoid_count=(1, 1),
            axis_range=(max(params.axis_range[0] * 0.4, 1.0), max(params.axis_range[1] * 0.5, 1.2)),
            morph_ops=(0, 1),
            noise_mean=params.noise_mean,
            noise_std=params.noise_std,
            blur_sigma=params.blur_sigma,
            interp_factor=params.interp_factor,
        )
        m = handcrafted_mask(dims, p, rng) & boundary
        if depth == 0:
            carrier = m.copy()
        else:
            m &= carrier  # nested classes stay inside the first one
            carrier = (carrier & ~m).astype(np.uint8)
        masks.append(m.astype(np.uint8))
    if carrier is not None:
        masks[0] = carrier
    return MaskSet(masks, list(class_names))


def _diffmask_mask_set(
    plan: SynthesisPlan,
    boundary: np.ndarray,
    donor_masks: MaskSet,
    rng: np.random.Generator,
) -> MaskSet:
    ck = plan.mask_checkpoint
    if ck is None:
        raise SynthesisError("diffmask mask source needs a mask checkpoint")
    spheres = []
    for m in donor_masks.masks:
        if m.sum() == 0:
            # empty donor class: park the sphere outside the volume so the
            # rasterized condition channel stays all-zero
            spheres.append(BoundingSphere((-1e3, -1e3, -1e3), 0.0))
            continue
        s = bounding_sphere(m)
        jitter = rng.uniform(-plan.sphere_jitter, plan.sphere_jitter, size=3)
        spheres.append(
            BoundingSphere(tuple(np.asarray(s.center) + jitter), s.radius * plan.sphere_scale)
        )
    sample = sample_mask(ck, boundary, spheres, rng=rng, class_names=list(donor_masks.class_names))
    return sample.masks


def _masks_for_target(
    plan: SynthesisPlan,
    target: CaseRecord,
    records: list[CaseRecord],
    rng: np.random.Generator,
) -> tuple[MaskSet, CaseRecord | None]:
    if plan.mask_source == "real":
        if not target.mask_paths:
            raise SynthesisError(f"case {target.volume_path} has no real masks")
        _, masks = load_case(target)
        return masks, None
    donor = _donor(records, rng)
    _, donor_masks = load_case(donor)
    if plan.mask_source == "copied":
        return donor_masks, donor
    boundary = load_boundary(target)
    if plan.mask_source == "handcrafted":
        params = plan.handcraft or HandcraftParams()
        dims = boundary.shape
        return _handcrafted_mask_set(dims, donor_masks.class_names, boundary, params, rng), donor
    return _diffmask_mask_set(plan, boundary, donor_masks, rng), donor


def _histogram_condition(plan: SynthesisPlan, classes: int, donor: CaseRecord | None, rng):
    def draw():
        donor_pool = None
        if plan.histogram_strategy == "donor_lesion":
            if donor is None:
                raise SynthesisError("donor_lesion strategy needs a donor case")
            dvol, dmasks = load_case(donor)
            donor_pool = [extract_histogram(dvol, dmasks.union)]
        return sample_inference_histogram(
            plan.histogram_strategy,
            rng,
            cluster_model=plan.cluster_model,
            donor_pool=donor_pool,
        )

    if classes > 1:
        return [draw() for _ in range(classes)]
    return draw()


def synthesize_case(
    plan: SynthesisPlan,
    target: CaseRecord,
    records: list[CaseRecord],
    rng: np.random.Generator,
) -> tuple[Volume3D, MaskSet]:
    """Produce one synthetic volume + masks for a target case."""
    volume, _ = load_case(target)
    masks, donor = _masks_for_target(plan, target, records, rng)
    method = plan.method

    if method == "copy_paste":
        if donor is None:
            donor = _donor(records, rng)
        donor_vol, donor_masks = load_case(donor)
        out = volume
        pasted = []
        for m in donor_masks.masks:
            if m.sum() == 0:
                pasted.append(np.zeros(volume.spatial_dims, dtype=np.uint8))
                continue
            coords = np.argwhere(m)
            center = tuple(((coords.min(axis=0) + coords.max(axis=0)) // 2).astype(int))
            out, placed = copy_paste(donor_vol, m, out, center)
            pasted.append(placed)
        return out, MaskSet(pasted, list(donor_masks.class_names))

    if method == "handcrafted":
        params = plan.handcraft or HandcraftParams()
        out = volume
        for m in masks.masks:
            if m.sum():
                out = handcrafted_texture(out, m, params, rng)
        return out, masks

    ck = plan.texture_checkpoint
    if ck is None:
        raise SynthesisError(f"method {method!r} needs a texture checkpoint")
    condition = None
    if ck.config.conditioning == "histogram":
        condition = _histogram_condition(plan, ck.config.channels, donor or target, rng)
    if ck.config.sampler == "plain":
        out = sample_plain(ck.denoiser, volume, masks, ck.schedule, rng)
    else:
        out = sample_inpaint(
            ck.denoiser,
            volume,
            masks,
            ck.schedule,
            rng,
            condition=condition,
            resample_jumps=ck.config.resample_jumps,
        )
    return out, masks


def synthesize_dataset(
    records: list[CaseRecord],
    plan: SynthesisPlan,
    out_dir: str | Path,
    seed: int,
) -> Path:
    """Apply a synthesis plan to every matching source case and write the
    synthetic manifest. Deterministic under (records, plan, seed)."""
    out_dir = Path(out_dir)
    cases_dir = out_dir / "cases"
    cases_dir.mkdir(parents=True, exist_ok=True)
    targets = [r for r in records if r.role == plan.source_role and r.split == "train"]
    if not targets:
        raise SynthesisError(f"no {plan.source_role} training cases in the manifest")
    synth_records = []
    case_seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=len(targets) * plan.multiplier)
    idx = 0
    for target in targets:
        for m in range(plan.multiplier):
            case_seed = int(case_seeds[idx])
            rng = np.random.default_rng(case_seed)
            volume, masks = synthesize_case(plan, target, records, rng)
            stem = cases_dir / f"synth_{idx:04d}"
            save_volume(volume, stem)
            mask_paths = []
            for name, mask in zip(masks.class_names, masks.masks):
                mpath = Path(f"{stem}_mask_{name}")
                save_mask(mask, mpath, volume.spacing)
                mask_paths.append(str(mpath))
            synth_records.append(
                CaseRecord(
                    volume_path=str(stem),
                    mask_paths=mask_paths,
                    role="synthetic",
                    provenance=f"{plan.method}:{plan.mask_source}",
                    seed=case_seed,
                    split="train",
                    class_names=list(masks.class_names),
                    boundary_path=target.boundary_path,
                    extra={"source_volume": target.volume_path, "sample_index": m},
                )
            )
            idx += 1
    return save_manifest(synth_records, out_dir / "manifest.json")
