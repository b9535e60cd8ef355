"""Report assembly: image-quality and diversity analyses over synthetic
manifests, downstream comparison tables, and figure emission."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .histograms import extract_histogram
from .manifests import CaseRecord, load_case, manifest_hash
from .metrics import MetricReport, diversity_report, psnr, ssim
from .volumes import load_volume


def quality_report(synth_records: list[CaseRecord], method: str) -> MetricReport:
    """PSNR/SSIM between each synthetic case and its source case over the
    lesion region (only meaningful for synthesis onto pathological sources)."""
    per_case = []
    psnrs, ssims = [], []
    for rec in synth_records:
        source = rec.extra.get("source_volume")
        if not source:
            continue
        synth_vol, synth_masks = load_case(rec)
        source_vol = load_volume(source)
        region = synth_masks.union
        if region.sum() == 0:
            continue
        p = psnr(synth_vol, source_vol, region=region)
        s = ssim(synth_vol, source_vol, region=region)
        per_case.append(
            {"volume": rec.volume_path, "source": source, "psnr": p, "ssim": s}
        )
        psnrs.append(p)
        ssims.append(s)
    finite = [v for v in psnrs if math.isfinite(v)]
    aggregate = {
        "psnr_mean": float(np.mean(finite)) if finite else math.inf,
        "ssim_mean": float(np.mean(ssims)) if ssims else 0.0,
        "n_cases": len(per_case),
    }
    return MetricReport(
        method=method, manifest_hash=manifest_hash(synth_records), per_case=per_case, aggregate=aggregate
    )


def diversity_from_manifest(synth_records: list[CaseRecord]) -> dict:
    """Pairwise PSNR/SSIM over lesion regions for manifests holding at least
    two samples per source case (the multiplied synthetic settings)."""
    groups: dict[str, list[CaseRecord]] = {}
    for rec in synth_records:
        src = rec.extra.get("source_volume")
        if src:
            groups.setdefault(src, []).append(rec)
    pairs = []
    for src, recs in sorted(groups.items()):
        if len(recs) < 2:
            continue
        recs = sorted(recs, key=lambda r: r.extra.get("sample_index", 0))
        v1, m1 = load_case(recs[0])
        v2, m2 = load_case(recs[1])
        region = (m1.union | m2.union).astype(np.uint8)
        if region.sum() == 0:
            continue
        pairs.append((v1.data, v2.data, region))
    if not pairs:
        raise ValueError("no same-source sample pairs in the manifest; use multiplier >= 2")
    return diversity_report(pairs)


def downstream_table(rows: dict[str, MetricReport]) -> str:
    """Human-readable per-setting table of class Dice/NSD aggregates."""
    class_names = []
    for rep in rows.values():
        for name in rep.aggregate:
            if name != "overall" and name not in class_names:
                class_names.append(name)
    header = ["setting"] + [f"{n} Dice" for n in class_names] + [f"{n} NSD" for n in class_names] + ["overall Dice"]
    lines = ["  ".join(f"{h:>14s}" for h in header)]
    for setting, rep in rows.items():
        cells = [setting]
        for n in class_names:
            cells.append(f"{rep.aggregate.get(n, {}).get('dice_mean', float('nan')):.2f}")
        for n in class_names:
            cells.append(f"{rep.aggregate.get(n, {}).get('nsd_mean', float('nan')):.2f}")
        cells.append(f"{rep.aggregate['overall']['dice_mean']:.2f}")
        lines.append("  ".join(f"{c:>14s}" for c in cells))
    return "\n".join(lines)


def save_montage(records: list[CaseRecord], path: str | Path, max_cases: int = 6, title: str = "") -> Path:
    """Central-slice montage of a few cases with mask contours."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = records[:max_cases]
    fig, axes = plt.subplots(1, max(len(records), 1), figsize=(2.2 * max(len(records), 1), 2.6))
    if len(records) == 1:
        axes = [axes]
    for ax, rec in zip(axes, records):
        volume, masks = load_case(rec)
        z = volume.spatial_dims[0] // 2
        ax.imshow(volume.data[z, :, :, 0], cmap="gray", vmin=-1, vmax=1)
        colors = ["tab:red", "tab:blue", "tab:green", "tab:orange"]
        for i, m in enumerate(masks.masks):
            if m[z].any():
                ax.contour(m[z], levels=[0.5], colors=colors[i % len(colors)], linewidths=1.0)
        ax.set_axis_off()
        ax.set_title(Path(rec.volume_path).name, fontsize=6)
    if title:
        fig.suptitle(title, fontsize=9)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_histogram_figure(
    records: list[CaseRecord], path: str | Path, bins: int = 64, title: str = ""
) -> Path:
    """Overlaid lesion-region histograms for a set of cases."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.4, 2.8))
    for rec in records:
        volume, masks = load_case(rec)
        if masks.union.sum() == 0:
            continue
        h = extract_histogram(volume, masks.union, bins)
        ax.plot(h.bin_centers(), h.bins, alpha=0.6, linewidth=0.9)
    ax.set_xlabel("normalized intensity")
    ax.set_ylabel("frequency")
    if title:
        ax.set_title(title, fontsize=9)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def write_json(payload, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def sanitize(v):
        if isinstance(v, float) and math.isinf(v):
            return "inf"
        if isinstance(v, dict):
            return {k: sanitize(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [sanitize(x) for x in v]
        if isinstance(v, (np.floating, np.integer)):
            return v.item()
        return v

    path.write_text(json.dumps(sanitize(payload), sort_keys=True, indent=1) + "\n")
    return path
