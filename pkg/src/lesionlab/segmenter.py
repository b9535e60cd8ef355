"""Compact 3D U-Net segmenter: the desk-scale stand-in for the large
downstream segmentation models, used to measure whether synthetic data helps."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .manifests import CaseRecord, load_case, load_manifest, manifest_hash
from .metrics import MetricReport, dice, nsd
from .unet import _norm_groups


class SegmenterError(ValueError):
    pass


@dataclass
class SegmenterConfig:
    base_channels: int = 8
    levels: int = 2
    epochs: int = 40
    learning_rate: float = 2e-3
    batch_size: int = 4
    loss: str = "cross_entropy"
    seed: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SegmenterConfig":
        return cls(**d)


class _ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv3d(in_ch, out_ch, 3, padding=1),
            nn.GroupNorm(_norm_groups(out_ch), out_ch),
            nn.SiLU(),
            nn.Conv3d(out_ch, out_ch, 3, padding=1),
            nn.GroupNorm(_norm_groups(out_ch), out_ch),
            nn.SiLU(),
        )

    def forward(self, x):
        return self.block(x)


class SegUNet3D(nn.Module):
    """Plain encoder/decoder; output channels = lesion classes + background."""

    def __init__(self, class_count: int, base_channels: int = 8, levels: int = 2):
        super().__init__()
        self.class_count = class_count
        chs = [base_channels * (2**i) for i in range(levels)]
        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        in_ch = 1
        for i, ch in enumerate(chs):
            self.encoders.append(_ConvBlock(in_ch, ch))
            self.downs.append(nn.MaxPool3d(2) if i < levels - 1 else nn.Identity())
            in_ch = ch
        self.decoders = nn.ModuleList()
        self.ups = nn.ModuleList()
        for i in reversed(range(levels - 1)):
            self.ups.append(nn.ConvTranspose3d(chs[i + 1], chs[i], 2, stride=2))
            self.decoders.append(_ConvBlock(chs[i] * 2, chs[i]))
        self.head = nn.Conv3d(chs[0], class_count + 1, 1)

    def forward(self, x):
        skips = []
        for enc, down in zip(self.encoders, self.downs):
            x = enc(x)
            skips.append(x)
            x = down(x)
        x = skips.pop()
        for up, dec in zip(self.ups, self.decoders):
            x = up(x)
            x = dec(torch.cat([x, skips.pop()], dim=1))
        return self.head(x)


@dataclass
class SegCheckpoint:
    model: SegUNet3D
    config: SegmenterConfig
    class_count: int
    class_names: list[str]
    loss_trace: list[float] = field(default_factory=list)

    def save(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        torch.save(self.model.state_dict(), out_dir / "weights.pt")
        sidecar = {
            "format_version": 1,
            "domain": "segmenter",
            "config": self.config.to_json(),
            "class_count": self.class_count,
            "class_names": self.class_names,
            "model": {
                "base_channels": self.config.base_channels,
                "levels": self.config.levels,
            },
            "loss_trace": [float(v) for v in self.loss_trace],
        }
        (out_dir / "sidecar.json").write_text(json.dumps(sidecar, sort_keys=True, indent=1))
        return out_dir

    @classmethod
    def load(cls, path: str | Path) -> "SegCheckpoint":
        path = Path(path)
        sidecar = json.loads((path / "sidecar.json").read_text())
        config = SegmenterConfig.from_json(sidecar["config"])
        model = SegUNet3D(sidecar["class_count"], config.base_channels, config.levels)
        model.load_state_dict(torch.load(path / "weights.pt", weights_only=True))
        model.eval()
        return cls(
            model=model,
            config=config,
            class_count=int(sidecar["class_count"]),
            class_names=list(sidecar["class_names"]),
            loss_trace=list(sidecar["loss_trace"]),
        )


def _label_volume(masks) -> np.ndarray:
    """Class labels: 0 background, i + 1 for lesion class i."""
    labels = np.zeros(masks.spatial_dims, dtype=np.int64)
    for i, m in enumerate(masks.masks):
        labels[m.astype(bool)] = i + 1
    return labels


def _resolve(manifest) -> list[CaseRecord]:
    if isinstance(manifest, (str, Path)):
        return load_manifest(manifest)
    return list(manifest)


def train_segmenter(manifest, config: SegmenterConfig, class_count: int | None = None) -> SegCheckpoint:
    """Train the compact segmenter on the image/mask pairs of a manifest's
    training split. Deterministic under the config seed."""
    records = [r for r in _resolve(manifest) if r.split == "train"]
    if not records:
        raise SegmenterError("manifest has no training cases")
    volumes, labels = [], []
    names: list[str] = []
    for rec in records:
        volume, masks = load_case(rec)
        if class_count is None:
            class_count = masks.n_classes
        if rec.mask_paths and masks.n_classes != class_count:
            raise SegmenterError(
                f"class mismatch: expected {class_count} classes, case has {masks.n_classes}"
            )
        if rec.mask_paths:
            names = list(masks.class_names)
            labels.append(_label_volume(masks))
        else:
            labels.append(np.zeros(volume.spatial_dims, dtype=np.int64))
        volumes.append(volume.data[..., 0])
    if class_count is None or class_count < 1:
        raise SegmenterError("could not infer class count from the manifest")
    dims = {v.shape for v in volumes}
    if len(dims) > 1:
        raise SegmenterError(f"cases must share dims, got {sorted(dims)}")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = SegUNet3D(class_count, config.base_channels, config.levels)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    ce = nn.CrossEntropyLoss()
    x_all = np.stack(volumes)[:, None].astype(np.float32)  # (N, 1, D, H, W)
    y_all = np.stack(labels)
    trace: list[float] = []
    model.train()
    for _epoch in range(config.epochs):
        order = rng.permutation(len(records))
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = torch.from_numpy(x_all[idx])
            yb = torch.from_numpy(y_all[idx])
            logits = model(xb)
            loss = ce(logits, yb)
            value = float(loss.detach())
            if not np.isfinite(value):
                raise SegmenterError(f"training diverged at step {len(trace)}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            trace.append(value)
    model.eval()
    return SegCheckpoint(model, config, class_count, names or [f"class_{i}" for i in range(class_count)], trace)


def predict_labels(checkpoint: SegCheckpoint, volume) -> np.ndarray:
    data = volume.data[..., 0] if hasattr(volume, "data") else np.asarray(volume)
    checkpoint.model.eval()
    with torch.no_grad():
        logits = checkpoint.model(torch.from_numpy(data.astype(np.float32))[None, None])
        return logits.argmax(dim=1)[0].numpy()


def eval_segmenter(checkpoint: SegCheckpoint, manifest, split: str = "test") -> MetricReport:
    """Per-class Dice and NSD over the requested split, plus aggregates."""
    records = [r for r in _resolve(manifest) if r.split == split]
    if not records:
        raise SegmenterError(f"manifest has no cases in split {split!r}")
    per_case = []
    per_class_dice: dict[str, list[float]] = {}
    per_class_nsd: dict[str, list[float]] = {}
    for rec in records:
        volume, masks = load_case(rec)
        if rec.mask_paths and masks.n_classes != checkpoint.class_count:
            raise SegmenterError(
                f"class mismatch: checkpoint has {checkpoint.class_count}, case has {masks.n_classes}"
            )
        pred = predict_labels(checkpoint, volume)
        entry = {"volume": rec.volume_path, "classes": {}}
        for i in range(checkpoint.class_count):
            name = checkpoint.class_names[i] if i < len(checkpoint.class_names) else f"class_{i}"
            gt = masks.masks[i] if rec.mask_paths else np.zeros(volume.spatial_dims, dtype=np.uint8)
            pm = (pred == i + 1).astype(np.uint8)
            d = dice(pm, gt)
            s = nsd(pm, gt, spacing=volume.spacing)
            entry["classes"][name] = {"dice": d, "nsd": s}
            per_class_dice.setdefault(name, []).append(d)
            per_class_nsd.setdefault(name, []).append(s)
        per_case.append(entry)
    aggregate = {
        name: {
            "dice_mean": float(np.mean(vals)),
            "dice_std": float(np.std(vals)),
            "nsd_mean": float(np.mean(per_class_nsd[name])),
            "nsd_std": float(np.std(per_class_nsd[name])),
        }
        for name, vals in per_class_dice.items()
    }
    aggregate["overall"] = {
        "dice_mean": float(np.mean([v for vals in per_class_dice.values() for v in vals])),
        "nsd_mean": float(np.mean([v for vals in per_class_nsd.values() for v in vals])),
    }
    return MetricReport(
        method="segmenter", manifest_hash=manifest_hash(records), per_case=per_case, aggregate=aggregate
    )
