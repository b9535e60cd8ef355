"""Forward diffusion, reverse sampling, the lesion-focused objective, and the
background-preserving inpainting sampler.

The samplers keep the evolving state as numpy (D, H, W, C) arrays and call
the torch denoiser through predict_noise, so every sampling run is a pure
function of (weights, inputs, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .histograms import TOKEN_DIM, compose_channels, encode_condition, extract_histogram
from .manifests import CaseRecord, load_case, load_manifest
from .schedules import DiffusionSchedule, build_schedule
from .unet import Denoiser3D
from .volumes import MaskSet, RoiSpec, Volume3D, crop_pad_mask_set, crop_pad_roi

LOSS_MODES = ("lesion_focused", "global")
CONDITIONING_MODES = ("none", "histogram", "concat_background_mask")
SAMPLERS = ("inpaint", "plain")

CHECKPOINT_WEIGHTS = "weights.pt"
CHECKPOINT_SIDECAR = "sidecar.json"


class EngineError(ValueError):
    pass


def _as_4d(x: np.ndarray, name: str = "volume") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[..., np.newaxis]
    if x.ndim != 4:
        raise EngineError(f"{name} must be 3D or 4D, got shape {x.shape}")
    return x


def forward_diffuse(x0: np.ndarray, t: int, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """Noised sample sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    x0 = _as_4d(x0, "x0")
    eps = _as_4d(eps, "eps")
    if x0.shape != eps.shape:
        raise EngineError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    if not 1 <= t <= schedule.T:
        raise EngineError(f"t={t} outside [1, {schedule.T}]")
    abar = schedule.alpha_bar(t)
    return (np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps).astype(np.float32)


def _masked_mse(pred: torch.Tensor, eps: torch.Tensor, masks: torch.Tensor, channel_masks: bool) -> torch.Tensor:
    """Mean squared error over masked voxels, summed over classes.

    ``masks`` has one channel per class when channel_masks, else a single
    channel applied to every prediction channel. Mean (not sum) over masked
    voxels keeps the loss magnitude lesion-size invariant.
    """
    diff2 = (eps - pred) ** 2
    if channel_masks:
        if masks.shape != pred.shape:
            raise EngineError(f"per-channel masks shape {tuple(masks.shape)} != pred {tuple(pred.shape)}")
        per_class = (masks * diff2).sum(dim=(0, 2, 3, 4))
        counts = masks.sum(dim=(0, 2, 3, 4)).clamp(min=1.0)
        return (per_class / counts).sum()
    if masks.shape[1] != 1 or masks.shape[2:] != pred.shape[2:]:
        raise EngineError(f"shared mask shape {tuple(masks.shape)} incompatible with pred {tuple(pred.shape)}")
    total = (masks * diff2).sum()
    count = (masks.sum() * pred.shape[1]).clamp(min=1.0)
    return total / count


def lesion_focused_loss(pred_noise, eps, mask_set, channel_masks: bool = True):
    """Noise-prediction loss restricted to lesion voxels.

    Accepts torch tensors shaped (B, C, D, H, W) (differentiable path) or
    numpy arrays shaped (D, H, W, C); ``mask_set`` may be a MaskSet or a mask
    array. Voxels outside the masks contribute exactly zero.
    """
    if isinstance(pred_noise, torch.Tensor):
        if not isinstance(mask_set, torch.Tensor):
            raise EngineError("torch predictions need a torch mask tensor")
        return _masked_mse(pred_noise, eps, mask_set, channel_masks)
    # float64 throughout the reference path so finite-difference probes of the
    # loss surface resolve below 1e-6
    pred = _as_4d(np.asarray(pred_noise, dtype=np.float64), "pred_noise")
    eps = _as_4d(np.asarray(eps, dtype=np.float64), "eps")
    if pred.shape != eps.shape:
        raise EngineError(f"pred shape {pred.shape} != eps shape {eps.shape}")
    if isinstance(mask_set, MaskSet):
        m = mask_set.stack() if channel_masks else mask_set.union[..., None]
    else:
        m = np.asarray(mask_set)
        m = _as_4d(m, "mask")
    m = m.astype(np.float64)
    if channel_masks and m.shape[3] != pred.shape[3]:
        raise EngineError(f"mask channels {m.shape[3]} != prediction channels {pred.shape[3]}")

    def to_t(a):
        return torch.from_numpy(np.ascontiguousarray(np.moveaxis(a, 3, 0)))[None]

    return float(_masked_mse(to_t(pred), to_t(eps), to_t(m), channel_masks))


def global_loss(pred_noise, eps) -> float:
    """Plain everywhere-MSE objective (the inpainting-baseline training loss)."""
    pred = _as_4d(np.asarray(pred_noise, dtype=np.float64))
    eps = _as_4d(np.asarray(eps, dtype=np.float64))
    if pred.shape != eps.shape:
        raise EngineError(f"pred shape {pred.shape} != eps shape {eps.shape}")
    return float(np.mean((pred - eps) ** 2))


def condition_tokens(condition) -> np.ndarray | None:
    """Normalize a condition (tokens array, histogram, or list of histograms)."""
    if condition is None:
        return None
    if isinstance(condition, np.ndarray):
        return condition.astype(np.float32)
    return encode_condition(condition)


def predict_noise(denoiser: Denoiser3D, x_in: np.ndarray, t: int, condition=None) -> np.ndarray:
    """Run the denoiser on one volume, enforcing its channel/conditioning contract."""
    contract = denoiser.contract
    x_in = _as_4d(x_in, "x_in")
    if x_in.shape[3] != contract.in_channels:
        raise EngineError(
            f"input has {x_in.shape[3]} channels but the denoiser expects {contract.in_channels}"
        )
    tokens = condition_tokens(condition)
    if contract.context_token_dim is not None and tokens is None:
        raise EngineError("denoiser requires a condition but none was given")
    if contract.context_token_dim is None and tokens is not None:
        raise EngineError("denoiser takes no condition")
    if tokens is not None and tokens.shape[1] != contract.context_token_dim:
        raise EngineError(
            f"condition token dim {tokens.shape[1]} != contract {contract.context_token_dim}"
        )
    denoiser.eval()
    with torch.no_grad():
        xt = torch.from_numpy(np.ascontiguousarray(np.moveaxis(x_in, 3, 0), dtype=np.float32))[None]
        tt = torch.tensor([t], dtype=torch.long)
        ctx = None if tokens is None else torch.from_numpy(tokens)[None]
        out = denoiser(xt, tt, ctx)[0]
    result = np.moveaxis(out.numpy(), 0, 3)  # (C, D, H, W) -> (D, H, W, C)
    if not np.isfinite(result).all():
        raise EngineError("denoiser produced non-finite output")
    return result.astype(np.float32)


def reverse_step(
    denoiser: Denoiser3D,
    x_t: np.ndarray,
    t: int,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
    condition=None,
    concat: np.ndarray | None = None,
    clip_denoised: bool = True,
) -> np.ndarray:
    """One reverse-diffusion step: posterior mean from predicted noise plus
    sigma_t * z, with z = 0 at t = 1.

    The posterior mean is computed through the implied clean-sample estimate,
    which by default is clipped to the normalized value range; this keeps
    imperfectly denoised trajectories from drifting off-scale (without
    clipping, the two parameterizations are algebraically identical).
    """
    if not 1 <= t <= schedule.T:
        raise EngineError(f"t={t} outside [1, {schedule.T}]")
    x_t = _as_4d(x_t, "x_t")
    x_in = x_t if concat is None else np.concatenate([x_t, _as_4d(concat, "concat")], axis=3)
    eps_hat = predict_noise(denoiser, x_in, t, condition)
    abar = schedule.alpha_bar(t)
    abar_prev = schedule.alpha_bar(t - 1)
    x0_hat = (x_t - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)
    if clip_denoised:
        x0_hat = np.clip(x0_hat, -1.0, 1.0)
    beta = schedule.beta(t)
    mean = (
        np.sqrt(abar_prev) * beta * x0_hat + np.sqrt(schedule.alpha(t)) * (1.0 - abar_prev) * x_t
    ) / (1.0 - abar)
    if t > 1:
        sigma = np.sqrt(schedule.posterior_variance(t))
        mean = mean + sigma * rng.standard_normal(x_t.shape)
    return mean.astype(np.float32)


def inpaint_step(
    o_prev: np.ndarray,
    x0_hat: np.ndarray,
    t: int,
    eps_b: np.ndarray,
    mask_set: MaskSet,
    schedule: DiffusionSchedule,
) -> np.ndarray:
    """Per-step composition: generated foreground inside the lesion masks,
    forward-diffused real background outside. At t - 1 == 0 the background is
    the unnoised input, bit for bit."""
    o_prev = _as_4d(o_prev, "o_prev")
    x0_hat = _as_4d(x0_hat, "x0_hat")
    if o_prev.shape != x0_hat.shape:
        raise EngineError(f"o_prev shape {o_prev.shape} != x0_hat shape {x0_hat.shape}")
    if o_prev.shape[:3] != mask_set.spatial_dims:
        raise EngineError("mask dims differ from volume dims")
    if t - 1 == 0:
        background = x0_hat
    else:
        background = forward_diffuse(x0_hat, t - 1, _as_4d(eps_b, "eps_b"), schedule)
    fg = mask_set.union.astype(bool)[..., None]
    return np.where(fg, o_prev, background).astype(np.float32)


def sample_inpaint(
    denoiser: Denoiser3D,
    x0_hat,
    mask_set: MaskSet,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
    condition=None,
    resample_jumps: int = 0,
) -> Volume3D:
    """Full T -> 0 inpainting loop.

    Background voxels of the result equal the input exactly; foreground
    voxels are clamped to [-1, 1]. resample_jumps > 0 re-noises each step
    and repeats it (the inference-stage resampling used by the
    training-free inpainting baseline).
    """
    if isinstance(x0_hat, Volume3D):
        x0 = x0_hat.data
        spacing = x0_hat.spacing
    else:
        x0 = _as_4d(np.asarray(x0_hat, dtype=np.float32), "x0_hat")
        spacing = (1.0, 1.0, 1.0)
    if x0.shape[:3] != mask_set.spatial_dims:
        raise EngineError("mask dims differ from volume dims")
    n = denoiser.contract.image_channels
    if n > 1 and mask_set.n_classes != n:
        raise EngineError(f"{n}-channel denoiser needs {n} class masks, got {mask_set.n_classes}")
    tokens = condition_tokens(condition)
    spatial = x0.shape[:3]

    def widen(img: np.ndarray) -> np.ndarray:
        return np.repeat(img, n, axis=3) if n > 1 else img

    x_state = rng.standard_normal(spatial + (n,)).astype(np.float32)
    x_img = x0
    for t in range(schedule.T, 0, -1):
        for attempt in range(resample_jumps + 1):
            o_prev = reverse_step(denoiser, x_state, t, schedule, rng, condition=tokens)
            fg = compose_channels(o_prev, mask_set) if n > 1 else o_prev
            eps_b = rng.standard_normal(spatial + (1,)).astype(np.float32)
            x_img = inpaint_step(fg, x0, t, eps_b, mask_set, schedule)
            if attempt < resample_jumps and t > 1:
                z = rng.standard_normal(x_img.shape).astype(np.float32)
                renoised = np.sqrt(1.0 - schedule.beta(t)) * x_img + np.sqrt(schedule.beta(t)) * z
                x_state = widen(renoised.astype(np.float32))
        x_state = widen(x_img)
    return Volume3D(np.clip(x_img, -1.0, 1.0), spacing, (-1.0, 1.0))


def concat_condition_channels(x0: np.ndarray, mask_set: MaskSet) -> np.ndarray:
    """Condition channels for the concat-conditioned baseline: the background
    image (lesion region blanked to -1) plus one channel per class mask."""
    x0 = _as_4d(x0, "x0")
    union = mask_set.union.astype(bool)[..., None]
    background = np.where(union, np.float32(-1.0), x0[..., :1])
    return np.concatenate([background, mask_set.stack()], axis=3).astype(np.float32)


def sample_plain(
    denoiser: Denoiser3D,
    x0_hat,
    mask_set: MaskSet,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
) -> Volume3D:
    """Plain reverse loop with concatenated conditioning and no composition.

    The model generates every voxel, so background preservation is NOT
    guaranteed (the contrast the inpainting composition exists to fix).
    """
    if isinstance(x0_hat, Volume3D):
        x0 = x0_hat.data
        spacing = x0_hat.spacing
    else:
        x0 = _as_4d(np.asarray(x0_hat, dtype=np.float32), "x0_hat")
        spacing = (1.0, 1.0, 1.0)
    n = denoiser.contract.image_channels
    concat = concat_condition_channels(x0, mask_set)
    x = rng.standard_normal(x0.shape[:3] + (n,)).astype(np.float32)
    for t in range(schedule.T, 0, -1):
        x = reverse_step(denoiser, x, t, schedule, rng, concat=concat)
    return Volume3D(np.clip(x, -1.0, 1.0), spacing, (-1.0, 1.0))


@dataclass
class TrainConfig:
    """Engine configuration; baseline methods are config points of this engine."""

    T: int = 1000
    schedule: str = "cosine"
    learning_rate: float = 1e-3
    batch_size: int = 4
    epochs: int = 1
    loss_mode: str = "lesion_focused"
    conditioning: str = "none"
    channels: int = 1
    seed: int = 0
    sampler: str = "inpaint"
    resample_jumps: int = 0
    base_channels: int = 16
    channel_mults: tuple[int, ...] = (1, 2)
    time_dim: int = 64
    heads: int = 2
    histogram_bins: int = 64
    roi_size: tuple[int, int, int] | None = None

    def __post_init__(self) -> None:
        if self.loss_mode not in LOSS_MODES:
            raise EngineError(f"unknown loss mode {self.loss_mode!r}")
        if self.conditioning not in CONDITIONING_MODES:
            raise EngineError(f"unknown conditioning mode {self.conditioning!r}")
        if self.sampler not in SAMPLERS:
            raise EngineError(f"unknown sampler {self.sampler!r}")
        if self.channels < 1:
            raise EngineError("channels must be >= 1")
        self.channel_mults = tuple(self.channel_mults)
        if self.roi_size is not None:
            self.roi_size = tuple(self.roi_size)

    def to_json(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        d["roi_size"] = list(self.roi_size) if self.roi_size else None
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["channel_mults"] = tuple(d.get("channel_mults", (1, 2)))
        if d.get("roi_size"):
            d["roi_size"] = tuple(d["roi_size"])
        return cls(**d)


@dataclass
class Checkpoint:
    """Trained denoiser plus everything needed to reproduce its sampling."""

    denoiser: Denoiser3D
    schedule: DiffusionSchedule
    config: TrainConfig
    loss_trace: list[float] = field(default_factory=list)
    seed: int = 0
    domain: str = "texture"

    def save(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        torch.save(self.denoiser.state_dict(), out_dir / CHECKPOINT_WEIGHTS)
        sidecar = {
            "format_version": 1,
            "domain": self.domain,
            "seed": self.seed,
            "config": self.config.to_json(),
            "model": self.denoiser.hparams,
            "schedule": {"kind": self.schedule.kind, "T": self.schedule.T},
            "loss_trace": [float(v) for v in self.loss_trace],
        }
        (out_dir / CHECKPOINT_SIDECAR).write_text(json.dumps(sidecar, sort_keys=True, indent=1))
        return out_dir

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        sidecar = json.loads((path / CHECKPOINT_SIDECAR).read_text())
        hp = dict(sidecar["model"])
        hp["channel_mults"] = tuple(hp["channel_mults"])
        denoiser = Denoiser3D(**hp)
        denoiser.load_state_dict(torch.load(path / CHECKPOINT_WEIGHTS, weights_only=True))
        denoiser.eval()
        return cls(
            denoiser=denoiser,
            schedule=build_schedule(sidecar["schedule"]["kind"], sidecar["schedule"]["T"]),
            config=TrainConfig.from_json(sidecar["config"]),
            loss_trace=list(sidecar["loss_trace"]),
            seed=int(sidecar["seed"]),
            domain=sidecar["domain"],
        )


def _lesion_roi(mask_set: MaskSet, size: tuple[int, int, int]) -> RoiSpec:
    union = mask_set.union
    if union.sum() == 0:
        center = tuple(d // 2 for d in union.shape)
    else:
        coords = np.argwhere(union)
        center = tuple(int(round(c)) for c in coords.mean(axis=0))
    return RoiSpec(center, size)


@dataclass
class _TrainCase:
    x0: np.ndarray            # (D, H, W, 1)
    class_masks: np.ndarray   # (D, H, W, n_classes)
    union: np.ndarray         # (D, H, W, 1)
    tokens: np.ndarray | None
    concat: np.ndarray | None


def _prepare_case(volume: Volume3D, masks: MaskSet, config: TrainConfig) -> _TrainCase:
    if config.roi_size is not None:
        roi = _lesion_roi(masks, config.roi_size)
        volume = crop_pad_roi(volume, roi)
        masks = crop_pad_mask_set(masks, roi)
    x0 = volume.data[..., :1]
    tokens = None
    if config.conditioning == "histogram":
        if config.channels > 1:
            hists = [
                extract_histogram(volume, m, config.histogram_bins) for m in masks.masks
            ]
            tokens = encode_condition(hists)
        else:
            tokens = encode_condition(extract_histogram(volume, masks.union, config.histogram_bins))
    concat = None
    if config.conditioning == "concat_background_mask":
        concat = concat_condition_channels(x0, masks)
    return _TrainCase(
        x0=x0.astype(np.float32),
        class_masks=masks.stack(),
        union=masks.union[..., None].astype(np.float32),
        tokens=tokens,
        concat=concat,
    )


def _resolve_records(manifest) -> list[CaseRecord]:
    if isinstance(manifest, (str, Path)):
        return load_manifest(manifest)
    return list(manifest)


def train_texture_model(manifest, config: TrainConfig) -> Checkpoint:
    """Train a texture denoiser on the pathological training cases of a manifest.

    Returns an in-memory checkpoint carrying the weights, schedule, config,
    and per-step loss trace; training aborts with a diagnostic on NaN loss.
    """
    records = [
        r
        for r in _resolve_records(manifest)
        if r.role == "pathological" and r.split == "train" and r.mask_paths
    ]
    if not records:
        raise EngineError("manifest contains no pathological training cases with masks")
    cases = []
    for rec in records:
        volume, masks = load_case(rec)
        if masks.is_empty():
            continue
        cases.append(_prepare_case(volume, masks, config))
    if not cases:
        raise EngineError("no case in the manifest has a nonempty lesion mask")
    dims = {c.x0.shape for c in cases}
    if len(dims) > 1:
        raise EngineError(f"cases must share dims for batched training, got {sorted(dims)}; set roi_size")
    n = config.channels
    if n > 1 and any(c.class_masks.shape[3] != n for c in cases):
        raise EngineError(f"joint {n}-channel training needs {n} mask classes per case")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    cond_channels = cases[0].concat.shape[3] if cases[0].concat is not None else 0
    denoiser = Denoiser3D(
        image_channels=n,
        cond_channels=cond_channels,
        base_channels=config.base_channels,
        channel_mults=config.channel_mults,
        time_dim=config.time_dim,
        context_token_dim=TOKEN_DIM if config.conditioning == "histogram" else None,
        heads=config.heads,
    )
    schedule = build_schedule(config.schedule, config.T)
    loss_trace = _run_training(denoiser, cases, config, schedule, rng, loss_masks="lesion")
    return Checkpoint(denoiser, schedule, config, loss_trace, config.seed, domain="texture")


def _run_training(
    denoiser: Denoiser3D,
    cases: list[_TrainCase],
    config: TrainConfig,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
    loss_masks: str,
) -> list[float]:
    """Shared optimization loop. loss_masks selects what restricts the loss:
    'lesion' pairs per-class masks with channels (falling back to the union
    for single-channel models); 'shared' applies the case's union field (the
    boundary, for mask-domain training) to every channel."""
    n = denoiser.contract.image_channels
    sqrt_abar = np.sqrt(schedule.alpha_bars).astype(np.float32)
    sqrt_1m = np.sqrt(1.0 - schedule.alpha_bars).astype(np.float32)
    opt = torch.optim.Adam(denoiser.parameters(), lr=config.learning_rate)
    denoiser.train()
    trace: list[float] = []

    def chw(a: np.ndarray) -> np.ndarray:
        return np.moveaxis(a, 3, 0)

    for _epoch in range(config.epochs):
        order = rng.permutation(len(cases))
        for start in range(0, len(order), config.batch_size):
            batch = [cases[i] for i in order[start : start + config.batch_size]]
            b = len(batch)
            ts = rng.integers(1, schedule.T + 1, size=b)
            x0 = np.stack(
                [c.x0 if c.x0.shape[3] == n else np.repeat(c.x0, n, axis=3) for c in batch]
            )  # (B, D, H, W, n)
            eps = rng.standard_normal(x0.shape).astype(np.float32)
            coef_a = sqrt_abar[ts - 1][:, None, None, None, None]
            coef_e = sqrt_1m[ts - 1][:, None, None, None, None]
            x_t = coef_a * x0 + coef_e * eps
            if batch[0].concat is not None:
                x_t = np.concatenate([x_t, np.stack([c.concat for c in batch])], axis=4)
            xt_t = torch.from_numpy(np.stack([chw(v) for v in x_t]))
            eps_t = torch.from_numpy(np.stack([chw(v) for v in eps]))
            tt = torch.from_numpy(ts.astype(np.int64))
            ctx = None
            if batch[0].tokens is not None:
                ctx = torch.from_numpy(np.stack([c.tokens for c in batch]))
            pred = denoiser(xt_t, tt, ctx)
            if config.loss_mode == "global":
                loss = torch.mean((pred - eps_t) ** 2)
            elif loss_masks == "lesion" and n > 1:
                m = torch.from_numpy(np.stack([chw(c.class_masks) for c in batch]))
                loss = _masked_mse(pred, eps_t, m, channel_masks=True)
            else:
                m = torch.from_numpy(np.stack([chw(c.union) for c in batch]))
                loss = _masked_mse(pred, eps_t, m, channel_masks=False)
            value = float(loss.detach())
            if not np.isfinite(value):
                raise EngineError(
                    f"training diverged: loss={value} at step {len(trace)} (epoch {_epoch})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            trace.append(value)
    denoiser.eval()
    return trace
