"""Histogram-based texture control.

Lesion-region intensity histograms are the conditioning signal for texture
type: extracted from ground truth at training time, chosen freely at
inference. Also hosts the log-linear histogram-control model used to
predict the output-lesion histogram from a source histogram and a control
histogram, and the per-class channel composition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volumes import MaskSet

DEFAULT_BINS = 64
DEFAULT_RANGE = (-1.0, 1.0)
LOG_FLOOR = 1e-8

# Conditioning tokens: bins are grouped, each group becomes one token of
# [group values | group one-hot | class one-hot].
TOKEN_GROUPS = 8
TOKEN_CLASS_SLOTS = 4
TOKEN_DIM = TOKEN_GROUPS + TOKEN_GROUPS + TOKEN_CLASS_SLOTS


class HistogramError(ValueError):
    pass


@dataclass
class HistogramCondition:
    """Counts-normalized intensity histogram of a lesion region."""

    bins: np.ndarray
    range: tuple[float, float] = DEFAULT_RANGE
    bin_count: int = 0

    def __post_init__(self) -> None:
        self.bins = np.asarray(self.bins, dtype=np.float64)
        if self.bins.ndim != 1:
            raise HistogramError("histogram bins must be a 1D vector")
        if self.bin_count == 0:
            self.bin_count = self.bins.size
        if self.bin_count != self.bins.size:
            raise HistogramError("bin_count does not match bins length")
        if np.any(self.bins < 0):
            raise HistogramError("histogram bins must be nonnegative")
        total = self.bins.sum()
        if not np.isclose(total, 1.0, atol=1e-6):
            raise HistogramError(f"histogram must sum to 1, got {total}")
        self.range = (float(self.range[0]), float(self.range[1]))

    def bin_centers(self) -> np.ndarray:
        lo, hi = self.range
        edges = np.linspace(lo, hi, self.bin_count + 1)
        return 0.5 * (edges[:-1] + edges[1:])

    def mean_intensity(self) -> float:
        return float(np.dot(self.bins, self.bin_centers()))

    def to_json(self) -> dict:
        return {"bins": self.bins.tolist(), "range": list(self.range), "bin_count": self.bin_count}

    @classmethod
    def from_json(cls, d: dict) -> "HistogramCondition":
        return cls(np.asarray(d["bins"]), tuple(d["range"]), int(d["bin_count"]))


def extract_histogram(
    volume, mask: np.ndarray, bins: int = DEFAULT_BINS, value_range: tuple[float, float] = DEFAULT_RANGE
) -> HistogramCondition:
    """Normalized histogram of the masked voxels; edge values land in edge bins."""
    if bins < 2:
        raise HistogramError(f"need at least 2 bins, got {bins}")
    data = volume.data[..., 0] if hasattr(volume, "data") else np.asarray(volume)
    if data.ndim == 4:
        data = data[..., 0]
    mask = np.asarray(mask).astype(bool)
    values = data[mask]
    if values.size == 0:
        raise HistogramError("cannot extract a histogram from an empty mask")
    lo, hi = value_range
    values = np.clip(values, lo, hi)
    counts, _ = np.histogram(values, bins=bins, range=(lo, hi))
    return HistogramCondition(counts / counts.sum(), (lo, hi), bins)


@dataclass
class HistogramClusterModel:
    """K-means clustering of lesion histograms (texture-type discovery)."""

    centroids: list[HistogramCondition]
    assignments: np.ndarray
    seed: int
    k: int = 0

    def __post_init__(self) -> None:
        if len(self.centroids) < 1:
            raise HistogramError("cluster model needs at least one centroid")
        if self.k == 0:
            self.k = len(self.centroids)
        self.assignments = np.asarray(self.assignments, dtype=np.int64)

    def to_json(self) -> dict:
        return {
            "centroids": [c.to_json() for c in self.centroids],
            "assignments": self.assignments.tolist(),
            "seed": self.seed,
            "k": self.k,
        }

    @classmethod
    def from_json(cls, d: dict) -> "HistogramClusterModel":
        return cls(
            [HistogramCondition.from_json(c) for c in d["centroids"]],
            np.asarray(d["assignments"]),
            int(d["seed"]),
            int(d["k"]),
        )


def cluster_histograms(histograms: list[HistogramCondition], k: int, seed: int) -> HistogramClusterModel:
    """K-means over histogram vectors; centroids are re-normalized."""
    from sklearn.cluster import KMeans

    if len(histograms) < k:
        raise HistogramError(f"need at least k={k} histograms, got {len(histograms)}")
    X = np.stack([h.bins for h in histograms])
    km = KMeans(n_clusters=k, random_state=seed, n_init=10).fit(X)
    rng0 = histograms[0].range
    bins0 = histograms[0].bin_count
    centroids = []
    for c in km.cluster_centers_:
        c = np.clip(c, 0.0, None)
        centroids.append(HistogramCondition(c / c.sum(), rng0, bins0))
    return HistogramClusterModel(centroids, km.labels_, seed, k)


def encode_condition(condition) -> np.ndarray:
    """Encode one histogram per class as a (tokens, TOKEN_DIM) float32 array.

    Bins are split into TOKEN_GROUPS groups; each token carries the group's
    bin values plus group and class one-hots, so the encoding is sensitive to
    bin position and class identity.
    """
    if isinstance(condition, HistogramCondition):
        conditions = [condition]
    else:
        conditions = list(condition)
    if len(conditions) > TOKEN_CLASS_SLOTS:
        raise HistogramError(f"at most {TOKEN_CLASS_SLOTS} class histograms supported")
    tokens = []
    for cls_idx, h in enumerate(conditions):
        if h.bin_count % TOKEN_GROUPS:
            raise HistogramError(f"bin count {h.bin_count} not divisible by {TOKEN_GROUPS} groups")
        group_size = h.bin_count // TOKEN_GROUPS
        if group_size > TOKEN_GROUPS:
            raise HistogramError(f"bin count {h.bin_count} too large for token layout")
        for g in range(TOKEN_GROUPS):
            values = np.zeros(TOKEN_GROUPS)
            values[:group_size] = h.bins[g * group_size : (g + 1) * group_size]
            group_hot = np.zeros(TOKEN_GROUPS)
            group_hot[g] = 1.0
            class_hot = np.zeros(TOKEN_CLASS_SLOTS)
            class_hot[cls_idx] = 1.0
            tokens.append(np.concatenate([values * group_size, group_hot, class_hot]))
    return np.stack(tokens).astype(np.float32)


INFERENCE_STRATEGIES = ("cluster_centroid", "donor_lesion", "user_supplied")


def sample_inference_histogram(
    strategy: str,
    rng: np.random.Generator,
    cluster_model: HistogramClusterModel | None = None,
    donor_pool: list[HistogramCondition] | None = None,
    user_histogram: HistogramCondition | None = None,
    index: int | None = None,
) -> HistogramCondition:
    """Draw the control histogram used at inference, per strategy."""
    if strategy == "cluster_centroid":
        if cluster_model is None or not cluster_model.centroids:
            raise HistogramError("cluster_centroid strategy needs a cluster model")
        if index is None:
            index = int(rng.integers(0, len(cluster_model.centroids)))
        return cluster_model.centroids[index]
    if strategy == "donor_lesion":
        if not donor_pool:
            raise HistogramError("donor_lesion strategy needs a nonempty donor pool")
        if index is None:
            index = int(rng.integers(0, len(donor_pool)))
        return donor_pool[index]
    if strategy == "user_supplied":
        if user_histogram is None:
            raise HistogramError("user_supplied strategy needs a histogram")
        return user_histogram
    raise HistogramError(f"unknown strategy {strategy!r}, expected one of {INFERENCE_STRATEGIES}")


@dataclass
class HistControlParams:
    """Log-linear histogram-control parameters: scales r, s and offsets p, q."""

    r: float
    s: float
    p: float = 0.0
    q: float = 0.0

    def __post_init__(self) -> None:
        vals = (self.r, self.s, self.p, self.q)
        if not all(np.isfinite(v) for v in vals):
            raise HistogramError(f"non-finite control params {vals}")


def predict_output_histogram(
    l: HistogramCondition, h: HistogramCondition, params: HistControlParams, floor: float = LOG_FLOOR
) -> HistogramCondition:
    """Per-bin exp(r*log l + p + s*log h + q), re-normalized to sum 1.

    Zero bins are floored at ``floor`` before the log, where the raw formula
    is undefined.
    """
    if l.bin_count != h.bin_count:
        raise HistogramError("source and control histograms need matching bin counts")
    lf = np.maximum(l.bins, floor)
    hf = np.maximum(h.bins, floor)
    m = params.r * np.log(lf) + params.p + params.s * np.log(hf) + params.q
    out = np.exp(m)
    return HistogramCondition(out / out.sum(), l.range, l.bin_count)


def fit_histogram_params(
    pairs: list[tuple[HistogramCondition, HistogramCondition, object]],
    floor: float = LOG_FLOOR,
) -> tuple[HistControlParams, float]:
    """Least-squares fit of (r, s, p, q) in log space from (l, h, observed_O)
    triples. ``observed_O`` may be a histogram or a raw positive vector (the
    unnormalized formula output).

    The offsets only ever enter the model as p + q, so the fitted intercept is
    split evenly between them; individual p and q are not identifiable.
    Returns (params, rms residual).
    """
    if len(pairs) < 2:
        raise HistogramError(f"need at least 2 pairs to fit, got {len(pairs)}")
    rows = []
    targets = []
    for l, h, o in pairs:
        o_bins = o.bins if isinstance(o, HistogramCondition) else np.asarray(o, dtype=np.float64)
        if o_bins.shape != l.bins.shape:
            raise HistogramError("observed output length does not match the source histogram")
        lf = np.log(np.maximum(l.bins, floor))
        hf = np.log(np.maximum(h.bins, floor))
        of = np.log(np.maximum(o_bins, floor))
        for i in range(l.bin_count):
            rows.append([lf[i], hf[i], 1.0])
            targets.append(of[i])
    X = np.asarray(rows)
    y = np.asarray(targets)
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < 3:
        raise HistogramError("degenerate design matrix: source/control histograms carry no contrast")
    residual = float(np.sqrt(np.mean((X @ coef - y) ** 2)))
    r, s, c = (float(v) for v in coef)
    return HistControlParams(r=r, s=s, p=c / 2.0, q=c / 2.0), residual


def compose_channels(o: np.ndarray, mask_set: MaskSet) -> np.ndarray:
    """Combine per-class generated channels: sum_i mask_i * o_i -> one channel.

    Voxels outside every mask are zero; the inpainting composition replaces
    them with background anyway.
    """
    o = np.asarray(o)
    if o.ndim == 3:
        o = o[..., np.newaxis]
    if o.shape[3] != mask_set.n_classes:
        raise HistogramError(
            f"channel count {o.shape[3]} does not match {mask_set.n_classes} classes"
        )
    if o.shape[:3] != mask_set.spatial_dims:
        raise HistogramError("volume and mask dims differ")
    stack = mask_set.stack()
    return np.sum(stack * o, axis=3, keepdims=True, dtype=np.float64).astype(o.dtype)
