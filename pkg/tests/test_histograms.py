import numpy as np
import pytest

from lesionlab.histograms import (
    TOKEN_DIM,
    HistControlParams,
    HistogramCondition,
    HistogramError,
    cluster_histograms,
    compose_channels,
    encode_condition,
    extract_histogram,
    fit_histogram_params,
    predict_output_histogram,
    sample_inference_histogram,
)
from lesionlab.volumes import MaskSet, Volume3D


def one_hot(bin_idx, bins=64):
    b = np.zeros(bins)
    b[bin_idx] = 1.0
    return HistogramCondition(b)


def test_extract_single_voxel_upper_bin():
    vol = Volume3D(np.full((1, 1, 1, 1), 0.5, dtype=np.float32))
    mask = np.ones((1, 1, 1), dtype=np.uint8)
    h = extract_histogram(vol, mask, bins=2, value_range=(0.0, 1.0))
    assert np.allclose(h.bins, [0.0, 1.0])


def test_extract_constant_region_one_hot():
    vol = Volume3D(np.full((3, 3, 3, 1), 0.25, dtype=np.float32))
    mask = np.ones((3, 3, 3), dtype=np.uint8)
    h = extract_histogram(vol, mask, bins=8, value_range=(-1.0, 1.0))
    assert np.isclose(h.bins.max(), 1.0)
    assert np.isclose(h.bins.sum(), 1.0)


def test_extract_two_values_split():
    data = np.zeros((2, 1, 1, 1), dtype=np.float32)
    data[0] = 0.1
    data[1] = 0.9
    h = extract_histogram(Volume3D(data), np.ones((2, 1, 1), dtype=np.uint8), bins=2, value_range=(0, 1))
    assert np.allclose(h.bins, [0.5, 0.5])


def test_extract_edge_values_land_in_edge_bins():
    data = np.array([-1.0, 1.0], dtype=np.float32).reshape(2, 1, 1, 1)
    h = extract_histogram(Volume3D(data), np.ones((2, 1, 1), dtype=np.uint8), bins=4)
    assert h.bins[0] == 0.5 and h.bins[-1] == 0.5


def test_extract_empty_mask_errors():
    vol = Volume3D(np.zeros((2, 2, 2, 1), dtype=np.float32))
    with pytest.raises(HistogramError, match="empty"):
        extract_histogram(vol, np.zeros((2, 2, 2), dtype=np.uint8))


def test_extract_permutation_invariant():
    rng = np.random.default_rng(0)
    data = rng.uniform(-1, 1, (4, 4, 4, 1)).astype(np.float32)
    mask = (rng.random((4, 4, 4)) < 0.5).astype(np.uint8)
    h1 = extract_histogram(Volume3D(data), mask)
    perm = rng.permutation(64)
    flat = data.reshape(64, 1)
    pdata = flat[perm].reshape(4, 4, 4, 1)
    pmask = mask.reshape(64)[perm].reshape(4, 4, 4)
    h2 = extract_histogram(Volume3D(pdata), pmask)
    assert np.allclose(h1.bins, h2.bins)
    assert np.isclose(h1.bins.sum(), 1.0)


def test_histogram_validation():
    with pytest.raises(HistogramError):
        HistogramCondition(np.array([0.5, 0.4]))  # does not sum to 1
    with pytest.raises(HistogramError):
        HistogramCondition(np.array([1.5, -0.5]))


def test_cluster_k1_is_mean():
    hists = [one_hot(i, 8) for i in (0, 2, 4)]
    model = cluster_histograms(hists, 1, seed=0)
    assert np.allclose(model.centroids[0].bins, np.mean([h.bins for h in hists], axis=0))


def test_cluster_separable_populations():
    pop1 = [one_hot(3) for _ in range(5)]
    pop2 = [one_hot(40) for _ in range(5)]
    model = cluster_histograms(pop1 + pop2, 2, seed=1)
    got = sorted(np.argmax(c.bins) for c in model.centroids)
    assert got == [3, 40]
    for c in model.centroids:
        assert np.isclose(c.bins.max(), 1.0, atol=1e-6)


def test_cluster_deterministic_and_validates_k():
    rng = np.random.default_rng(2)
    hists = []
    for _ in range(9):
        b = rng.random(16)
        hists.append(HistogramCondition(b / b.sum()))
    m1 = cluster_histograms(hists, 3, seed=7)
    m2 = cluster_histograms(hists, 3, seed=7)
    assert np.array_equal(m1.assignments, m2.assignments)
    with pytest.raises(HistogramError):
        cluster_histograms(hists[:2], 3, seed=0)


def test_cluster_model_json_roundtrip():
    hists = [one_hot(i) for i in (1, 30, 60)]
    model = cluster_histograms(hists, 3, seed=0)
    back = type(model).from_json(model.to_json())
    assert back.k == 3 and len(back.centroids) == 3


def test_encode_token_count_and_determinism():
    h = one_hot(5)
    tokens = encode_condition(h)
    assert tokens.shape == (8, TOKEN_DIM)
    assert np.array_equal(tokens, encode_condition(one_hot(5)))


def test_encode_is_bin_position_sensitive():
    t1 = encode_condition(one_hot(3))
    t2 = encode_condition(one_hot(4))
    assert not np.array_equal(t1, t2)


def test_encode_multiclass_tokens():
    tokens = encode_condition([one_hot(3), one_hot(40)])
    assert tokens.shape == (16, TOKEN_DIM)
    # class one-hots distinguish the two groups of tokens
    assert tokens[0, -4] == 1.0 and tokens[8, -3] == 1.0


def test_sample_inference_histogram_strategies():
    hists = [one_hot(i) for i in (1, 30, 60)]
    model = cluster_histograms(hists, 3, seed=0)
    rng = np.random.default_rng(0)
    c2 = sample_inference_histogram("cluster_centroid", rng, cluster_model=model, index=2)
    assert np.allclose(c2.bins, model.centroids[2].bins)
    donor = sample_inference_histogram("donor_lesion", rng, donor_pool=[hists[0]])
    assert np.allclose(donor.bins, hists[0].bins)
    user = sample_inference_histogram("user_supplied", rng, user_histogram=hists[1])
    assert np.allclose(user.bins, hists[1].bins)
    a = sample_inference_histogram("cluster_centroid", np.random.default_rng(5), cluster_model=model)
    b = sample_inference_histogram("cluster_centroid", np.random.default_rng(5), cluster_model=model)
    assert np.allclose(a.bins, b.bins)
    with pytest.raises(HistogramError):
        sample_inference_histogram("donor_lesion", rng, donor_pool=[])
    with pytest.raises(HistogramError):
        sample_inference_histogram("nope", rng)


def test_predict_identity_regimes():
    rng = np.random.default_rng(3)
    b = rng.random(64) + 0.01
    l = HistogramCondition(b / b.sum())
    h = one_hot(10)
    out_l = predict_output_histogram(l, h, HistControlParams(1.0, 0.0, 0.0, 0.0))
    assert np.allclose(out_l.bins, l.bins, atol=1e-12)
    b2 = rng.random(64) + 0.01
    h2 = HistogramCondition(b2 / b2.sum())
    out_h = predict_output_histogram(l, h2, HistControlParams(0.0, 1.0, 0.0, 0.0))
    assert np.allclose(out_h.bins, h2.bins, atol=1e-12)


def test_predict_geometric_mean_case():
    l = one_hot(3, 8)
    h = one_hot(6, 8)
    params = HistControlParams(0.5, 0.5, 0.0, 0.0)
    out = predict_output_histogram(l, h, params, floor=1e-8)
    # independent evaluation of the formula with the same floor
    lf = np.maximum(l.bins, 1e-8)
    hf = np.maximum(h.bins, 1e-8)
    expected = np.exp(0.5 * np.log(lf) + 0.5 * np.log(hf))
    expected /= expected.sum()
    assert np.allclose(out.bins, expected, atol=1e-12)
    # mass concentrates on the two active bins, not uniformly
    assert out.bins[3] + out.bins[6] > 0.9


def test_fit_recovers_planted_params():
    rng = np.random.default_rng(4)
    planted = HistControlParams(0.7, 0.3, 0.1, -0.1)
    pairs = []
    for _ in range(6):
        lb = rng.random(64) + 0.05
        hb = rng.random(64) + 0.05
        l = HistogramCondition(lb / lb.sum())
        h = HistogramCondition(hb / hb.sum())
        raw = np.exp(
            planted.r * np.log(l.bins) + planted.p + planted.s * np.log(h.bins) + planted.q
        )
        pairs.append((l, h, raw))
    fitted, residual = fit_histogram_params(pairs)
    assert fitted.r == pytest.approx(planted.r, abs=1e-3)
    assert fitted.s == pytest.approx(planted.s, abs=1e-3)
    # offsets are only identifiable through their sum
    assert fitted.p + fitted.q == pytest.approx(planted.p + planted.q, abs=1e-3)
    assert residual < 1e-9


def test_fit_identity_regime_and_preconditions():
    rng = np.random.default_rng(5)
    pairs = []
    for _ in range(4):
        lb = rng.random(64) + 0.05
        hb = rng.random(64) + 0.05
        l = HistogramCondition(lb / lb.sum())
        h = HistogramCondition(hb / hb.sum())
        pairs.append((l, h, l))  # observed equals the source
    fitted, _ = fit_histogram_params(pairs)
    assert fitted.r == pytest.approx(1.0, abs=1e-6)
    assert fitted.s == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(HistogramError, match="2 pairs"):
        fit_histogram_params(pairs[:1])


def test_fit_degenerate_design_matrix():
    flat = HistogramCondition(np.full(64, 1 / 64))
    pairs = [(flat, flat, flat), (flat, flat, flat)]
    with pytest.raises(HistogramError, match="degenerate"):
        fit_histogram_params(pairs)


def test_compose_single_class_reduction():
    dims = (2, 2, 2)
    o = np.random.default_rng(6).standard_normal(dims + (1,)).astype(np.float32)
    m = np.zeros(dims, dtype=np.uint8)
    m[0, 0, 0] = 1
    ms = MaskSet([m], ["a"])
    out = compose_channels(o, ms)
    assert out[0, 0, 0, 0] == o[0, 0, 0, 0]
    assert np.all(out[m == 0] == 0)


def test_compose_disjoint_constant_channels():
    dims = (2, 2, 2)
    o = np.stack([np.full(dims, 0.2), np.full(dims, 0.8)], axis=-1).astype(np.float32)
    m1 = np.zeros(dims, dtype=np.uint8)
    m2 = np.zeros(dims, dtype=np.uint8)
    m1[0], m2[1] = 1, 1
    ms = MaskSet([m1, m2], ["a", "b"])
    out = compose_channels(o, ms)
    assert np.all(out[0, :, :, 0] == np.float32(0.2))
    assert np.all(out[1, :, :, 0] == np.float32(0.8))


def test_compose_zero_masks_and_errors():
    dims = (2, 2, 2)
    o = np.ones(dims + (2,), dtype=np.float32)
    ms = MaskSet([np.zeros(dims, np.uint8), np.zeros(dims, np.uint8)], ["a", "b"])
    assert np.all(compose_channels(o, ms) == 0)
    with pytest.raises(HistogramError, match="channel count"):
        compose_channels(np.ones(dims + (3,), dtype=np.float32), ms)


def test_compose_idempotent_in_masks():
    dims = (3, 3, 3)
    rng = np.random.default_rng(7)
    o = rng.standard_normal(dims + (2,)).astype(np.float32)
    m1 = np.zeros(dims, np.uint8)
    m2 = np.zeros(dims, np.uint8)
    m1[:1], m2[2:] = 1, 1
    ms = MaskSet([m1, m2], ["a", "b"])
    once = compose_channels(o, ms)
    twice = compose_channels(np.repeat(once, 2, axis=3), ms)
    assert np.allclose(once, twice)
