import numpy as np
import pytest

from lesionlab.baselines import HandcraftParams
from lesionlab.manifests import load_case, load_manifest
from lesionlab.phantoms import generate_phantom_dataset, lung_phantom_spec
from lesionlab.synthesis import SynthesisError, SynthesisPlan, synthesize_dataset


def tiny_spec():
    spec = lung_phantom_spec((8, 8, 4))
    spec.classes[0].radius_range = (1.2, 2.0)
    return spec


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthdata")
    path = generate_phantom_dataset(tiny_spec(), {"pathological": 3, "normal": 2}, 7, out)
    return load_manifest(path)


def test_copy_paste_masks_match_donors(dataset, tmp_path):
    plan = SynthesisPlan(method="copy_paste", source_role="normal", mask_source="copied")
    manifest = synthesize_dataset(dataset, plan, tmp_path / "cp", seed=1)
    records = load_manifest(manifest)
    assert len(records) == 2
    donors = {r.volume_path: load_case(r)[1] for r in dataset if r.role == "pathological"}
    for rec in records:
        assert rec.role == "synthetic"
        assert rec.provenance == "copy_paste:copied"
        _, masks = load_case(rec)
        # pasted at the donor's own location: masks equal some donor's masks
        assert any(
            all(np.array_equal(a, b) for a, b in zip(masks.masks, dm.masks))
            for dm in donors.values()
        )


def test_handcrafted_synthesis_stays_in_boundary(dataset, tmp_path):
    plan = SynthesisPlan(
        method="handcrafted",
        source_role="normal",
        mask_source="handcrafted",
        handcraft=HandcraftParams(axis_range=(1.5, 2.5)),
    )
    manifest = synthesize_dataset(dataset, plan, tmp_path / "hc", seed=2)
    for rec in load_manifest(manifest):
        from lesionlab.manifests import load_boundary

        _, masks = load_case(rec)
        boundary = load_boundary(rec)
        assert np.all(masks.union <= boundary)


def test_multiplier_matches_multiplied_setting_structure(tmp_path):
    # the multiplied synthetic setting: 135 normals x 2 -> 270 records
    out = generate_phantom_dataset(tiny_spec(), {"pathological": 2, "normal": 135}, 3, tmp_path / "data")
    records = load_manifest(out)
    plan = SynthesisPlan(method="copy_paste", source_role="normal", mask_source="copied", multiplier=2)
    manifest = synthesize_dataset(records, plan, tmp_path / "nn", seed=4)
    synth = load_manifest(manifest)
    assert len(synth) == 270
    by_source = {}
    for rec in synth:
        by_source.setdefault(rec.extra["source_volume"], []).append(rec)
    assert all(len(v) == 2 for v in by_source.values())


def test_plan_validation(dataset, tmp_path):
    with pytest.raises(SynthesisError, match="mask source"):
        SynthesisPlan(method="lefusion", source_role="normal", mask_source="real")
    with pytest.raises(SynthesisError):
        SynthesisPlan(method="lefusion", multiplier=0)
    plan = SynthesisPlan(method="lefusion", source_role="pathological", mask_source="real")
    with pytest.raises(SynthesisError, match="checkpoint"):
        synthesize_dataset(dataset, plan, tmp_path / "x", seed=0)
    plan2 = SynthesisPlan(method="lefusion_j", source_role="normal", mask_source="diffmask")
    with pytest.raises(SynthesisError, match="mask checkpoint"):
        synthesize_dataset(dataset, plan2, tmp_path / "y", seed=0)


def test_off_mask_voxels_untouched_for_local_methods(dataset, tmp_path):
    plan = SynthesisPlan(method="copy_paste", source_role="normal", mask_source="copied")
    manifest = synthesize_dataset(dataset, plan, tmp_path / "loc", seed=5)
    sources = {r.volume_path: r for r in dataset}
    for rec in load_manifest(manifest):
        vol, masks = load_case(rec)
        src_vol, _ = load_case(sources[rec.extra["source_volume"]])
        off = ~masks.union.astype(bool)
        assert np.array_equal(vol.data[..., 0][off], src_vol.data[..., 0][off])
