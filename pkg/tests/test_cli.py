import hashlib
import json

import pytest
from click.testing import CliRunner

from lesionlab.cli import cli, main
from lesionlab.config import (
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    load_config,
    train_config_from,
)
from lesionlab.manifests import load_manifest


def run_ok(args):
    result = CliRunner().invoke(cli, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result.output


TINY = [
    "--set", "data.dims=[12,12,8]",
    "--set", "data.radius_ranges=[[1.6,2.4]]",
]
TINY_CARDIAC = [
    "--set", "data.dims=[12,12,8]",
    "--set", "data.radius_ranges=[[2.0,3.0],[1.0,1.6]]",
]


def test_phantom_gen_presets_and_determinism(tmp_path):
    out1 = run_ok(["phantom-gen", "--preset", "lung", "--out", str(tmp_path / "a"),
                   "--pathological", "2", "--normal", "1", "--seed", "5", *TINY]).strip()
    recs = load_manifest(out1)
    assert len(recs) == 3
    assert all(len(r.mask_paths) <= 1 for r in recs)
    out2 = run_ok(["phantom-gen", "--preset", "lung", "--out", str(tmp_path / "b"),
                   "--pathological", "2", "--normal", "1", "--seed", "5", *TINY]).strip()
    h1 = hashlib.sha256(open(out1, "rb").read()).hexdigest()
    h2 = hashlib.sha256(open(out2, "rb").read()).hexdigest()
    assert h1 == h2
    assert (tmp_path / "a" / "config.lock").exists()

    cardiac = run_ok(["phantom-gen", "--preset", "cardiac", "--out", str(tmp_path / "c"),
                      "--pathological", "2", "--normal", "0", "--seed", "1", *TINY_CARDIAC]).strip()
    crecs = load_manifest(cardiac)
    assert all(len(r.mask_paths) == 2 for r in crecs)


def test_unknown_method_lists_valid(tmp_path):
    manifest = run_ok(["phantom-gen", "--preset", "lung", "--out", str(tmp_path / "d"),
                       "--pathological", "2", "--normal", "0", "--seed", "2", *TINY]).strip()
    code = main(["train", "--kind", "texture", "--method", "nonsense",
                 "--manifest", manifest, "--out", str(tmp_path / "run")])
    assert code != 0


def test_error_json_on_stderr(tmp_path, capsys):
    code = main(["synth", "--method", "lefusion", "--manifest", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path / "run")])
    captured = capsys.readouterr()
    assert code != 0
    err = json.loads(captured.err.strip().splitlines()[-1])
    assert "error" in err and "message" in err


def test_full_pipeline_tiny(tmp_path):
    data = run_ok(["phantom-gen", "--preset", "lung", "--out", str(tmp_path / "data"),
                   "--pathological", "4", "--normal", "2", "--test-count", "2",
                   "--seed", "3", *TINY]).strip()
    cluster = run_ok(["hist-cluster", "--manifest", data, "--k", "2", "--seed", "0",
                      "--out", str(tmp_path / "clusters.json")]).strip()
    model = json.loads(open(cluster).read())
    assert model["k"] == 2

    fast = ["--set", "engine.T=6", "--set", "engine.epochs=1", "--set", "engine.base_channels=8",
            "--set", "engine.batch_size=2"]
    ck = run_ok(["train", "--kind", "texture", "--method", "lefusion_h",
                 "--manifest", data, "--out", str(tmp_path / "run"), *fast]).strip()
    sidecar = json.loads(open(ck + "/sidecar.json").read())
    assert sidecar["config"]["conditioning"] == "histogram"

    mask_fast = ["--set", "diffmask.T=6", "--set", "diffmask.epochs=1",
                 "--set", "diffmask.base_channels=8", "--set", "diffmask.batch_size=2"]
    mask_ck = run_ok(["train", "--kind", "mask", "--manifest", data,
                      "--out", str(tmp_path / "run"), *mask_fast]).strip()
    assert json.loads(open(mask_ck + "/sidecar.json").read())["domain"] == "mask"

    # copy-paste synthesis onto normals: masks equal the donor's
    synth_cp = run_ok(["synth", "--method", "copy_paste", "--manifest", data,
                       "--out", str(tmp_path / "run"), "--source-role", "normal",
                       "--mask-source", "copied", "--label", "cp"]).strip()
    assert len(load_manifest(synth_cp)) == 2

    # diffusion synthesis with the trained tiny model and diffmask masks
    synth_lf = run_ok(["synth", "--method", "lefusion_h", "--manifest", data,
                       "--out", str(tmp_path / "run"), "--source-role", "normal",
                       "--mask-source", "diffmask", "--multiplier", "2",
                       "--checkpoint", ck, "--mask-checkpoint", mask_ck,
                       "--cluster-model", cluster, "--label", "lf"]).strip()
    synth_recs = load_manifest(synth_lf)
    assert len(synth_recs) == 4
    assert all(r.role == "synthetic" and r.provenance.startswith("lefusion_h") for r in synth_recs)

    # determinism of synthesis end to end
    synth_lf2 = run_ok(["synth", "--method", "lefusion_h", "--manifest", data,
                        "--out", str(tmp_path / "run2"), "--source-role", "normal",
                        "--mask-source", "diffmask", "--multiplier", "2",
                        "--checkpoint", ck, "--mask-checkpoint", mask_ck,
                        "--cluster-model", cluster, "--label", "lf"]).strip()
    raw1 = sorted((tmp_path / "run" / "synth" / "lf" / "cases").glob("*.raw"))
    raw2 = sorted((tmp_path / "run2" / "synth" / "lf" / "cases").glob("*.raw"))
    assert [p.read_bytes() for p in raw1] == [p.read_bytes() for p in raw2]

    eval_out = run_ok(["eval", "--manifest", data, "--synth", f"LF={synth_lf}",
                       "--out", str(tmp_path / "run"),
                       "--set", "evaluation.epochs=2", "--set", "evaluation.base_channels=4",
                       "--set", "evaluation.seeds=1"])
    reports = tmp_path / "run" / "reports"
    downstream = json.loads((reports / "downstream.json").read_text())
    assert "P" in downstream and "P+LF" in downstream
    assert (tmp_path / "run" / "figures" / "montage_LF.png").exists()
    assert (reports / "diversity_LF.json").exists()

    report_out = run_ok(["report", "--run", str(tmp_path / "run")])
    assert "P+LF" in report_out


def test_eval_requires_test_split(tmp_path):
    data = run_ok(["phantom-gen", "--preset", "lung", "--out", str(tmp_path / "data"),
                   "--pathological", "2", "--normal", "0", "--seed", "4", *TINY]).strip()
    code = main(["eval", "--manifest", data, "--out", str(tmp_path / "run")])
    assert code != 0


def test_config_unknown_keys_rejected(tmp_path):
    cfg_file = tmp_path / "cfg.yaml"
    cfg_file.write_text("engine:\n  epochs: 2\n  bogus_key: 1\n")
    with pytest.raises(ConfigError, match="unknown keys"):
        load_config(cfg_file)
    cfg_file.write_text("wrong_section:\n  a: 1\n")
    with pytest.raises(ConfigError, match="top-level"):
        load_config(cfg_file)


def test_config_overrides_and_lock(tmp_path):
    cfg = ExperimentConfig()
    cfg = apply_overrides(cfg, ["engine.epochs=7", "seed=11", "data.dims=[8,8,4]"])
    assert cfg.engine["epochs"] == 7
    assert cfg.seed == 11
    tc = train_config_from(cfg)
    assert tc.epochs == 7 and tc.seed == 11
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["nonsense.key=1"])
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["engine.epochs"])


def test_help_exits_zero():
    assert main(["--help"]) == 0
