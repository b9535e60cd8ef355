"""Command-line surface: config-driven, reproducible subcommands for dataset
generation, histogram clustering, training, synthesis, evaluation, and
reporting.

Every command works under a run directory with the fixed layout
config.lock, checkpoints/, synth/, reports/, figures/. Errors leave exit
code != 0 and a machine-readable JSON object on stderr.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .baselines import BASELINE_NAMES, baseline_recipe
from .config import (
    ExperimentConfig,
    apply_overrides,
    handcraft_params_from,
    load_config,
    phantom_spec_from_config,
    segmenter_config_from,
    train_config_from,
    write_lock,
)
from .engine import Checkpoint, train_texture_model
from .diffmask import train_mask_model
from .histograms import HistogramClusterModel, cluster_histograms, extract_histogram
from .manifests import load_case, load_manifest
from .phantoms import generate_phantom_dataset
from .reports import (
    diversity_from_manifest,
    downstream_table,
    quality_report,
    save_histogram_figure,
    save_montage,
    write_json,
)
from .segmenter import eval_segmenter, train_segmenter
from .synthesis import MASK_SOURCES, SynthesisPlan, synthesize_dataset


def _config(config_path, overrides) -> ExperimentConfig:
    cfg = load_config(config_path)
    if overrides:
        cfg = apply_overrides(cfg, list(overrides))
    return cfg


_config_option = click.option("--config", "config_path", type=click.Path(), default=None, help="YAML config file.")
_set_option = click.option("--set", "overrides", multiple=True, help="Override config keys, e.g. engine.epochs=3.")


@click.group()
def cli():
    """Desk-scale lesion synthesis laboratory."""


@cli.command("phantom-gen")
@_config_option
@_set_option
@click.option("--preset", type=click.Choice(["cardiac", "lung"]), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--pathological", type=int, default=None)
@click.option("--normal", type=int, default=None)
@click.option("--test-count", type=int, default=None)
@click.option("--seed", type=int, default=None)
def cmd_phantom_gen(config_path, overrides, preset, out_dir, pathological, normal, test_count, seed):
    """Generate a phantom dataset and its manifest."""
    cfg = _config(config_path, overrides)
    if preset is not None:
        cfg.data["preset"] = preset
    if pathological is not None:
        cfg.data["pathological"] = pathological
    if normal is not None:
        cfg.data["normal"] = normal
    if test_count is not None:
        cfg.data["test_count"] = test_count
    if seed is not None:
        cfg.seed = seed
    spec = phantom_spec_from_config(cfg)
    run_dir = Path(out_dir)
    write_lock(cfg, run_dir)
    manifest = generate_phantom_dataset(
        spec,
        {
            "pathological": cfg.data.get("pathological", 8),
            "normal": cfg.data.get("normal", 4),
        },
        cfg.seed,
        run_dir,
        test_count=cfg.data.get("test_count", 0),
    )
    click.echo(str(manifest))


@cli.command("hist-cluster")
@_config_option
@_set_option
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_file", required=True, type=click.Path())
@click.option("--k", type=int, default=None)
@click.option("--seed", type=int, default=None)
def cmd_hist_cluster(config_path, overrides, manifest_path, out_file, k, seed):
    """Cluster training-lesion histograms into texture-type centroids."""
    cfg = _config(config_path, overrides)
    k = k if k is not None else cfg.texture_control.get("clusters", 3)
    seed = seed if seed is not None else cfg.seed
    bins = cfg.texture_control.get("bins", 64)
    records = [
        r
        for r in load_manifest(manifest_path)
        if r.role == "pathological" and r.split == "train" and r.mask_paths
    ]
    hists = []
    for rec in records:
        volume, masks = load_case(rec)
        if masks.union.sum():
            hists.append(extract_histogram(volume, masks.union, bins))
    model = cluster_histograms(hists, k, seed)
    out = Path(out_file)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(model.to_json(), sort_keys=True, indent=1))
    click.echo(str(out))


def _infer_class_count(manifest_path) -> int:
    for rec in load_manifest(manifest_path):
        if rec.mask_paths:
            return len(rec.mask_paths)
    raise click.ClickException("manifest carries no masked cases to infer the class count from")


@cli.command("train")
@_config_option
@_set_option
@click.option("--kind", type=click.Choice(["texture", "mask"]), required=True)
@click.option("--method", default="lefusion", help=f"One of: {', '.join(BASELINE_NAMES)}.")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_train(config_path, overrides, kind, method, manifest_path, out_dir):
    """Train a texture or mask diffusion model on a manifest."""
    cfg = _config(config_path, overrides)
    run_dir = Path(out_dir)
    write_lock(cfg, run_dir)
    if kind == "texture":
        recipe = baseline_recipe(method)  # validates the name
        train_cfg = train_config_from(
            cfg,
            "engine",
            loss_mode=recipe.loss_mode,
            conditioning=recipe.conditioning,
            sampler=recipe.sampler,
            channels=cfg.engine.get("channels", recipe.channels),
        )
        checkpoint = train_texture_model(manifest_path, train_cfg)
        name = f"texture_{method}"
    else:
        channels = cfg.diffmask.get("channels", _infer_class_count(manifest_path))
        train_cfg = train_config_from(cfg, "diffmask", channels=channels, conditioning="none")
        checkpoint = train_mask_model(manifest_path, train_cfg)
        name = "mask"
    out = checkpoint.save(run_dir / "checkpoints" / name)
    click.echo(str(out))


@cli.command("synth")
@_config_option
@_set_option
@click.option("--method", required=True, help=f"copy_paste, handcrafted, or one of: {', '.join(BASELINE_NAMES)}.")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--checkpoint", "texture_ckpt", type=click.Path(), default=None)
@click.option("--mask-checkpoint", "mask_ckpt", type=click.Path(), default=None)
@click.option("--cluster-model", "cluster_path", type=click.Path(), default=None)
@click.option("--source-role", type=click.Choice(["pathological", "normal"]), default="pathological")
@click.option("--mask-source", type=click.Choice(list(MASK_SOURCES)), default="real")
@click.option("--multiplier", type=int, default=1)
@click.option("--label", default=None, help="Subdirectory label for the synthetic set.")
def cmd_synth(
    config_path,
    overrides,
    method,
    manifest_path,
    out_dir,
    texture_ckpt,
    mask_ckpt,
    cluster_path,
    source_role,
    mask_source,
    multiplier,
    label,
):
    """Generate a synthetic case set from a manifest."""
    cfg = _config(config_path, overrides)
    if method not in ("copy_paste", "handcrafted") and method not in BASELINE_NAMES:
        raise click.ClickException(
            f"unknown method {method!r}; valid: copy_paste, handcrafted, {', '.join(BASELINE_NAMES)}"
        )
    run_dir = Path(out_dir)
    write_lock(cfg, run_dir)
    records = load_manifest(manifest_path)
    plan = SynthesisPlan(
        method=method,
        source_role=source_role,
        mask_source=mask_source,
        multiplier=multiplier,
        texture_checkpoint=Checkpoint.load(texture_ckpt) if texture_ckpt else None,
        mask_checkpoint=Checkpoint.load(mask_ckpt) if mask_ckpt else None,
        cluster_model=(
            HistogramClusterModel.from_json(json.loads(Path(cluster_path).read_text()))
            if cluster_path
            else None
        ),
        histogram_strategy=cfg.texture_control.get("strategy", "cluster_centroid"),
        handcraft=handcraft_params_from(cfg) if cfg.baselines else None,
        sphere_jitter=cfg.diffmask.get("sphere_jitter", 1.0),
        sphere_scale=cfg.diffmask.get("sphere_scale", 1.0),
    )
    label = label or f"{method}_{source_role}_{mask_source}"
    manifest = synthesize_dataset(records, plan, run_dir / "synth" / label, cfg.seed)
    click.echo(str(manifest))


@cli.command("eval")
@_config_option
@_set_option
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--synth", "synth_specs", multiple=True, help="LABEL=PATH of a synthetic manifest.")
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_eval(config_path, overrides, manifest_path, synth_specs, out_dir):
    """Train/evaluate the compact segmenter per training setting and emit
    quality/diversity reports plus figures."""
    cfg = _config(config_path, overrides)
    run_dir = Path(out_dir)
    write_lock(cfg, run_dir)
    reports_dir = run_dir / "reports"
    figures_dir = run_dir / "figures"
    real_records = load_manifest(manifest_path)
    if not any(r.split == "test" for r in real_records):
        raise click.ClickException("manifest has no test split to evaluate on")
    synth_sets = {}
    for spec_str in synth_specs:
        if "=" not in spec_str:
            raise click.ClickException(f"--synth takes LABEL=PATH, got {spec_str!r}")
        label, path = spec_str.split("=", 1)
        synth_sets[label] = load_manifest(path)

    class_count = _infer_class_count(manifest_path)
    seeds = list(range(int(cfg.evaluation.get("seeds", 1))))
    settings = {"P": real_records}
    for label, recs in synth_sets.items():
        settings[f"P+{label}"] = real_records + recs

    rows = {}
    downstream = {}
    for setting, records in settings.items():
        agg_reports = []
        for seed in seeds:
            seg_cfg = segmenter_config_from(cfg, seed=seed)
            ck = train_segmenter([r for r in records if r.split == "train"], seg_cfg, class_count)
            agg_reports.append(eval_segmenter(ck, real_records, split="test"))
        rows[setting] = agg_reports[0]
        downstream[setting] = {
            "seeds": seeds,
            "overall_dice_per_seed": [r.aggregate["overall"]["dice_mean"] for r in agg_reports],
            "mean_overall_dice": float(
                np.mean([r.aggregate["overall"]["dice_mean"] for r in agg_reports])
            ),
            "aggregate_first_seed": agg_reports[0].aggregate,
        }
        write_json(json.loads(rows[setting].to_json()), reports_dir / f"downstream_{setting.replace('+', '_')}.json")
    write_json(downstream, reports_dir / "downstream.json")

    for label, recs in synth_sets.items():
        q = quality_report(recs, label)
        if q.aggregate["n_cases"]:
            write_json(json.loads(q.to_json()), reports_dir / f"quality_{label}.json")
        try:
            d = diversity_from_manifest(recs)
            write_json(d, reports_dir / f"diversity_{label}.json")
        except ValueError:
            pass
        save_montage(recs, figures_dir / f"montage_{label}.png", title=label)
        save_histogram_figure(
            [r for r in recs if r.mask_paths], figures_dir / f"histograms_{label}.png", title=label
        )
    save_montage(
        [r for r in real_records if r.role == "pathological"],
        figures_dir / "montage_real.png",
        title="real pathological",
    )
    click.echo(downstream_table(rows))
    click.echo(str(reports_dir / "downstream.json"))


@cli.command("report")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True))
def cmd_report(run_dir):
    """Render the stored reports of a run directory as tables and regenerate
    comparison figures from any synthetic manifests under it."""
    run_dir = Path(run_dir)
    figures_dir = run_dir / "figures"
    emitted = 0
    for synth_manifest in sorted(run_dir.glob("synth/*/manifest.json")):
        label = synth_manifest.parent.name
        recs = load_manifest(synth_manifest)
        save_montage(recs, figures_dir / f"montage_{label}.png", title=label)
        save_histogram_figure(
            [r for r in recs if r.mask_paths], figures_dir / f"histograms_{label}.png", title=label
        )
        click.echo(str(figures_dir / f"montage_{label}.png"))
        emitted += 1
    reports_dir = run_dir / "reports"
    downstream = reports_dir / "downstream.json"
    if downstream.exists():
        payload = json.loads(downstream.read_text())
        click.echo(f"{'setting':>14s}  {'mean overall Dice':>18s}")
        for setting, row in payload.items():
            click.echo(f"{setting:>14s}  {row['mean_overall_dice']:>18.2f}")
    for path in sorted(reports_dir.glob("quality_*.json")):
        q = json.loads(path.read_text())
        agg = q["aggregate"]
        click.echo(f"quality {q['method']}: PSNR {agg['psnr_mean']} SSIM {agg['ssim_mean']}")
    for path in sorted(reports_dir.glob("diversity_*.json")):
        d = json.loads(path.read_text())
        label = path.stem.replace("diversity_", "")
        click.echo(f"diversity {label}: PSNR {d['mean_psnr']} SSIM {d['mean_ssim']} over {d['n_pairs']} pairs")
    if not emitted and not any(reports_dir.glob("*.json")):
        raise click.ClickException(f"nothing to report under {run_dir}")


def main(argv=None):
    """Entry point with machine-readable errors on stderr."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:  # --help and friends
        return exc.exit_code
    except click.ClickException as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": exc.format_message()}) + "\n")
        return exc.exit_code or 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports everything
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
