"""Session fixtures for the acceptance suite: phantom datasets and trained
models shared across criteria. Training happens once per pytest session with
fixed seeds, so every criterion sees identical models."""

import time
from dataclasses import dataclass

import pytest

from lesionlab.engine import Checkpoint, TrainConfig, train_texture_model
from lesionlab.diffmask import train_mask_model
from lesionlab.histograms import HistogramClusterModel, cluster_histograms, extract_histogram
from lesionlab.manifests import CaseRecord, load_case, load_manifest
from lesionlab.phantoms import cardiac_phantom_spec, generate_phantom_dataset, lung_phantom_spec


@dataclass
class Trained:
    checkpoint: Checkpoint
    seconds: float


def _train(fn, manifest, config) -> Trained:
    t0 = time.perf_counter()
    ck = fn(manifest, config)
    return Trained(ck, time.perf_counter() - t0)


# -- lung bundle: 3-peak single-class phantoms at 16x16x8 ----------------

LUNG_DIMS = (16, 16, 8)


def lung_spec():
    spec = lung_phantom_spec(LUNG_DIMS)
    spec.classes[0].radius_range = (1.8, 3.4)
    return spec


@pytest.fixture(scope="session")
def lung_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("lung_data")
    return generate_phantom_dataset(lung_spec(), {"pathological": 18, "normal": 4}, 3, out)


@pytest.fixture(scope="session")
def lung_records(lung_manifest) -> list[CaseRecord]:
    return load_manifest(lung_manifest)


@pytest.fixture(scope="session")
def lung_clusters(lung_records) -> HistogramClusterModel:
    hists = []
    for rec in lung_records:
        if rec.role != "pathological":
            continue
        volume, masks = load_case(rec)
        hists.append(extract_histogram(volume, masks.union))
    return cluster_histograms(hists, 3, seed=0)


def _lung_texture_config(conditioning: str) -> TrainConfig:
    return TrainConfig(
        T=80,
        schedule="cosine",
        epochs=400,
        batch_size=4,
        base_channels=12,
        learning_rate=2e-3,
        seed=0,
        conditioning=conditioning,
    )


@pytest.fixture(scope="session")
def lung_h_model(lung_manifest) -> Trained:
    return _train(train_texture_model, lung_manifest, _lung_texture_config("histogram"))


@pytest.fixture(scope="session")
def lung_plain_model(lung_manifest) -> Trained:
    return _train(train_texture_model, lung_manifest, _lung_texture_config("none"))


@pytest.fixture(scope="session")
def lung_mask_model(lung_manifest) -> Trained:
    config = TrainConfig(
        T=80,
        schedule="cosine",
        epochs=350,
        batch_size=4,
        base_channels=12,
        learning_rate=2e-3,
        seed=0,
        channels=1,
    )
    return _train(train_mask_model, lung_manifest, config)


# -- cardiac bundle: two nested classes at 20x20x10 ----------------------

CARDIAC_DIMS = (20, 20, 10)


def cardiac_spec():
    spec = cardiac_phantom_spec(CARDIAC_DIMS)
    spec.classes[0].radius_range = (2.8, 4.0)
    spec.classes[0].sigma = 0.09
    spec.classes[1].radius_range = (1.8, 2.6)
    spec.classes[1].sigma = 0.09
    spec.background_noise = 0.14
    spec.organ_noise = 0.13
    return spec


@pytest.fixture(scope="session")
def cardiac_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("cardiac_data")
    return generate_phantom_dataset(
        cardiac_spec(), {"pathological": 16, "normal": 8}, 21, out, test_count=20
    )


@pytest.fixture(scope="session")
def cardiac_records(cardiac_manifest) -> list[CaseRecord]:
    return load_manifest(cardiac_manifest)


@pytest.fixture(scope="session")
def cardiac_j_model(cardiac_manifest) -> Trained:
    config = TrainConfig(
        T=80,
        schedule="cosine",
        epochs=450,
        batch_size=4,
        base_channels=12,
        learning_rate=2e-3,
        seed=0,
        conditioning="none",
        channels=2,
    )
    return _train(train_texture_model, cardiac_manifest, config)


@pytest.fixture(scope="session")
def cardiac_mask_model(cardiac_manifest) -> Trained:
    config = TrainConfig(
        T=80,
        schedule="cosine",
        epochs=400,
        batch_size=4,
        base_channels=12,
        learning_rate=2e-3,
        seed=0,
        channels=2,
    )
    return _train(train_mask_model, cardiac_manifest, config)
