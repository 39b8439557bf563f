import os
import sys

# add absolute repository path, to harmonize imports with neuro_ssl.py __main__ usage for tests
sys.path.insert(1, "/".join(os.path.abspath(__file__).split("/")[0:-4]))

import numpy as np
import pytest

from components.neuro_ssl.core import ModelConfig, Recording, TrainConfig, Window
from components.neuro_ssl.data import SynthSpec, generate_synthetic


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow desk-scale tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training runs, enabled with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_recording(data, sample_rate_hz=250.0, dataset_id='ds', subject_id='sub-01', positions=None):
    data = np.asarray(data, dtype=np.float64)
    if positions is None:
        positions = np.stack([np.arange(data.shape[0]) * 0.01, np.zeros(data.shape[0]), np.zeros(data.shape[0])],
                             axis=1)
    return Recording(data, sample_rate_hz, positions, dataset_id, subject_id)


def make_window(data, sample_rate_hz=250.0, dataset_id='ds', subject_id='sub-01', start=0):
    data = np.asarray(data, dtype=np.float64)
    return Window(data, ('{}/{}'.format(dataset_id, subject_id), start), sample_rate_hz, dataset_id, subject_id)


def sine_rows(n_sensors, n_samples, freq_hz, sample_rate_hz=250.0):
    t = np.arange(n_samples) / sample_rate_hz
    return np.tile(np.sin(2 * np.pi * freq_hz * t), (n_sensors, 1))


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(d_shared=8, d_backbone=8, conv_channels=(8, 8, 8, 8), downsampling_ratios=(5, 5, 1),
                       projector_hidden=8, head_hidden=8, dataset_sensor_counts={'synth': 8})


@pytest.fixture
def tiny_train_cfg():
    return TrainConfig(lr=0.001, pretrain_epochs=2, finetune_epochs=2, batch_size=8, precision='float64')


@pytest.fixture(scope="module")
def tiny_dataset():
    spec = SynthSpec(n_subjects=2, n_sensors=8, duration_s=20.0, event_rate_hz=0.25, event_duration_s=1.0, seed=3)
    return generate_synthetic(spec)
