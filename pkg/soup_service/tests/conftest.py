# tests/conftest.py
import copy

import pytest

from app.config import parse_config
from app.data import gen_blobs, split_train_test_val
from app.nn_core import ArchSpec, init_model
from app.orchestrator import DataSplits, build_context, prepare_data, pretrain

SMALL_CONFIG = {
    "name": "tiny",
    "method": "sms",
    "seeds": [0],
    "save_checkpoints": False,
    "bn_batch_size": 64,
    "dataset": {
        "num_classes": 3,
        "dim": 2,
        "n_per_class": 60,
        "spread": 1.0,
        "data_seed": 3,
        "subgroup_skew": 0.2,
        "corruption_kinds": ["gaussian_noise", "feature_dropout"],
        "severities": [1, 3],
    },
    "arch": {"hidden": [16, 16]},
    "pretrain": {"epochs": 4, "batch_size": 32, "peak_lr": 0.1},
    "pruning": {"target_sparsity": 0.8, "phases": 2, "retrain_epochs": 2, "m": 2},
    "dst": {"num_prune_events": 3, "bimp_pretrain_epochs": 2, "sms_start_epoch": 1},
}


def make_config(**overrides):
    """SMALL_CONFIG with top-level keys replaced and nested tables merged."""
    raw = copy.deepcopy(SMALL_CONFIG)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key] = {**raw[key], **value}
        else:
            raw[key] = value
    return parse_config(raw)


@pytest.fixture
def small_config():
    return make_config()


@pytest.fixture(scope="session")
def small_splits():
    return prepare_data(make_config().dataset)


@pytest.fixture(scope="session")
def pretrained_model(small_splits):
    return pretrain(make_config(), small_splits, 0)


@pytest.fixture
def small_context(small_config, small_splits):
    return build_context(small_config, 0, data=small_splits)


@pytest.fixture
def blob_splits():
    full = gen_blobs(num_classes=3, dim=4, n_per_class=40, spread=1.0, seed=7, subgroup_skew=0.25)
    train, val, test = split_train_test_val(full, 0.2, 0.1, seed=7)
    return DataSplits(train=train, val=val, test=test)


@pytest.fixture
def tiny_model():
    return init_model(ArchSpec(sizes=[4, 8, 6, 3]), seed=0)
