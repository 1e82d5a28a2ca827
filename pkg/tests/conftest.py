import numpy as np
import pytest

from app.models.schemas import RunConfig, SyntheticSpec
from app.services.data import generate_synthetic, split
from app.utils.config import build_run_config
from app.utils.context_container import RunContext

TINY_OVERRIDES = {
    "initializer.feature_dim": 6,
    "encoder.view_dim": 8,
    "encoder.num_heads": 2,
    "encoder.num_blocks": 1,
    "encoder.dropout_rate": 0.0,
    "head.decoder_hidden": "8",
    "stage1.epochs": 2,
    "schedule.total_epochs": 3,
    "schedule.interval_epochs": 2,
    "schedule.warmup_epochs": 1,
    "schedule.peak_lr": 0.01,
}


def make_config(**overrides) -> RunConfig:
    flat = dict(TINY_OVERRIDES)
    flat.update(overrides)
    return build_run_config(flat)


@pytest.fixture
def tiny_cfg() -> RunConfig:
    return make_config()


@pytest.fixture
def context() -> RunContext:
    return RunContext(0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec() -> SyntheticSpec:
    return SyntheticSpec(num_classes=3, subclasses=2, shapes_per_class=6, views=4, feature_dim=6, seed=0)


@pytest.fixture
def small_dataset(small_spec):
    return generate_synthetic(small_spec)


@pytest.fixture
def small_split(small_dataset):
    return split(small_dataset, (0.5, 0.25, 0.25), 0)
