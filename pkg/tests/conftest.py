import numpy as np
import pytest

from src.config import FeatureSchema, validate_config
from src.datagen import generate_all
from src.trainer import train_source_track, warm_start


def tiny_config_dict(**overrides) -> dict:
    data = {
        "gen": {"num_domains": 3, "num_periods": 4, "samples_per_domain_per_period": 160,
                "target_sample_ratio": 0.5, "seed": 3},
        "schema": {"categorical": [{"name": "c0", "cardinality": 7}, {"name": "c1", "cardinality": 5}],
                   "dense": ["n0"], "embedding_dim": 3},
        "backbone": {"kind": "dnn", "widths": [6, 4]},
        "hyper": {"batch_size": 32, "gate_hidden": 4, "dis_hidden": 4, "lr": 0.01},
        "plug_period": 0,
        "seeds": [0],
        "variants": ["full", "base"],
        "plug_study": {"periods": [1]},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return data


@pytest.fixture
def tiny_config():
    return validate_config(tiny_config_dict())


@pytest.fixture
def tiny_schema():
    return FeatureSchema.model_validate(tiny_config_dict()["schema"])


@pytest.fixture
def tiny_datasets(tiny_config):
    return generate_all(tiny_config.gen, tiny_config.feature_schema)


@pytest.fixture
def plugged_state(tiny_config, tiny_datasets):
    """Period-0 state with fresh transfer modules and trained period-0 sources."""
    track = train_source_track(tiny_config, 0, tiny_datasets, last_period=0)
    state = warm_start(None, 0, tiny_config, 0, first_plug=True)
    state.sources = track[0]
    return state


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
