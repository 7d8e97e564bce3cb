import sys
from pathlib import Path

import numpy as np
import pytest

from apn.imts_core import ImtsRecord
from apn.train_harness import TrainConfig, init_params

sys.path.insert(0, str(Path(__file__).parent))


def random_records(rng, n_records=2, n_channels=3, max_obs=10, max_queries=4, t_obs=1.0, allow_empty=False):
    records = []
    for _ in range(n_records):
        channels, queries, targets = [], [], []
        for _ in range(n_channels):
            L = int(rng.integers(0 if allow_empty else 1, max_obs + 1))
            t = np.sort(rng.uniform(0.0, t_obs, size=L))
            channels.append(list(zip(t.tolist(), rng.normal(size=L).tolist())))
            Q = int(rng.integers(1, max_queries + 1))
            queries.append(np.sort(rng.uniform(t_obs, 1.5 * t_obs, size=Q)).tolist())
            targets.append(rng.normal(size=Q).tolist())
        records.append(ImtsRecord.from_lists(channels, queries, targets, t_obs))
    return records


def perturbed_params(config, rng, scale=0.1):
    params = init_params(config)
    for name in params.trainable():
        t = params[name]
        params.assign(name, t.data + scale * rng.normal(size=t.shape))
    return params


@pytest.fixture
def tiny_config():
    return TrainConfig(n_channels=3, n_patches=4, hidden_dim=8, te_dim=5, decoder_hidden=16, seed=2024, batch_size=2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
