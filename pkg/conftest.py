"""Shared pytest fixtures: noise-free environments, tiny models, cached templates."""

import numpy as np
import pytest

from config import EnvConfig, ModelConfig
from dagger_pipeline import FeatureScaler
from experts import collect_exploration_templates
from tactile_sim import TactileEnv


@pytest.fixture
def env():
    return TactileEnv(EnvConfig())


@pytest.fixture
def quiet_env():
    return TactileEnv(EnvConfig(noise=False))


@pytest.fixture
def scaler():
    return FeatureScaler.from_env(EnvConfig())


@pytest.fixture
def tiny_config():
    """Small enough for finite-difference checks over every parameter."""
    return ModelConfig(
        d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1, ff_mult=2,
        n_components=2, max_T=4, max_M=3, init_sigma=1.0, seed=0,
    )


@pytest.fixture
def small_config():
    """Full-length sequences with a narrow network, for pipeline tests."""
    return ModelConfig(d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1, n_components=2,
                       max_T=40, max_M=12, seed=0)


@pytest.fixture(scope="session")
def templates():
    return collect_exploration_templates(5, np.random.default_rng(0), TactileEnv(EnvConfig(noise=False)))
