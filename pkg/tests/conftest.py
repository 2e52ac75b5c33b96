import numpy as np
import pytest

from ramm.model import ModelConfig, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def micro_config(**overrides) -> ModelConfig:
    base = dict(
        vocab_size=14, n_answers=3, d=8, n_head=2, l_fuse=1, l_text=1,
        l_image=1, d_proj=4, max_text_len=6, patch_grid=2, d_patch=3,
        d_ff=16, dropout_rate=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def micro_params(cfg=None, seed=7, dtype=np.float64):
    cfg = cfg or micro_config()
    return init_params(cfg, seed=seed, dtype=dtype)
