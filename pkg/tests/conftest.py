import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_shape():
    from maskduo.patches import ShapeSpec

    # 80x96 spectrogram, patch 16 -> 5x6 grid, encoder width 96
    return ShapeSpec(patch_size=16, n_freq=5, n_time=6, dim=96)


@pytest.fixture
def toy_trainer(toy_shape):
    from maskduo.backbone import EncoderConfig, PredictorConfig
    from maskduo.training import DuoTrainer, TrainConfig

    cfg = TrainConfig(
        objective="m2d",
        masking_ratio=0.6,
        epochs=100,
        warmup_epochs=0,
        batch_size=8,
        base_lr=1e-3,
        seed=0,
    )
    return DuoTrainer(
        toy_shape, 1, EncoderConfig.toy(), PredictorConfig.toy(), cfg, steps_per_epoch=1
    )


@pytest.fixture
def toy_batch(rng):
    return rng.normal(size=(8, 80, 96)).astype(np.float32)
