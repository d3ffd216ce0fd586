import pytest

from labelforge.backbone import LatentCode, ToyBackboneConfig, toy_generate
from labelforge.interpreter import AnnotatedSample, TrainConfig, train_ensemble


@pytest.fixture(scope="session")
def tiny_config():
    """16x16 toy backbone, cheap enough for pipeline tests."""
    return ToyBackboneConfig(num_levels=2, base_resolution=8)


@pytest.fixture(scope="session")
def tiny_train_config():
    return TrainConfig(
        steps=80, batch_pixels=512, n_members=2, hidden=(16, 16),
        learning_rate=3e-3, seed=11,
    )


@pytest.fixture(scope="session")
def tiny_ensemble(tiny_config, tiny_train_config):
    samples = [
        AnnotatedSample.from_truth(toy_generate(tiny_config, LatentCode.from_seed(s, tiny_config.latent_dim)))
        for s in range(3)
    ]
    return train_ensemble(samples, tiny_config.label_schema(), tiny_train_config)
