import pytest

from trackmend.data import SynthConfig, generate_synthetic_dataset, load_dataset
from trackmend.training import TrainConfig, pretrain_reid


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """6 identities, 2 tracklets each, 8 frames of 32x16, ~25% occluded."""
    root = tmp_path_factory.mktemp("data") / "small"
    generate_synthetic_dataset(
        SynthConfig(
            root=root,
            identities=6,
            tracklets_per_identity=2,
            frames_per_tracklet=8,
            height=32,
            width=16,
            occlusion_rate=0.25,
            seed=11,
        )
    )
    return load_dataset(root)


@pytest.fixture(scope="session")
def quick_config():
    return TrainConfig(batch_size=4, reid_epochs=4, stcnet_steps=6, seed=5)


@pytest.fixture(scope="session")
def pretrained(small_dataset, quick_config):
    return pretrain_reid(small_dataset, quick_config)
