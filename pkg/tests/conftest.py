import pytest
import torch

from protomtl.models import GenConfig, LabelProtocol, TrainConfig, default_tasks
from protomtl.synthdata import assign_labels, generate_dataset, load_split, save_manifest

TINY_TRAIN = {
    "feature_channels": 8,
    "prototype_dim": 8,
    "n_heads": 2,
    "codebook_size": 8,
    "depth": 1,
    "downsample": 4,
    "batch_size": 4,
    "epochs": 1,
    "seed": 0,
}

TINY_GEN = {
    "n_samples": 12,
    "n_test": 4,
    "height": 16,
    "width": 16,
    "n_shapes": 3,
    "n_tasks": 3,
    "seg_classes": 4,
    "seed": 0,
}

TINY_CONFIG_TEXT = """\
# tiny run for tests
feature_channels = 8
prototype_dim = 8
n_heads = 2
codebook_size = 8
depth = 1
batch_size = 4
epochs = 1
"""


@pytest.fixture(autouse=True)
def single_thread():
    """Keep the numeric path single-threaded and deterministic."""
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(previous)


@pytest.fixture
def tiny_config():
    """Smallest configuration exercising every stage."""
    return TrainConfig(**TINY_TRAIN)


@pytest.fixture
def tasks():
    """Semseg, depth and normal."""
    return default_tasks(3, 4)


@pytest.fixture(scope="session")
def dataset(tmp_path_factory):
    """A tiny one-label dataset shared by the whole session; do not modify."""
    root = tmp_path_factory.mktemp("dataset")
    manifest = generate_dataset(GenConfig(**TINY_GEN), root)
    manifest = assign_labels(manifest, LabelProtocol(name="one-label"), seed=0)
    save_manifest(manifest)
    return manifest


@pytest.fixture(scope="session")
def train_batch(dataset):
    """The whole training split of the shared dataset."""
    return load_split(dataset, "train")


@pytest.fixture(scope="session")
def test_batch(dataset):
    """The whole test split of the shared dataset."""
    return load_split(dataset, "test")
