import struct

import pytest
import torch

from protomtl.checkpoint import (
    MAGIC,
    build_model,
    capture,
    encode_checkpoint,
    load_checkpoint,
    restore,
    save_checkpoint,
)
from protomtl.exceptions import (
    CheckpointError,
    CheckpointIntegrityError,
    CheckpointVersionError,
)
from protomtl.model import PrototypeMTLNet
from protomtl.models import TrainConfig
from protomtl.training import train
from .conftest import TINY_TRAIN


@pytest.fixture(scope="module")
def trained(dataset):
    """A one-epoch tiny run with optimizer state."""
    return train(TrainConfig(**TINY_TRAIN), dataset, evaluate_each_epoch=False)


class TestRoundTrip:
    """Tests for checkpoint persistence."""

    def test_save_load_save_is_bit_identical(self, trained, tmp_path):
        """Test re-saving a loaded checkpoint reproduces the file."""
        first = save_checkpoint(trained.checkpoint, tmp_path / "a.pmtl")
        second = save_checkpoint(load_checkpoint(first), tmp_path / "b.pmtl")
        assert first.read_bytes() == second.read_bytes()

    def test_parameters_restore_bitwise(self, trained, tmp_path):
        """Test restored parameter tensors equal the originals bitwise."""
        path = save_checkpoint(trained.checkpoint, tmp_path / "c.pmtl")
        model = build_model(load_checkpoint(path))
        original = trained.model.state_dict()
        for name, tensor in model.state_dict().items():
            assert tensor.dtype == original[name].dtype
            assert torch.equal(tensor, original[name])

    def test_optimizer_and_generator_restore(self, trained, dataset):
        """Test optimizer and shuffling state survive a round trip."""
        checkpoint = trained.checkpoint
        model = PrototypeMTLNet(checkpoint.config, dataset.tasks, (16, 16))
        optimizer = torch.optim.Adam(model.parameters(), lr=checkpoint.config.learning_rate)
        generator = torch.Generator()
        restore(checkpoint, model, optimizer, generator)
        again = capture(
            model,
            checkpoint.config,
            checkpoint.tasks,
            checkpoint.image_size,
            epoch=checkpoint.epoch,
            step=checkpoint.step,
            optimizer=optimizer,
            generator=generator,
            history=checkpoint.history,
        )
        assert encode_checkpoint(again) == encode_checkpoint(checkpoint)

    def test_restored_model_predicts_the_same(self, trained, test_batch):
        """Test a rebuilt model gives identical predictions."""
        model = build_model(trained.checkpoint)
        with trained.model.inference(), model.inference():
            a = trained.model(test_batch.images).predictions
            b = model(test_batch.images).predictions
        for task_id in a:
            assert torch.equal(a[task_id], b[task_id])


class TestCorruption:
    """Tests for integrity and version errors."""

    @pytest.fixture
    def data(self, trained):
        """Encoded checkpoint bytes."""
        return encode_checkpoint(trained.checkpoint)

    def test_truncated(self, data, tmp_path):
        """Test a truncated file raises an integrity error with its offset."""
        path = tmp_path / "t.pmtl"
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointIntegrityError) as exc_info:
            load_checkpoint(path)
        assert exc_info.value.offset == len(data) // 2

    def test_truncated_header(self, data, tmp_path):
        """Test a file shorter than the header is rejected."""
        path = tmp_path / "h.pmtl"
        path.write_bytes(data[:10])
        with pytest.raises(CheckpointIntegrityError):
            load_checkpoint(path)

    def test_bad_magic(self, data, tmp_path):
        """Test a foreign file is rejected at offset 0."""
        path = tmp_path / "m.pmtl"
        path.write_bytes(b"X" + data[1:])
        with pytest.raises(CheckpointIntegrityError) as exc_info:
            load_checkpoint(path)
        assert exc_info.value.offset == 0

    def test_flipped_payload_byte(self, data, tmp_path):
        """Test a corrupted payload fails the checksum."""
        corrupted = bytearray(data)
        corrupted[len(MAGIC) + 12 + 5] ^= 0xFF
        path = tmp_path / "f.pmtl"
        path.write_bytes(bytes(corrupted))
        with pytest.raises(CheckpointIntegrityError) as exc_info:
            load_checkpoint(path)
        assert exc_info.value.offset == len(data) - 4

    def test_trailing_bytes(self, data, tmp_path):
        """Test extra bytes after the trailer are rejected."""
        path = tmp_path / "x.pmtl"
        path.write_bytes(data + b"\x00")
        with pytest.raises(CheckpointIntegrityError):
            load_checkpoint(path)

    def test_unknown_version(self, data, tmp_path):
        """Test a future format version raises a version error."""
        path = tmp_path / "v.pmtl"
        path.write_bytes(data[:8] + struct.pack("<I", 99) + data[12:])
        with pytest.raises(CheckpointVersionError) as exc_info:
            load_checkpoint(path)
        assert exc_info.value.version == 99

    def test_missing_file(self, tmp_path):
        """Test a missing file raises CheckpointError."""
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.pmtl")
