"""Checkpoint container round-trips and failure modes."""

import json
import struct

import numpy as np
import pytest

from checkpoint import MAGIC, checkpoint_load, checkpoint_save, read_checkpoint, write_checkpoint
from errors import CheckpointHeaderError, CheckpointMagicError, CheckpointTruncatedError, DataError
from model import Classifier


@pytest.fixture
def saved(tmp_path, tiny_cnn):
    path = tmp_path / "model.ckpt"
    checkpoint_save(path, tiny_cnn)
    return path


class TestRoundTrip:
    def test_tensors_are_bit_exact(self, saved, tiny_cnn):
        loaded = checkpoint_load(saved)
        original = tiny_cnn.state_dict()
        restored = loaded.state_dict()
        assert set(original) == set(restored)
        for name, value in original.items():
            assert restored[name].dtype == value.dtype
            assert restored[name].tobytes() == value.tobytes(), name

    def test_float32_model(self, tmp_path, tiny_cnn_config):
        model = Classifier.build(tiny_cnn_config.model_copy(update={"precision": "float32"}), np.random.default_rng(1))
        path = tmp_path / "f32.ckpt"
        checkpoint_save(path, model)
        loaded = checkpoint_load(path)
        for name, param in model.named_parameters().items():
            assert np.array_equal(loaded.named_parameters()[name].data, param.data)
            assert loaded.named_parameters()[name].data.dtype == np.float32

    def test_config_survives(self, saved, tiny_cnn):
        loaded = checkpoint_load(saved)
        assert loaded.config == tiny_cnn.config
        assert loaded.backbone.specs == tiny_cnn.backbone.specs

    def test_loaded_model_predicts_identically(self, saved, tiny_cnn, rng):
        x = rng.uniform(size=(3, 1, 8, 8))
        np.testing.assert_array_equal(checkpoint_load(saved).logits(x), tiny_cnn.logits(x))

    def test_identical_models_give_identical_bytes(self, tmp_path, tiny_cnn):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        checkpoint_save(a, tiny_cnn)
        checkpoint_save(b, tiny_cnn)
        assert a.read_bytes() == b.read_bytes()

    def test_no_temp_file_left(self, saved):
        assert not saved.with_name(saved.name + ".tmp").exists()

    def test_generic_container(self, tmp_path):
        tensors = {"a": np.arange(6, dtype=np.int64).reshape(2, 3), "b": np.array([1.5], dtype=np.float32)}
        write_checkpoint(tmp_path / "c", {"note": "x"}, tensors)
        meta, loaded = read_checkpoint(tmp_path / "c")
        assert meta == {"note": "x"}
        np.testing.assert_array_equal(loaded["a"], tensors["a"])
        assert loaded["b"].dtype == np.float32


class TestCorruption:
    """Each kind of damage maps to its own error."""

    def test_bad_magic(self, saved):
        raw = bytearray(saved.read_bytes())
        raw[0:8] = b"NOTMAGIC"
        saved.write_bytes(bytes(raw))
        with pytest.raises(CheckpointMagicError):
            checkpoint_load(saved)

    def test_truncated_payload(self, saved):
        saved.write_bytes(saved.read_bytes()[:-10])
        with pytest.raises(CheckpointTruncatedError):
            checkpoint_load(saved)

    def test_truncated_header(self, saved):
        saved.write_bytes(saved.read_bytes()[:20])
        with pytest.raises(CheckpointTruncatedError):
            checkpoint_load(saved)

    def test_trailing_bytes(self, saved):
        saved.write_bytes(saved.read_bytes() + b"\x00")
        with pytest.raises(CheckpointHeaderError):
            checkpoint_load(saved)

    def test_unreadable_header(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        body = b"not json"
        path.write_bytes(MAGIC + struct.pack("<Q", len(body)) + body)
        with pytest.raises(CheckpointHeaderError):
            read_checkpoint(path)

    def test_shape_disagrees_with_payload(self, tmp_path):
        header = json.dumps({"format": 1, "meta": {}, "tensors": [
            {"name": "w", "shape": [3], "dtype": "<f8", "nbytes": 16},
        ]}).encode()
        path = tmp_path / "shape.ckpt"
        path.write_bytes(MAGIC + struct.pack("<Q", len(header)) + header + b"\x00" * 16)
        with pytest.raises(CheckpointHeaderError):
            read_checkpoint(path)

    def test_missing_tensors(self, tmp_path, tiny_cnn):
        path = tmp_path / "partial.ckpt"
        write_checkpoint(path, tiny_cnn.meta(), {})
        with pytest.raises(CheckpointHeaderError):
            checkpoint_load(path)

    def test_errors_are_data_errors(self):
        for cls in (CheckpointMagicError, CheckpointTruncatedError, CheckpointHeaderError):
            assert issubclass(cls, DataError)
            assert cls.exit_code == 2
