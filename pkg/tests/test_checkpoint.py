import numpy as np
import pytest

from blink.checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint


def _tensors():
    rng = np.random.default_rng(0)
    return {
        "a.weight": rng.normal(size=(4, 5)).astype(np.float32),
        "a.bias": rng.normal(size=5).astype(np.float64),
        "meta.blob": np.arange(7, dtype=np.uint8),
    }


def test_round_trip(tmp_path):
    path = tmp_path / "model.ckpt"
    tensors = _tensors()
    save_checkpoint(path, tensors)
    loaded = load_checkpoint(path)
    assert set(loaded) == set(tensors)
    for name in tensors:
        assert loaded[name].dtype == tensors[name].dtype
        assert np.array_equal(loaded[name], tensors[name])


def test_save_is_byte_deterministic(tmp_path):
    tensors = _tensors()
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, tensors)
    save_checkpoint(p2, dict(reversed(list(tensors.items()))))
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, _tensors())
    raw = bytearray(path.read_bytes())
    raw[3] ^= 0x55
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError, match="byte"):
        load_checkpoint(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, _tensors())
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_corrupt_header_json(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, _tensors())
    raw = bytearray(path.read_bytes())
    raw[18] = ord("~")  # clobber the opening brace of the header
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_empty_file(tmp_path):
    path = tmp_path / "model.ckpt"
    path.write_bytes(b"")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)
