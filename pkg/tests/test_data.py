import numpy as np
import pytest

from blink.data import (
    COLOR_BASE,
    DataFormatError,
    N_COLORS,
    SceneSample,
    answer_color,
    answer_token,
    generate_dataset,
    generate_scene,
    make_crops,
    read_dataset,
    write_dataset,
)


def test_token_round_trip():
    for color in range(N_COLORS):
        assert answer_color(answer_token(color)) == color
    assert answer_token(0) == COLOR_BASE


def test_scene_shapes_and_ranges():
    s = generate_scene(0, "medium")
    assert s.image.shape == (48, 48, 3)
    assert s.image.dtype == np.float32
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0
    assert 0 <= s.target_color < N_COLORS
    assert s.answer_id == answer_token(s.target_color)


def test_scene_deterministic_per_seed():
    a = generate_scene(42, "hard")
    b = generate_scene(42, "hard")
    assert np.array_equal(a.image, b.image)
    assert a.answer_id == b.answer_id
    c = generate_scene(43, "hard")
    assert not np.array_equal(a.image, c.image)


def test_gt_patch_consistent_across_patch_sizes():
    """The target block must fall inside a single patch at every patch size."""
    for seed in range(20):
        s = generate_scene(seed, "easy")
        r, c = s.target_cell
        for p in (2, 3, 4):
            patch = s.gt_patch(p)
            side = s.grid_side // p
            pr, pc = patch // p, patch % p
            for dr in range(2):
                for dc in range(2):
                    assert (r + dr) // side == pr
                    assert (c + dc) // side == pc


def test_difficulty_changes_noise():
    easy = generate_scene(5, "easy")
    hard = generate_scene(5, "hard")
    assert not np.array_equal(easy.image, hard.image)


def test_unknown_difficulty_rejected():
    with pytest.raises(ValueError):
        generate_scene(0, "impossible")


def test_make_crops_covers_quadrants():
    s = generate_scene(3, "easy")
    crops = make_crops(s.image)
    assert len(crops) == 4
    assert sorted(c.quadrant for c in crops) == ["BL", "BR", "TL", "TR"]
    for c in crops:
        assert c.crop_image.shape == s.image.shape
        r0, r1 = c.token_rows
        c0, c1 = c.token_cols
        assert r1 - r0 == 6 and c1 - c0 == 6


def test_dataset_round_trip(tmp_path):
    samples = generate_dataset(5, 77, "medium")
    write_dataset(samples, tmp_path)
    loaded = list(read_dataset(tmp_path))
    assert len(loaded) == 5
    for orig, back in zip(samples, loaded):
        assert np.array_equal(orig.image, back.image)
        assert orig.answer_id == back.answer_id
        assert orig.seed == back.seed
        assert orig.target_cell == back.target_cell


def test_dataset_bad_magic_rejected(tmp_path):
    samples = generate_dataset(2, 0, "easy")
    write_dataset(samples, tmp_path)
    blob = tmp_path / "images.blob"
    raw = bytearray(blob.read_bytes())
    raw[0] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(DataFormatError):
        list(read_dataset(tmp_path))


def test_dataset_truncated_blob_rejected(tmp_path):
    samples = generate_dataset(2, 0, "easy")
    write_dataset(samples, tmp_path)
    blob = tmp_path / "images.blob"
    raw = blob.read_bytes()
    blob.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(DataFormatError):
        list(read_dataset(tmp_path))


def test_dataset_error_reports_byte_offset(tmp_path):
    samples = generate_dataset(1, 0, "easy")
    write_dataset(samples, tmp_path)
    blob = tmp_path / "images.blob"
    blob.write_bytes(b"BADMAGIC!!" + blob.read_bytes()[10:])
    with pytest.raises(DataFormatError, match="byte"):
        list(read_dataset(tmp_path))


def test_generate_dataset_unique_seeds():
    samples = generate_dataset(10, 100, "easy")
    assert len({s.seed for s in samples}) == 10
    assert all(isinstance(s, SceneSample) for s in samples)
