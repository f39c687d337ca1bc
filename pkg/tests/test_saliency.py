import numpy as np
import pytest

from blink.saliency import (
    DegenerateInputError,
    PatchGrid,
    aggregate_patches,
    layer_trace,
    saliency_ratio,
    scan_layer,
    token_saliency,
    trace_to_csv,
)
from blink.sequence import Role


def test_patch_grid_partition():
    grid = PatchGrid(12, 2)
    assert grid.n_patches == 4
    assert grid.patch_side == 6
    seen = np.zeros(144, dtype=bool)
    for patch in range(4):
        idx = grid.token_indices(patch)
        assert len(idx) == 36
        assert not seen[idx].any()
        seen[idx] = True
    assert seen.all()


def test_patch_grid_row_major_layout():
    grid = PatchGrid(4, 2)
    np.testing.assert_array_equal(grid.token_indices(0), [0, 1, 4, 5])
    np.testing.assert_array_equal(grid.token_indices(3), [10, 11, 14, 15])


def test_patch_grid_rejects_indivisible():
    with pytest.raises(ValueError):
        PatchGrid(12, 5)


def test_token_saliency_is_distribution(model, scene):
    seq = model.build_sequence(scene.image, scene.query_ids)
    scores = token_saliency(model, 3, seq)
    assert scores.shape == (model.config.n_visual,)
    assert np.all(scores >= 0)
    np.testing.assert_allclose(scores.sum(), 1.0, atol=1e-6)


def test_aggregate_matches_bruteforce_oracle(model, scene):
    """Patch sums must exactly equal a naive per-token accumulation loop."""
    seq = model.build_sequence(scene.image, scene.query_ids)
    scores = token_saliency(model, 4, seq)
    grid = PatchGrid(12, 2)
    sums, argmax = aggregate_patches(scores, grid)
    for patch in range(grid.n_patches):
        acc = 0.0
        for t in grid.token_indices(patch):
            acc += float(scores[t])
        assert sums[patch] == acc
    assert argmax == int(np.argmax(sums))


def test_saliency_ratio_bounds_property(rng):
    grid = PatchGrid(12, 2)
    for _ in range(100):
        scores = rng.random(144)
        sums, _ = aggregate_patches(scores, grid)
        rho = saliency_ratio(sums)
        assert 1.0 / grid.n_patches - 1e-12 <= rho <= 1.0 + 1e-12


def test_saliency_ratio_uniform_and_peaked():
    np.testing.assert_allclose(saliency_ratio(np.full(4, 0.25)), 0.25, atol=1e-12)
    assert saliency_ratio(np.array([1.0, 0.0, 0.0, 0.0])) == 1.0


def test_saliency_ratio_degenerate():
    with pytest.raises(DegenerateInputError):
        saliency_ratio(np.zeros(4))


def test_scan_layer_report(model, scene):
    seq = model.build_sequence(scene.image, scene.query_ids)
    report = scan_layer(model, 3, seq, PatchGrid(12, 2))
    assert report.layer == 3
    assert 0.25 - 1e-9 <= report.rho <= 1.0 + 1e-9
    assert 0 <= report.argmax_patch < 4
    assert report.seq_len == seq.length


def test_layer_trace_covers_all_layers(model, scene):
    reports = layer_trace(model, scene, p=2)
    assert [r.layer for r in reports] == list(range(model.config.n_layers))


def test_trace_csv_columns(model, scene, tmp_path):
    reports = layer_trace(model, scene, p=2)
    path = tmp_path / "trace.csv"
    trace_to_csv(reports, scene.gt_patch(2), path)
    lines = path.read_text().strip().splitlines()
    assert lines[0].split(",")[:3] == ["layer", "rho", "argmax_patch"]
    assert len(lines) == model.config.n_layers + 1


def test_raw_mode_differs_from_attention(model, scene):
    seq = model.build_sequence(scene.image, scene.query_ids)
    att = token_saliency(model, 3, seq, mode="attention")
    raw = token_saliency(model, 3, seq, mode="raw")
    assert att.shape == raw.shape
    assert not np.allclose(att, raw)
