import numpy as np
import pytest

from blink.sequence import Role, Segment, SequenceError, TokenSequence, renumber_positions


def _seq(n_vis=4, n_text=2, d=8):
    rng = np.random.default_rng(0)
    segs = [
        Segment(Role.SYSTEM, rng.normal(size=(1, d))),
        Segment(Role.VISUAL, rng.normal(size=(n_vis, d))),
        Segment(Role.TEXT, rng.normal(size=(n_text, d))),
    ]
    return TokenSequence(segs)


def test_positions_default_contiguous():
    seq = _seq()
    np.testing.assert_array_equal(seq.positions, np.arange(7))


def test_role_order_enforced():
    rng = np.random.default_rng(0)
    segs = [
        Segment(Role.TEXT, rng.normal(size=(2, 4))),
        Segment(Role.VISUAL, rng.normal(size=(3, 4))),
    ]
    with pytest.raises(SequenceError):
        TokenSequence(segs).validate()


def test_duplicate_role_rejected():
    rng = np.random.default_rng(0)
    segs = [
        Segment(Role.VISUAL, rng.normal(size=(2, 4))),
        Segment(Role.VISUAL, rng.normal(size=(2, 4))),
    ]
    with pytest.raises(SequenceError):
        TokenSequence(segs).validate()


def test_superres_slot_between_visual_and_text():
    rng = np.random.default_rng(1)
    segs = [
        Segment(Role.SYSTEM, rng.normal(size=(1, 4))),
        Segment(Role.VISUAL, rng.normal(size=(4, 4))),
        Segment(Role.SUPERRES, rng.normal(size=(4, 4))),
        Segment(Role.TEXT, rng.normal(size=(2, 4))),
    ]
    seq = TokenSequence(segs)
    seq.validate()
    assert [s.role for s in seq.segments] == [
        Role.SYSTEM,
        Role.VISUAL,
        Role.SUPERRES,
        Role.TEXT,
    ]


def test_positions_must_increase():
    seq = _seq()
    with pytest.raises(SequenceError):
        TokenSequence(seq.segments, positions=np.array([0, 1, 1, 2, 3, 4, 5]))


def test_attention_mask_is_causal():
    seq = _seq()
    mask = seq.attention_mask()
    assert mask.shape == (7, 7)
    assert mask[0, 1] == False  # noqa: E712
    assert np.array_equal(mask, np.tril(np.ones((7, 7), dtype=bool)))


def test_slices_cover_sequence():
    seq = _seq()
    slices = seq.slices()
    covered = np.zeros(seq.length, dtype=bool)
    for sl in slices.values():
        covered[sl] = True
    assert covered.all()


def test_with_hidden_preserves_structure():
    seq = _seq()
    new_hidden = seq.hidden * 2.0
    out = seq.with_hidden(new_hidden)
    assert [s.role for s in out.segments] == [s.role for s in seq.segments]
    np.testing.assert_array_equal(out.hidden, new_hidden)
    np.testing.assert_array_equal(out.positions, seq.positions)


def test_renumber_positions_contiguous():
    seq = _seq()
    shifted = TokenSequence(seq.segments, positions=seq.positions * 3 + 5)
    out = renumber_positions(shifted)
    np.testing.assert_array_equal(out.positions, np.arange(seq.length))


def test_copy_is_deep_for_hidden():
    seq = _seq()
    dup = seq.copy()
    dup.segments[0].hidden[0, 0] = 999.0
    assert seq.segments[0].hidden[0, 0] != 999.0
