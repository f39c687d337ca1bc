import numpy as np
import pytest

from blink.data import make_crops
from blink.tokensr import (
    ConfigurationError,
    TokenSRWeights,
    TrainRecipe,
    amplify,
    capture_visual_hidden,
    gradient_check,
    tokensr_from_tensors,
    tokensr_loss,
    tokensr_loss_and_grad,
    tokensr_to_tensors,
    train_tokensr,
)

# hand-computed: 0.75*ln(0.75/0.5) + 0.25*ln(0.25/0.5)
KL_STUDENT_TEACHER = 0.13081203594113694
# hand-computed: 0.5*ln(0.5/0.75) + 0.5*ln(0.5/0.25)
KL_TEACHER_STUDENT = 0.14384103622589045


def test_amplify_preserves_grid_shape():
    w = TokenSRWeights.init(8, seed=0)
    rng = np.random.default_rng(1)
    for h in (1, 3, 8):
        for wd in (1, 4, 8):
            x = rng.normal(size=(h, wd, 8)).astype(np.float32)
            assert amplify(x, w).shape == (h, wd, 8)


def test_amplify_channel_bottleneck():
    w = TokenSRWeights.init(16, seed=0)
    assert w.params["conv1_w"].shape == (8, 16, 5, 5)
    assert w.params["conv2_w"].shape == (4, 8, 3, 3)
    assert w.params["conv3_w"].shape == (16, 4, 1, 1)


def test_identity_map_is_bitwise():
    w = TokenSRWeights.identity_map()
    x = np.random.default_rng(2).normal(size=(5, 5, 12)).astype(np.float32)
    assert amplify(x, w) is not x
    assert np.array_equal(amplify(x, w), x)


def test_loss_hand_values_both_directions():
    # single token, two channels; logits chosen so softmax gives the
    # hand-computed distributions
    s = np.log(np.array([[[0.75, 0.25]]]))
    t = np.log(np.array([[[0.5, 0.5]]]))
    assert tokensr_loss(s, t, direction="teacher_student") == pytest.approx(
        KL_TEACHER_STUDENT, abs=1e-8
    )
    assert tokensr_loss(s, t, direction="student_teacher") == pytest.approx(
        KL_STUDENT_TEACHER, abs=1e-8
    )


def test_loss_self_is_tiny():
    x = np.random.default_rng(3).normal(size=(4, 4, 8))
    assert tokensr_loss(x, x) < 1e-9


def test_loss_grad_matches_finite_diff():
    rng = np.random.default_rng(4)
    s = rng.normal(size=(2, 2, 5))
    t = rng.normal(size=(2, 2, 5))
    loss, grad = tokensr_loss_and_grad(s, t)
    step = 1e-6
    for idx in [(0, 0, 0), (1, 1, 2), (0, 1, 4)]:
        sp = s.copy()
        sp[idx] += step
        sm = s.copy()
        sm[idx] -= step
        num = (tokensr_loss(sp, t) - tokensr_loss(sm, t)) / (2 * step)
        assert grad[idx] == pytest.approx(num, abs=1e-5)


def test_gradient_check_passes():
    assert gradient_check(d=8, side=4) < 1e-6


def test_recipe_validation():
    TrainRecipe()
    with pytest.raises(ConfigurationError):
        TrainRecipe(learning_rate=-1.0)
    with pytest.raises(ConfigurationError):
        TrainRecipe(optimizer="sgdmagic")
    with pytest.raises(ConfigurationError):
        TrainRecipe(kl_direction="sideways")


def test_tensor_round_trip():
    modules = {3: TokenSRWeights.init(8, seed=0), 4: TokenSRWeights.init(8, seed=1)}
    back = tokensr_from_tensors(tokensr_to_tensors(modules))
    assert set(back) == {3, 4}
    for layer in (3, 4):
        for name in modules[layer].params:
            assert np.array_equal(back[layer].params[name], modules[layer].params[name])


def test_capture_visual_hidden_grid(model, scene):
    grids = capture_visual_hidden(model, scene.image, [3, 4])
    g = model.config.grid_side
    for layer in (3, 4):
        assert grids[layer].shape == (g, g, model.config.d_model)


def test_train_smoke_reduces_loss(model, scenes):
    pairs = []
    for s in scenes[:2]:
        pairs.extend(make_crops(s.image))
    recipe = TrainRecipe(epochs=1, batch_size=4, seed=0)
    modules, report = train_tokensr(model, pairs, [3], recipe)
    assert set(modules) == {3}
    assert report.backbone_hash_before == report.backbone_hash_after
    assert report.final_loss[3] <= report.initial_loss[3]
