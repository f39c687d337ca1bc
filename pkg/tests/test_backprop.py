import numpy as np
import pytest

from blink import backprop
from blink.data import generate_dataset
from blink.model import ModelConfig, ToyMLLM, init_weights
from blink.optim import AdamW, cosine_warmup_lr


def _tiny_config():
    return ModelConfig(
        d_model=16,
        n_heads=2,
        n_layers=2,
        vocab_size=16,
        image_size=8,
        patch_pixels=4,
        max_text_len=4,
    )


def test_cosine_warmup_schedule_oracle():
    lr_max = 1e-3
    total = 1000
    warmup = 0.1
    # end of warmup hits the peak
    assert cosine_warmup_lr(100, total, lr_max, warmup) == pytest.approx(lr_max, rel=1e-6)
    # halfway through the cosine phase: 0.5*(1+cos(pi/2))*lr_max
    mid = 100 + (total - 100) // 2
    assert cosine_warmup_lr(mid, total, lr_max, warmup) == pytest.approx(
        0.5 * (1 + np.cos(np.pi / 2)) * lr_max, abs=1e-9 * lr_max + 1e-12
    )
    assert cosine_warmup_lr(total, total, lr_max, warmup) == pytest.approx(0.0, abs=1e-12)
    # warmup is linear from lr_max/warmup_steps on the first step
    assert cosine_warmup_lr(0, total, lr_max, warmup) == pytest.approx(lr_max / 100)


def test_adamw_decoupled_decay():
    params = {"w": np.ones((2, 2))}
    grads = {"w": np.zeros((2, 2))}
    opt = AdamW(params, weight_decay=0.1)
    opt.step(grads, lr=0.5)
    # zero gradient: only the decay term moves the weights
    np.testing.assert_allclose(params["w"], 1.0 - 0.5 * 0.1, atol=1e-12)


def test_batched_forward_matches_sequential_model():
    """The training-time batched forward must agree with the inference path."""
    cfg = ModelConfig()
    weights = init_weights(cfg)
    model = ToyMLLM(cfg, weights)
    samples = generate_dataset(3, 5, "easy")
    images = np.stack([s.image for s in samples])
    qids = np.stack([np.array(s.query_ids) for s in samples])
    x0, _ = backprop.assemble_batch(weights, cfg, images, qids)
    logits_b, _, _ = backprop.forward_batch(weights, cfg, x0, np.arange(x0.shape[1]))
    for i, s in enumerate(samples):
        seq = model.build_sequence(s.image, s.query_ids)
        logits_s = model.forward_prefill(seq).logits
        np.testing.assert_allclose(logits_b[i], logits_s, atol=2e-4)


def test_backward_matches_finite_differences():
    cfg = _tiny_config()
    weights = init_weights(cfg)
    rng = np.random.default_rng(0)
    n = 6
    x0 = rng.normal(size=(2, n, cfg.d_model)).astype(np.float64)
    weights = {k: v.astype(np.float64) for k, v in weights.items()}
    positions = np.arange(n)
    target = 3

    def loss_for(w):
        logits, _, _ = backprop.forward_batch(w, cfg, x0, positions)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        return -float(logp[:, target].mean())

    logits, caches, meta = backprop.forward_batch(weights, cfg, x0, positions)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=-1, keepdims=True)
    d_logits = probs.copy()
    d_logits[:, target] -= 1.0
    d_logits /= logits.shape[0]
    grads, _ = backprop.backward_batch(weights, cfg, x0, caches, meta, d_logits)

    step = 1e-5
    for name in ["layers.0.wq", "layers.1.w2", "lnf_g", "head_w"]:
        w = weights[name]
        flat_idx = [0, w.size // 2, w.size - 1]
        for fi in flat_idx:
            idx = np.unravel_index(fi, w.shape)
            wp = {k: v.copy() for k, v in weights.items()}
            wp[name][idx] += step
            wm = {k: v.copy() for k, v in weights.items()}
            wm[name][idx] -= step
            num = (loss_for(wp) - loss_for(wm)) / (2 * step)
            assert grads[name][idx] == pytest.approx(num, abs=2e-6), name


def test_evaluate_accuracy_bounds():
    cfg = ModelConfig()
    weights = init_weights(cfg)
    samples = generate_dataset(8, 0, "easy")
    acc = backprop.evaluate_accuracy(weights, cfg, samples, batch_size=4)
    assert 0.0 <= acc <= 1.0
