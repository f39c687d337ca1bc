"""Cross-entropy training of the toy backbone, with a hand-written batched
backward pass through the decoder stack.

The trained weights are a stand-in for a pretrained multimodal model: they are
frozen before any dynamic-resolution experiment runs. Optionally a fraction of
training batches carries an inserted SuperRes block (the ground-truth patch's
embedding tokens, upsampled to the full grid) so the backbone learns to read
token streams of the shape the dynamic pipeline produces at inference time.
The inserted block is treated as a constant in the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import SceneSample
from .model import LN_EPS, ModelConfig, init_weights, weights_hash
from .numerics import bilinear_resize
from .optim import AdamW


@dataclass
class BackboneTrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    reached_target: bool = False
    target_accuracy: float = 0.8
    weights_sha: str = ""

    @property
    def final_accuracy(self) -> float:
        return self.val_accuracy[-1] if self.val_accuracy else 0.0


# -- primitive forward/backward pieces -------------------------------------


def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _ln_bwd(dy, cache):
    xhat, inv, g = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=axes)
    db = dy.sum(axis=axes)
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _rope_tables(positions: np.ndarray, head_dim: int, dtype):
    from .model import ROPE_BASE

    half = head_dim // 2
    inv_freq = ROPE_BASE ** (-np.arange(half) * 2.0 / head_dim)
    ang = positions[:, None].astype(np.float64) * inv_freq[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _rope_fwd(x, cos, sin):
    # x: (B, nh, n, hd); cos/sin: (n, hd/2)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    c = cos[None, None, :, :]
    s = sin[None, None, :, :]
    out = np.empty_like(x)
    out[..., 0::2] = x1 * c - x2 * s
    out[..., 1::2] = x1 * s + x2 * c
    return out


def _rope_bwd(dy, cos, sin):
    return _rope_fwd(dy, cos, -sin)


def _split_heads(x, n_heads):
    B, n, d = x.shape
    return x.reshape(B, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, nh, n, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, n, nh * hd)


# -- full-stack forward / backward -----------------------------------------


def forward_batch(weights, config: ModelConfig, x0: np.ndarray, positions: np.ndarray):
    """Batched decoder forward; returns last-position logits and caches."""
    B, n, d = x0.shape
    nh = config.n_heads
    scale = np.asarray(config.head_dim, dtype=x0.dtype) ** -0.5
    cos, sin = _rope_tables(positions, config.head_dim, x0.dtype)
    causal = np.tril(np.ones((n, n), dtype=bool))[None, None, :, :]
    neg = np.asarray(-np.inf, dtype=x0.dtype)

    x = x0
    caches = []
    for layer in range(config.n_layers):
        p = f"layers.{layer}."
        a, ln1c = _ln_fwd(x, weights[p + "ln1_g"], weights[p + "ln1_b"])
        q = _rope_fwd(_split_heads(a @ weights[p + "wq"], nh), cos, sin)
        k = _rope_fwd(_split_heads(a @ weights[p + "wk"], nh), cos, sin)
        v = _split_heads(a @ weights[p + "wv"], nh)
        scores = np.where(causal, q @ k.swapaxes(-1, -2) * scale, neg)
        m = scores.max(axis=-1, keepdims=True)
        e = np.exp(scores - m)
        probs = e / e.sum(axis=-1, keepdims=True)
        ocat = _merge_heads(probs @ v)
        x1 = x + ocat @ weights[p + "wo"]
        b2, ln2c = _ln_fwd(x1, weights[p + "ln2_g"], weights[p + "ln2_b"])
        z = b2 @ weights[p + "w1"]
        h = np.maximum(z, 0)
        x = x1 + h @ weights[p + "w2"]
        caches.append({
            "a": a, "ln1c": ln1c, "q": q, "k": k, "v": v, "probs": probs,
            "ocat": ocat, "ln2c": ln2c, "b2": b2, "relu": z > 0, "h": h,
        })
    f_last, lnfc = _ln_fwd(x[:, -1, :], weights["lnf_g"], weights["lnf_b"])
    logits = f_last @ weights["head_w"]
    meta = {"cos": cos, "sin": sin, "scale": scale, "f_last": f_last, "lnfc": lnfc, "n": n}
    return logits, caches, meta


def backward_batch(weights, config: ModelConfig, x0, caches, meta, d_logits):
    """Gradients for all transformer weights plus d(x0)."""
    nh = config.n_heads
    cos, sin, scale = meta["cos"], meta["sin"], meta["scale"]
    grads = {}

    grads["head_w"] = meta["f_last"].T @ d_logits
    df_last = d_logits @ weights["head_w"].T
    dx_last, grads["lnf_g"], grads["lnf_b"] = _ln_bwd(df_last, meta["lnfc"])
    B, n, d = x0.shape
    dx = np.zeros_like(x0)
    dx[:, -1, :] = dx_last

    for layer in reversed(range(config.n_layers)):
        p = f"layers.{layer}."
        c = caches[layer]
        # FFN
        dh = dx @ weights[p + "w2"].T
        grads[p + "w2"] = c["h"].reshape(B * n, -1).T @ dx.reshape(B * n, -1)
        dz = dh * c["relu"]
        grads[p + "w1"] = c["b2"].reshape(B * n, -1).T @ dz.reshape(B * n, -1)
        db2 = dz @ weights[p + "w1"].T
        dx1_from_ln, grads[p + "ln2_g"], grads[p + "ln2_b"] = _ln_bwd(db2, c["ln2c"])
        dx1 = dx + dx1_from_ln
        # attention output
        grads[p + "wo"] = c["ocat"].reshape(B * n, -1).T @ dx1.reshape(B * n, -1)
        do = _split_heads(dx1 @ weights[p + "wo"].T, nh)
        dprobs = do @ c["v"].swapaxes(-1, -2)
        dv = c["probs"].swapaxes(-1, -2) @ do
        dscores = c["probs"] * (dprobs - (dprobs * c["probs"]).sum(axis=-1, keepdims=True))
        dq = dscores @ c["k"] * scale
        dk = dscores.swapaxes(-1, -2) @ c["q"] * scale
        dq = _merge_heads(_rope_bwd(dq, cos, sin))
        dk = _merge_heads(_rope_bwd(dk, cos, sin))
        dvm = _merge_heads(dv)
        a = c["a"]
        grads[p + "wq"] = a.reshape(B * n, -1).T @ dq.reshape(B * n, -1)
        grads[p + "wk"] = a.reshape(B * n, -1).T @ dk.reshape(B * n, -1)
        grads[p + "wv"] = a.reshape(B * n, -1).T @ dvm.reshape(B * n, -1)
        da = dq @ weights[p + "wq"].T + dk @ weights[p + "wk"].T + dvm @ weights[p + "wv"].T
        dx_from_ln, grads[p + "ln1_g"], grads[p + "ln1_b"] = _ln_bwd(da, c["ln1c"])
        dx = dx1 + dx_from_ln
    return grads, dx


# -- batch assembly --------------------------------------------------------


def _image_patches(images: np.ndarray, config: ModelConfig) -> np.ndarray:
    B = images.shape[0]
    g, pp = config.grid_side, config.patch_pixels
    return (
        images.astype(config.np_dtype)
        .reshape(B, g, pp, g, pp, 3)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(B, g * g, pp * pp * 3)
    )


def _sr_block_from_embeddings(vis: np.ndarray, cell: tuple[int, int], config: ModelConfig) -> np.ndarray:
    """Upsampled quadrant-of-the-target embedding tokens, as a constant block."""
    g = config.grid_side
    half = g // 2
    qr = (cell[0] // half) * half
    qc = (cell[1] // half) * half
    grid = vis.reshape(g, g, -1)[qr : qr + half, qc : qc + half, :]
    return bilinear_resize(grid, (g, g)).reshape(g * g, -1)


def assemble_batch(
    weights,
    config: ModelConfig,
    images: np.ndarray,
    query_ids: np.ndarray,
    cells: list[tuple[int, int]] | None = None,
):
    """Build (B, n, d) input states; cells != None inserts a SuperRes block."""
    B = images.shape[0]
    patches = _image_patches(images, config)
    vis = patches @ weights["patch_w"] + weights["patch_b"]
    sys = np.broadcast_to(weights["sys_embed"], (B,) + weights["sys_embed"].shape)
    text = weights["tok_embed"][query_ids]
    parts = [sys, vis]
    if cells is not None:
        sr = np.stack([_sr_block_from_embeddings(vis[b], cells[b], config) for b in range(B)])
        parts.append(sr)
    parts.append(text)
    x0 = np.concatenate(parts, axis=1)
    return x0, patches


def embedding_grads(
    weights, config: ModelConfig, dx0: np.ndarray, patches: np.ndarray, query_ids: np.ndarray,
    with_sr: bool,
):
    """Scatter d(x0) back to the embedding tables; SR rows are constants."""
    n_sys = config.n_system_tokens
    n_vis = config.n_visual
    vis_stop = n_sys + n_vis
    text_start = vis_stop + (n_vis if with_sr else 0)
    grads = {
        "sys_embed": dx0[:, :n_sys, :].sum(axis=0),
        "patch_w": np.einsum("bvp,bvd->pd", patches, dx0[:, n_sys:vis_stop, :], optimize=True),
        "patch_b": dx0[:, n_sys:vis_stop, :].sum(axis=(0, 1)),
        "tok_embed": np.zeros_like(weights["tok_embed"]),
    }
    np.add.at(grads["tok_embed"], query_ids, dx0[:, text_start:, :])
    return grads


# -- training loop ---------------------------------------------------------


def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    B = logits.shape[0]
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    probs = e / e.sum(axis=-1, keepdims=True)
    loss = float(-np.mean(np.log(probs[np.arange(B), targets] + 1e-12)))
    d = probs.copy()
    d[np.arange(B), targets] -= 1.0
    return loss, d / B


def evaluate_accuracy(
    weights, config: ModelConfig, samples: list[SceneSample], batch_size: int = 64
) -> float:
    correct = 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = np.stack([s.image for s in chunk])
        qids = np.stack([s.query_ids for s in chunk])
        x0, _ = assemble_batch(weights, config, images, qids)
        logits, _, _ = forward_batch(weights, config, x0, np.arange(x0.shape[1]))
        preds = logits.argmax(axis=-1)
        correct += int(np.sum(preds == np.array([s.answer_id for s in chunk])))
    return correct / len(samples)


def train_backbone(
    config: ModelConfig,
    train_samples: list[SceneSample],
    val_samples: list[SceneSample],
    epochs: int = 30,
    batch_size: int = 32,
    lr: float = 1e-3,
    sr_augment_prob: float = 0.5,
    target_accuracy: float = 0.8,
    seed: int = 0,
    verbose: bool = False,
) -> tuple[dict[str, np.ndarray], BackboneTrainReport]:
    """Next-token training on (image, query -> answer) scenes.

    Stops early once held-out accuracy reaches the target; otherwise trains
    for the configured epochs and reports the shortfall (non-fatal).
    """
    weights = init_weights(config)
    opt = AdamW(weights, lr=lr, weight_decay=0.0)
    rng = np.random.default_rng(seed)
    report = BackboneTrainReport(target_accuracy=target_accuracy)
    n = len(train_samples)
    all_images = np.stack([s.image for s in train_samples])
    all_qids = np.stack([s.query_ids for s in train_samples])
    all_answers = np.array([s.answer_id for s in train_samples])
    all_cells = [s.target_cell for s in train_samples]

    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            augment = rng.random() < sr_augment_prob
            cells = [all_cells[i] for i in idx] if augment else None
            x0, patches = assemble_batch(
                weights, config, all_images[idx], all_qids[idx], cells
            )
            positions = np.arange(x0.shape[1])
            logits, caches, meta = forward_batch(weights, config, x0, positions)
            loss, d_logits = cross_entropy(logits, all_answers[idx])
            losses.append(loss)
            grads, dx0 = backward_batch(weights, config, x0, caches, meta, d_logits)
            grads.update(
                embedding_grads(weights, config, dx0, patches, all_qids[idx], augment)
            )
            opt.step(grads)
        report.epoch_losses.append(float(np.mean(losses)))
        acc = evaluate_accuracy(weights, config, val_samples)
        report.val_accuracy.append(acc)
        if verbose:
            print(f"epoch {epoch}: loss {report.epoch_losses[-1]:.4f} val_acc {acc:.3f}")
        if acc >= target_accuracy:
            report.reached_target = True
            break
    if not report.reached_target:
        import warnings

        warnings.warn(
            f"backbone reached {report.final_accuracy:.3f} accuracy, below the "
            f"{target_accuracy:.2f} target; experiments may be unreliable"
        )
    report.weights_sha = weights_hash(weights)
    return weights, report
