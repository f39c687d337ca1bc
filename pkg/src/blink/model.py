"""Miniature multimodal decoder-only transformer with per-layer rewrite hooks.

The model is a pre-norm transformer over a token stream of
[System, Visual, (SuperRes)?, Text] segments. A hook can run at the entry of
each decoder layer (before the layer's input normalization) and replace the
whole sequence, which is how the dynamic token-resolution engine rewrites the
stream mid-stack. Rotary position encodings are computed inside each layer
from the sequence's current position ids, so per-layer renumbering after
insertion stays coherent.
"""

from __future__ import annotations

import functools
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .sequence import Role, Segment, SequenceError, TokenSequence

LN_EPS = 1e-5
ROPE_BASE = 10000.0

Hook = Callable[[int, TokenSequence, Optional[np.ndarray]], Optional[TokenSequence]]


class PipelineIntegrityError(RuntimeError):
    """A layer hook returned a sequence violating TokenSequence invariants."""


class StateError(RuntimeError):
    """Decode was attempted without a completed prefill."""


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 8
    vocab_size: int = 64
    image_size: int = 48
    patch_pixels: int = 4
    max_text_len: int = 8
    n_system_tokens: int = 1
    ffn_mult: int = 4
    rng_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.image_size % self.patch_pixels != 0:
            raise ValueError("image_size must be divisible by patch_pixels")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("head dim must be even for rotary encoding")

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_pixels

    @property
    def n_visual(self) -> int:
        return self.grid_side * self.grid_side

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class LayerState:
    """Per-layer KV cache from prefill; lengths may differ across layers."""

    keys: np.ndarray  # (n, n_heads, head_dim), rotary already applied
    values: np.ndarray  # (n, n_heads, head_dim)
    positions: np.ndarray  # (n,)
    role_slices: dict[Role, slice]
    attn_row: np.ndarray  # (n_heads, n) last-prompt-token attention probs

    @property
    def length(self) -> int:
        return self.keys.shape[0]


@dataclass
class PrefillResult:
    seq: TokenSequence
    logits: np.ndarray  # (vocab,) at the last prompt position
    layers: list[LayerState]
    hook_site_hidden: list[np.ndarray] | None = None  # per layer, pre-LN states
    all_logits: np.ndarray | None = None


def init_weights(config: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(config.rng_seed)
    d, v = config.d_model, config.vocab_size
    patch_dim = config.patch_pixels * config.patch_pixels * 3
    dt = config.np_dtype

    def normal(shape, scale):
        return (rng.standard_normal(shape) * scale).astype(dt)

    w: dict[str, np.ndarray] = {
        "tok_embed": normal((v, d), 0.02),
        "sys_embed": normal((config.n_system_tokens, d), 0.02),
        "patch_w": normal((patch_dim, d), patch_dim**-0.5),
        "patch_b": np.zeros(d, dtype=dt),
        "lnf_g": np.ones(d, dtype=dt),
        "lnf_b": np.zeros(d, dtype=dt),
        "head_w": normal((d, v), d**-0.5),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        w[p + "ln1_g"] = np.ones(d, dtype=dt)
        w[p + "ln1_b"] = np.zeros(d, dtype=dt)
        w[p + "wq"] = normal((d, d), d**-0.5)
        w[p + "wk"] = normal((d, d), d**-0.5)
        w[p + "wv"] = normal((d, d), d**-0.5)
        w[p + "wo"] = normal((d, d), d**-0.5 / np.sqrt(2 * config.n_layers))
        w[p + "ln2_g"] = np.ones(d, dtype=dt)
        w[p + "ln2_b"] = np.zeros(d, dtype=dt)
        w[p + "w1"] = normal((d, config.ffn_mult * d), d**-0.5)
        w[p + "w2"] = normal((config.ffn_mult * d, d), (config.ffn_mult * d) ** -0.5 / np.sqrt(2 * config.n_layers))
    return w


def weights_hash(weights: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(weights):
        h.update(name.encode())
        h.update(np.ascontiguousarray(weights[name]).tobytes())
    return h.hexdigest()


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gamma + beta


def rope_angles(positions: np.ndarray, head_dim: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = ROPE_BASE ** (-np.arange(half) * 2.0 / head_dim)
    ang = positions[:, None].astype(np.float64) * inv_freq[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_apply(x: np.ndarray, positions: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Rotate (n, n_heads, head_dim) vectors by position-dependent angles."""
    n, _, hd = x.shape
    cos, sin = rope_angles(positions, hd, x.dtype)
    if inverse:
        sin = -sin
    x1 = x[:, :, 0::2]
    x2 = x[:, :, 1::2]
    c = cos[:, None, :]
    s = sin[:, None, :]
    out = np.empty_like(x)
    out[:, :, 0::2] = x1 * c - x2 * s
    out[:, :, 1::2] = x1 * s + x2 * c
    return out


@functools.lru_cache(maxsize=8)
def _causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def masked_softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Softmax over the last axis of (heads, q, k) scores holding -inf masks."""
    m = np.max(scores, axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


class ToyMLLM:
    """Frozen-weight inference wrapper: prefill with hooks, then cached decoding."""

    def __init__(self, config: ModelConfig, weights: dict[str, np.ndarray] | None = None):
        self.config = config
        self.weights = weights if weights is not None else init_weights(config)

    # -- embedding ---------------------------------------------------------

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        """Patchify and project an image to (n_visual, d) tokens, row-major."""
        c = self.config
        if image.shape != (c.image_size, c.image_size, 3):
            raise ValueError(
                f"encode_image: expected {(c.image_size, c.image_size, 3)}, got {image.shape}"
            )
        g, pp = c.grid_side, c.patch_pixels
        patches = (
            image.astype(c.np_dtype)
            .reshape(g, pp, g, pp, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape(g * g, pp * pp * 3)
        )
        return patches @ self.weights["patch_w"] + self.weights["patch_b"]

    def embed_tokens(self, token_ids: np.ndarray) -> np.ndarray:
        return self.weights["tok_embed"][np.asarray(token_ids, dtype=np.int64)].copy()

    def build_sequence(self, image: np.ndarray, query_ids: np.ndarray) -> TokenSequence:
        segs = [
            Segment(Role.SYSTEM, self.weights["sys_embed"].copy()),
            Segment(Role.VISUAL, self.encode_image(image)),
            Segment(Role.TEXT, self.embed_tokens(query_ids)),
        ]
        return TokenSequence(segs)

    # -- attention core ----------------------------------------------------

    def _layer_qkv(self, layer: int, normed: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        c = self.config
        p = f"layers.{layer}."
        n = normed.shape[0]
        q = (normed @ self.weights[p + "wq"]).reshape(n, c.n_heads, c.head_dim)
        k = (normed @ self.weights[p + "wk"]).reshape(n, c.n_heads, c.head_dim)
        v = (normed @ self.weights[p + "wv"]).reshape(n, c.n_heads, c.head_dim)
        return q, k, v

    def _layer_forward(
        self, layer: int, x: np.ndarray, positions: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """One decoder layer over (n, d) states; returns (x_out, k, v, attn_probs)."""
        c = self.config
        p = f"layers.{layer}."
        w = self.weights
        a = layer_norm(x, w[p + "ln1_g"], w[p + "ln1_b"])
        q, k, v = self._layer_qkv(layer, a)
        q = rope_apply(q, positions)
        k = rope_apply(k, positions)
        qh = q.transpose(1, 0, 2)
        kh = k.transpose(1, 0, 2)
        vh = v.transpose(1, 0, 2)
        scores = (qh @ kh.swapaxes(-1, -2)) / np.sqrt(
            np.asarray(c.head_dim, dtype=x.dtype)
        )
        n = x.shape[0]
        scores[:, ~_causal_mask(n)] = -np.inf
        probs = masked_softmax_rows(scores)
        o = (probs @ vh).transpose(1, 0, 2).reshape(n, c.d_model) @ w[p + "wo"]
        x = x + o
        b = layer_norm(x, w[p + "ln2_g"], w[p + "ln2_b"])
        h = np.maximum(b @ w[p + "w1"], 0)
        x = x + h @ w[p + "w2"]
        return x, k, v, probs

    # -- prefill / decode --------------------------------------------------

    def forward_prefill(
        self,
        seq: TokenSequence,
        hooks: Hook | None = None,
        capture_hidden: bool = False,
        capture_all_logits: bool = False,
    ) -> PrefillResult:
        c = self.config
        w = self.weights
        layers: list[LayerState] = []
        snapshots: list[np.ndarray] | None = [] if capture_hidden else None
        prev_attn: np.ndarray | None = None
        for layer in range(c.n_layers):
            if hooks is not None:
                replacement = hooks(layer, seq, prev_attn)
                if replacement is not None:
                    try:
                        replacement.validate()
                    except SequenceError as exc:
                        raise PipelineIntegrityError(
                            f"hook at layer {layer} broke sequence invariants: {exc}"
                        ) from exc
                    seq = replacement
            if snapshots is not None:
                snapshots.append(seq.hidden)
            x, k, v, probs = self._layer_forward(layer, seq.hidden, seq.positions)
            attn_row = probs[:, -1, :]
            layers.append(
                LayerState(
                    keys=k, values=v, positions=seq.positions.copy(),
                    role_slices=seq.slices(), attn_row=attn_row,
                )
            )
            prev_attn = attn_row
            seq = seq.with_hidden(x)
        f = layer_norm(seq.hidden, w["lnf_g"], w["lnf_b"])
        all_logits = f @ w["head_w"] if capture_all_logits else None
        logits = (f[-1] @ w["head_w"]) if all_logits is None else all_logits[-1]
        return PrefillResult(
            seq=seq, logits=logits, layers=layers,
            hook_site_hidden=snapshots, all_logits=all_logits,
        )

    def decode_step(self, layers: list[LayerState], token_id: int) -> np.ndarray:
        """Append one generated token, attending to each layer's own cache."""
        if not layers:
            raise StateError("decode_step called before prefill")
        c = self.config
        w = self.weights
        x = self.weights["tok_embed"][token_id].copy()
        for layer in range(c.n_layers):
            st = layers[layer]
            p = f"layers.{layer}."
            pos = np.array([int(st.positions.max()) + 1], dtype=np.int64)
            a = layer_norm(x[None, :], w[p + "ln1_g"], w[p + "ln1_b"])
            q, k, v = self._layer_qkv(layer, a)
            q = rope_apply(q, pos)
            k = rope_apply(k, pos)
            keys = np.concatenate([st.keys, k], axis=0)
            values = np.concatenate([st.values, v], axis=0)
            scores = np.einsum("hd,khd->hk", q[0], keys) / np.sqrt(
                np.asarray(c.head_dim, dtype=x.dtype)
            )
            probs = masked_softmax_rows(scores[:, None, :])[:, 0, :]
            o = np.einsum("hk,khd->hd", probs, values).reshape(c.d_model) @ w[p + "wo"]
            xt = x + o
            b = layer_norm(xt[None, :], w[p + "ln2_g"], w[p + "ln2_b"])[0]
            h = np.maximum(b @ w[p + "w1"], 0)
            x = xt + h @ w[p + "w2"]
            layers[layer] = LayerState(
                keys=keys, values=values,
                positions=np.concatenate([st.positions, pos]),
                role_slices=st.role_slices, attn_row=probs,
            )
        f = layer_norm(x[None, :], w["lnf_g"], w["lnf_b"])[0]
        return f @ w["head_w"]

    def generate(
        self,
        seq: TokenSequence,
        max_new_tokens: int = 1,
        hooks: Hook | None = None,
    ) -> tuple[list[int], PrefillResult]:
        """Greedy decoding with frozen per-layer caches after prefill."""
        result = self.forward_prefill(seq, hooks=hooks)
        caches = list(result.layers)
        tokens: list[int] = [int(np.argmax(result.logits))]
        for _ in range(max_new_tokens - 1):
            logits = self.decode_step(caches, tokens[-1])
            tokens.append(int(np.argmax(logits)))
        return tokens, result
