"""Saliency-guided scanning: per-token attention scores from the last prompt
token, patch aggregation, and the per-layer saliency ratio."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ToyMLLM, layer_norm, rope_apply
from .sequence import Role, TokenSequence


class DegenerateInputError(ValueError):
    """Patch saliency totals vanished; the ratio is undefined."""


@dataclass(frozen=True)
class PatchGrid:
    """Uniform p x p partition of the grid_side x grid_side visual-token grid."""

    grid_side: int
    p: int

    def __post_init__(self):
        if self.grid_side % self.p != 0:
            raise ValueError(
                f"grid side {self.grid_side} not divisible into {self.p}x{self.p} patches"
            )

    @property
    def patch_side(self) -> int:
        return self.grid_side // self.p

    @property
    def n_patches(self) -> int:
        return self.p * self.p

    def token_indices(self, patch: int) -> np.ndarray:
        """Row-major visual-token indices belonging to one patch."""
        if not 0 <= patch < self.n_patches:
            raise ValueError(f"patch index {patch} out of range [0, {self.n_patches})")
        s = self.patch_side
        pr, pc = divmod(patch, self.p)
        rows = np.arange(pr * s, (pr + 1) * s)
        cols = np.arange(pc * s, (pc + 1) * s)
        return (rows[:, None] * self.grid_side + cols[None, :]).ravel()


@dataclass
class SaliencyReport:
    layer: int
    scores: np.ndarray  # per visual token
    patch_sums: np.ndarray  # p*p aggregates
    rho: float
    argmax_patch: int
    action: str = "keep"  # expand / drop / keep
    sr_mass: float = 0.0
    seq_len: int = 0


def _last_text_index(seq: TokenSequence) -> int:
    sl = seq.slices().get(Role.TEXT)
    if sl is None or sl.stop == sl.start:
        raise ValueError("sequence has no text segment")
    return sl.stop - 1


def attention_logits(
    model: ToyMLLM, layer: int, seq: TokenSequence, key_indices: np.ndarray
) -> np.ndarray:
    """Per-head scaled q.k logits of the last text token against given keys.

    Uses the layer's own normalization, projections and rotary positions, i.e.
    exactly the quantities the layer's attention would compute.
    """
    c = model.config
    w = model.weights
    p = f"layers.{layer}."
    hidden = seq.hidden
    positions = seq.positions
    t_idx = _last_text_index(seq)
    a = layer_norm(hidden, w[p + "ln1_g"], w[p + "ln1_b"])
    q = (a[t_idx : t_idx + 1] @ w[p + "wq"]).reshape(1, c.n_heads, c.head_dim)
    q = rope_apply(q, positions[t_idx : t_idx + 1])[0]
    keys = (a[key_indices] @ w[p + "wk"]).reshape(len(key_indices), c.n_heads, c.head_dim)
    keys = rope_apply(keys, positions[key_indices])
    scale = np.sqrt(np.asarray(c.head_dim, dtype=hidden.dtype))
    return np.einsum("hd,khd->hk", q, keys) / scale


def token_saliency(
    model: ToyMLLM, layer: int, seq: TokenSequence, mode: str = "attention"
) -> np.ndarray:
    """Saliency of each visual token w.r.t. the last text token.

    "attention" mode softmaxes the per-head logits over visual positions only
    and averages heads, so scores are nonnegative and sum to 1. "raw" mode
    returns head-averaged unnormalized dot products.
    """
    vis = seq.slices().get(Role.VISUAL)
    if vis is None or vis.stop == vis.start:
        raise ValueError("sequence has no visual tokens")
    logits = attention_logits(model, layer, seq, np.arange(vis.start, vis.stop))
    if mode == "raw":
        return logits.mean(axis=0)
    if mode != "attention":
        raise ValueError(f"unknown saliency mode {mode!r}")
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs.mean(axis=0)


def sr_attention_mass(model: ToyMLLM, layer: int, seq: TokenSequence) -> float:
    """Fraction of last-token attention mass on the SuperRes block when the
    softmax runs over visual plus SuperRes positions. 0 when no block exists."""
    slices = seq.slices()
    sr = slices.get(Role.SUPERRES)
    if sr is None:
        return 0.0
    vis = slices[Role.VISUAL]
    idx = np.concatenate([np.arange(vis.start, vis.stop), np.arange(sr.start, sr.stop)])
    logits = attention_logits(model, layer, seq, idx)
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    probs = (e / e.sum(axis=1, keepdims=True)).mean(axis=0)
    n_vis = vis.stop - vis.start
    return float(probs[n_vis:].sum())


def aggregate_patches(scores: np.ndarray, grid: PatchGrid) -> tuple[np.ndarray, int]:
    """Sum token scores inside each patch; ties in the argmax break low."""
    scores = np.asarray(scores)
    if scores.shape != (grid.grid_side * grid.grid_side,):
        raise ValueError(
            f"aggregate_patches: expected {grid.grid_side ** 2} scores, got {scores.shape}"
        )
    sums = np.zeros(grid.n_patches, dtype=np.float64)
    for patch in range(grid.n_patches):
        acc = 0.0
        for j in grid.token_indices(patch):
            acc += float(scores[j])
        sums[patch] = acc
    argmax = int(np.argmax(sums))  # np.argmax returns the first (lowest) max index
    return sums, argmax


def saliency_ratio(patch_sums: np.ndarray) -> float:
    patch_sums = np.asarray(patch_sums, dtype=np.float64)
    if np.any(patch_sums < 0):
        raise ValueError("saliency_ratio: patch sums must be nonnegative")
    total = float(patch_sums.sum())
    if total <= 0.0:
        raise DegenerateInputError("saliency_ratio: zero total saliency")
    return float(patch_sums.max()) / total


def scan_layer(
    model: ToyMLLM, layer: int, seq: TokenSequence, grid: PatchGrid, mode: str = "attention"
) -> SaliencyReport:
    scores = token_saliency(model, layer, seq, mode=mode)
    sums, argmax = aggregate_patches(scores, grid)
    rho = saliency_ratio(sums)
    return SaliencyReport(
        layer=layer,
        scores=scores,
        patch_sums=sums,
        rho=rho,
        argmax_patch=argmax,
        sr_mass=sr_attention_mass(model, layer, seq),
        seq_len=seq.length,
    )


def layer_trace(model: ToyMLLM, sample, p: int = 2, mode: str = "attention") -> list[SaliencyReport]:
    """Hook-free prefill emitting (rho, argmax patch, correctness) per layer."""
    grid = PatchGrid(model.config.grid_side, p)
    seq = model.build_sequence(sample.image, sample.query_ids)
    reports: list[SaliencyReport] = []

    def hook(layer, s, _prev):
        reports.append(scan_layer(model, layer, s, grid, mode=mode))
        return None

    model.forward_prefill(seq, hooks=hook)
    gt = sample.gt_patch(p)
    for r in reports:
        r.action = "correct" if r.argmax_patch == gt else "incorrect"
    return reports


def trace_to_csv(reports: list[SaliencyReport], gt_patch: int, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "rho", "argmax_patch", "is_correct", "sr_mass"])
        for r in reports:
            writer.writerow(
                [r.layer, f"{r.rho:.9f}", r.argmax_patch, int(r.argmax_patch == gt_patch), f"{r.sr_mass:.9f}"]
            )
