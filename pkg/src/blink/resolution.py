"""Dynamic token resolution: threshold-driven expand/drop/keep per selected
layer, sequence reconstruction around the SuperRes block, the fixed-layer copy
baseline, and the end-to-end dynamic inference run."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .model import PrefillResult, ToyMLLM
from .numerics import bilinear_resize
from .saliency import PatchGrid, SaliencyReport, scan_layer
from .sequence import Role, Segment, SequenceError, TokenSequence
from .tokensr import ConfigurationError, TokenSRWeights, amplify

DEFAULT_TAU_EXP = 0.5
DEFAULT_TAU_DROP = 0.4
REFERENCE_P = 2

AMPLIFIER_TOKENSR = "tokensr"
AMPLIFIER_INTERP = "interp"

VARIANT_FULL = "full"
VARIANT_NO_SGS = "no_sgs"
VARIANT_NO_DTR = "no_dtr"
VARIANT_NO_DROP = "no_drop"
VARIANTS = (VARIANT_FULL, VARIANT_NO_SGS, VARIANT_NO_DTR, VARIANT_NO_DROP)


def scaled_threshold(tau_ref: float, p: int, p_ref: int = REFERENCE_P) -> float:
    """Patch-count threshold scaling: tau_ref * (1/p^2) / (1/p_ref^2)."""
    return tau_ref * (1.0 / p**2) / (1.0 / p_ref**2)


@dataclass(frozen=True)
class BlinkConfig:
    layers_sel: tuple[int, ...] = (3, 4)
    tau_exp: float = DEFAULT_TAU_EXP
    tau_drop: float = DEFAULT_TAU_DROP
    p: int = 2
    amplifier: str = AMPLIFIER_INTERP
    variant: str = VARIANT_FULL
    use_interp: bool = True  # False: insert the raw h*w patch tokens unresized
    saliency_mode: str = "attention"
    rng_seed: int = 0  # drives random patch picks in the no_sgs variant

    def __post_init__(self):
        if not self.tau_drop < self.tau_exp:
            raise ValueError(
                f"tau_drop ({self.tau_drop}) must be below tau_exp ({self.tau_exp})"
            )
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.amplifier not in (AMPLIFIER_TOKENSR, AMPLIFIER_INTERP):
            raise ValueError(f"unknown amplifier {self.amplifier!r}")
        if len(set(self.layers_sel)) != len(self.layers_sel) or list(self.layers_sel) != sorted(
            self.layers_sel
        ):
            raise ValueError("layers_sel must be a strictly increasing layer list")

    @classmethod
    def for_patches(cls, p: int, tau_exp: float | None = None,
                    tau_drop: float | None = None, **kwargs) -> "BlinkConfig":
        """Config for a p x p grid; thresholds scale automatically unless given."""
        return cls(
            p=p,
            tau_exp=scaled_threshold(DEFAULT_TAU_EXP, p) if tau_exp is None else tau_exp,
            tau_drop=scaled_threshold(DEFAULT_TAU_DROP, p) if tau_drop is None else tau_drop,
            **kwargs,
        )


@dataclass(frozen=True)
class ResolutionAction:
    kind: str  # "expand" / "drop" / "keep"
    patch: Optional[int] = None

    def __post_init__(self):
        if self.kind == "expand" and self.patch is None:
            raise ValueError("expand action requires a patch index")


EXPAND, DROP, KEEP = "expand", "drop", "keep"


def decide_action(
    rho: float,
    config: BlinkConfig,
    sr_block_present: bool,
    argmax_patch: int,
    rng: np.random.Generator | None = None,
    cycle_index: int = 0,
) -> ResolutionAction:
    """Threshold rule: expand above tau_exp, drop a live block below tau_drop.

    Variant no_drop never drops; no_sgs replaces the saliency argmax with a
    seeded random patch; no_dtr ignores rho and alternates expand/drop over
    the selected layers.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    n_patches = config.p * config.p
    if not 0 <= argmax_patch < n_patches:
        raise ValueError(f"argmax patch {argmax_patch} out of range [0, {n_patches})")

    patch = argmax_patch
    if config.variant == VARIANT_NO_SGS:
        if rng is None:
            raise ValueError("no_sgs variant needs the seeded RNG")
        patch = int(rng.integers(n_patches))

    if config.variant == VARIANT_NO_DTR:
        if cycle_index % 2 == 0:
            return ResolutionAction(EXPAND, patch)
        return ResolutionAction(DROP) if sr_block_present else ResolutionAction(KEEP)

    if rho > config.tau_exp:
        return ResolutionAction(EXPAND, patch)
    if rho < config.tau_drop and sr_block_present and config.variant != VARIANT_NO_DROP:
        return ResolutionAction(DROP)
    return ResolutionAction(KEEP)


def update_mask_positions(seq: TokenSequence) -> tuple[np.ndarray, np.ndarray]:
    """Causal mask plus contiguous 0..len-1 position ids for the current layout."""
    positions = np.arange(seq.length, dtype=np.int64)
    return seq.attention_mask(), positions


def _renumbered(segments: list[Segment]) -> TokenSequence:
    seq = TokenSequence(segments)
    _, positions = update_mask_positions(seq)
    return replace(seq, positions=positions)


def expand(
    seq: TokenSequence,
    patch_index: int,
    grid: PatchGrid,
    amplifier: TokenSRWeights | None = None,
    use_interp: bool = True,
) -> TokenSequence:
    """Insert the amplified most-salient patch as the SuperRes segment.

    The patch's tokens are taken from the visual segment, reshaped to their
    2-D layout, bilinearly upsampled to the full grid (unless use_interp is
    off), passed through the amplifier (identity when None), flattened
    row-major and inserted between Visual and Text. An existing block is
    replaced. Positions are renumbered contiguously.
    """
    vis = seq.segment(Role.VISUAL)
    if vis is None:
        raise SequenceError("expand: sequence has no visual segment")
    token_idx = grid.token_indices(patch_index)
    s = grid.patch_side
    patch_tokens = vis.hidden[token_idx].reshape(s, s, -1)
    if use_interp:
        block = bilinear_resize(patch_tokens, (grid.grid_side, grid.grid_side))
    else:
        block = patch_tokens
    if amplifier is not None:
        block = amplify(block, amplifier)
    sr_hidden = block.reshape(-1, block.shape[-1])

    segments: list[Segment] = []
    for seg in seq.segments:
        if seg.role == Role.SUPERRES:
            continue  # replace a live block
        segments.append(seg)
        if seg.role == Role.VISUAL:
            segments.append(Segment(Role.SUPERRES, sr_hidden))
    return _renumbered(segments)


def drop(seq: TokenSequence) -> TokenSequence:
    """Remove the SuperRes segment, reverting to [System, Visual, Text]."""
    if seq.segment(Role.SUPERRES) is None:
        raise RuntimeError("drop: no SuperRes segment to remove")
    segments = [s for s in seq.segments if s.role != Role.SUPERRES]
    return _renumbered(segments)


# -- end-to-end runs -------------------------------------------------------


@dataclass
class BlinkResult:
    answer_id: int
    reports: list[SaliencyReport]
    prefill: PrefillResult

    def action_trace(self) -> list[dict]:
        return [
            {
                "layer": r.layer,
                "rho": r.rho,
                "action": r.action,
                "patch": r.argmax_patch if r.action == EXPAND else None,
                "seq_len": r.seq_len,
            }
            for r in self.reports
        ]


def trace_to_jsonl(result: BlinkResult, path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in result.action_trace():
            fh.write(json.dumps(rec) + "\n")


def _resolve_amplifier(
    config: BlinkConfig, layer: int, tokensr_weights: dict[int, TokenSRWeights] | None
) -> TokenSRWeights | None:
    if config.amplifier == AMPLIFIER_INTERP:
        return None
    if tokensr_weights is None or layer not in tokensr_weights:
        raise ConfigurationError(
            f"amplifier mode 'tokensr' needs trained weights for layer {layer}"
        )
    return tokensr_weights[layer]


def make_blink_hook(
    model: ToyMLLM,
    config: BlinkConfig,
    tokensr_weights: dict[int, TokenSRWeights] | None,
    reports: list[SaliencyReport],
    run_seed: int = 0,
):
    """Per-layer prefill hook implementing scan -> decide -> rewrite."""
    grid = PatchGrid(model.config.grid_side, config.p)
    for layer in config.layers_sel:
        if not 0 <= layer < model.config.n_layers:
            raise ConfigurationError(f"selected layer {layer} outside backbone depth")
    rng = np.random.default_rng((config.rng_seed, run_seed))
    sel = set(config.layers_sel)

    def hook(layer: int, seq: TokenSequence, _prev_attn):
        if layer not in sel:
            return None
        report = scan_layer(model, layer, seq, grid, mode=config.saliency_mode)
        sr_present = seq.segment(Role.SUPERRES) is not None
        cycle_index = config.layers_sel.index(layer)
        action = decide_action(
            report.rho, config, sr_present, report.argmax_patch, rng=rng, cycle_index=cycle_index
        )
        if action.kind == EXPAND:
            amp = _resolve_amplifier(config, layer, tokensr_weights)
            seq = expand(seq, action.patch, grid, amplifier=amp, use_interp=config.use_interp)
            report.argmax_patch = action.patch
        elif action.kind == DROP:
            seq = drop(seq)
        report.action = action.kind
        report.seq_len = seq.length
        reports.append(report)
        return seq if action.kind != KEEP else None

    return hook


def run_blink(
    model: ToyMLLM,
    sample,
    config: BlinkConfig,
    tokensr_weights: dict[int, TokenSRWeights] | None = None,
    max_new_tokens: int = 1,
) -> BlinkResult:
    """Single prefill with dynamic expand/drop at the selected layers, then
    greedy decoding with frozen per-layer caches."""
    reports: list[SaliencyReport] = []
    hook = make_blink_hook(model, config, tokensr_weights, reports, run_seed=getattr(sample, "seed", 0))
    seq = model.build_sequence(sample.image, sample.query_ids)
    tokens, prefill = model.generate(seq, max_new_tokens=max_new_tokens, hooks=hook)
    return BlinkResult(answer_id=tokens[0], reports=reports, prefill=prefill)


def run_vanilla(model: ToyMLLM, sample, max_new_tokens: int = 1) -> BlinkResult:
    seq = model.build_sequence(sample.image, sample.query_ids)
    tokens, prefill = model.generate(seq, max_new_tokens=max_new_tokens)
    return BlinkResult(answer_id=tokens[0], reports=[], prefill=prefill)


def copy_baseline_hook(model: ToyMLLM, layer_fix: int, p: int = 2, reports: list | None = None):
    """Fixed-layer intervention: at layer_fix copy the most-attended patch,
    upsample to the full grid, insert between Visual and Text, never drop."""
    grid = PatchGrid(model.config.grid_side, p)

    def hook(layer: int, seq: TokenSequence, _prev_attn):
        if layer != layer_fix:
            return None
        report = scan_layer(model, layer, seq, grid)
        out = expand(seq, report.argmax_patch, grid, amplifier=None, use_interp=True)
        report.action = EXPAND
        report.seq_len = out.length
        if reports is not None:
            reports.append(report)
        return out

    return hook


def run_copy_baseline(model: ToyMLLM, sample, layer_fix: int, p: int = 2) -> BlinkResult:
    reports: list[SaliencyReport] = []
    hook = copy_baseline_hook(model, layer_fix, p, reports)
    seq = model.build_sequence(sample.image, sample.query_ids)
    tokens, prefill = model.generate(seq, max_new_tokens=1, hooks=hook)
    return BlinkResult(answer_id=tokens[0], reports=reports, prefill=prefill)
