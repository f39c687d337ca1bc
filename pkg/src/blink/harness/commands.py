"""Experiment orchestration behind the CLI: dataset generation, training,
evaluation, ablation sweeps, and attention traces. Every command writes a
manifest carrying the config hash and code version so result files can be
tied back to the exact settings that produced them."""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from pathlib import Path

import numpy as np

from .. import __version__
from ..backprop import train_backbone
from ..checkpoint import load_checkpoint, save_checkpoint
from ..data import SceneSample, generate_dataset, make_crops, read_dataset, write_dataset
from ..model import ModelConfig, ToyMLLM
from ..resolution import (
    BlinkConfig,
    BlinkResult,
    run_blink,
    run_vanilla,
    scaled_threshold,
)
from ..saliency import layer_trace, trace_to_csv
from ..sequence import Role
from ..tokensr import (
    ConfigurationError,
    loss_curve_to_csv,
    tokensr_from_tensors,
    tokensr_to_tensors,
    train_tokensr,
)
from .config import ConfigError, HarnessConfig, config_hash

META_CONFIG_HASH = "meta.config_hash"
META_MODEL_CONFIG = "meta.model_config"


def _encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode(), dtype=np.uint8).copy()


def _decode_text(arr: np.ndarray) -> str:
    return arr.tobytes().decode()


def write_manifest(out_dir: Path, command: str, cfg: HarnessConfig, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "code_version": __version__,
        "seed": cfg.seed,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        manifest.update(extra)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- gen-data --------------------------------------------------------------


def cmd_gen_data(cfg: HarnessConfig, count: int, out_dir: Path) -> None:
    samples = generate_dataset(count, cfg.seed, cfg.difficulty, cfg.model_config().image_size)
    write_dataset(samples, out_dir)
    write_manifest(out_dir, "gen-data", cfg, {"count": count, "difficulty": cfg.difficulty})


# -- train -----------------------------------------------------------------


def _save_backbone(path: Path, weights: dict, cfg: HarnessConfig) -> None:
    tensors = dict(weights)
    tensors[META_CONFIG_HASH] = _encode_text(config_hash(cfg))
    tensors[META_MODEL_CONFIG] = _encode_text(
        json.dumps(dataclasses.asdict(cfg.model_config()), sort_keys=True)
    )
    save_checkpoint(path, tensors)


def load_backbone(path: Path) -> tuple[ToyMLLM, str]:
    tensors = load_checkpoint(path)
    if META_MODEL_CONFIG not in tensors:
        raise ConfigError(f"{path}: not a backbone checkpoint (missing model config)")
    model_cfg = ModelConfig(**json.loads(_decode_text(tensors.pop(META_MODEL_CONFIG))))
    chash = _decode_text(tensors.pop(META_CONFIG_HASH))
    return ToyMLLM(model_cfg, tensors), chash


def cmd_train_backbone(cfg: HarnessConfig, data_dir: Path, out_dir: Path) -> dict:
    samples = list(read_dataset(data_dir))
    if not samples:
        raise ConfigError(f"no samples in {data_dir}")
    n_val = max(1, len(samples) // 10)
    train, val = samples[:-n_val], samples[-n_val:]
    weights, report = train_backbone(
        cfg.model_config(),
        train,
        val,
        epochs=cfg.backbone_epochs,
        batch_size=cfg.backbone_batch,
        lr=cfg.backbone_lr,
        sr_augment_prob=cfg.sr_augment_prob,
        target_accuracy=cfg.target_accuracy,
        seed=cfg.seed,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    _save_backbone(out_dir / "backbone.ckpt", weights, cfg)
    with open(out_dir / "backbone_loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "val_accuracy"])
        for i, (loss, acc) in enumerate(zip(report.epoch_losses, report.val_accuracy)):
            writer.writerow([i, f"{loss:.6f}", f"{acc:.4f}"])
    summary = {
        "final_accuracy": report.final_accuracy,
        "reached_target": report.reached_target,
        "epochs_run": len(report.epoch_losses),
    }
    write_manifest(out_dir, "train-backbone", cfg, summary)
    return summary


def cmd_train_tokensr(cfg: HarnessConfig, backbone_path: Path, data_dir: Path, out_dir: Path) -> dict:
    if not backbone_path.exists():
        raise ConfigError(f"backbone checkpoint not found: {backbone_path}")
    model, backbone_hash = load_backbone(backbone_path)
    pairs = []
    for sample in read_dataset(data_dir):
        pairs.extend(make_crops(sample.image, model.config.grid_side))
    if not pairs:
        raise ConfigError(f"no samples in {data_dir}")
    modules, report = train_tokensr(model, pairs, list(cfg.layers_sel), cfg.tokensr_recipe())
    out_dir.mkdir(parents=True, exist_ok=True)
    tensors = tokensr_to_tensors(modules)
    tensors[META_CONFIG_HASH] = _encode_text(backbone_hash)
    save_checkpoint(out_dir / "tokensr.ckpt", tensors)
    loss_curve_to_csv(report.loss_curve, out_dir / "tokensr_loss.csv")
    summary = {
        "initial_loss": {str(k): v for k, v in report.initial_loss.items()},
        "final_loss": {str(k): v for k, v in report.final_loss.items()},
        "backbone_unchanged": report.backbone_hash_before == report.backbone_hash_after,
    }
    write_manifest(out_dir, "train-tokensr", cfg, summary)
    return summary


def load_tokensr(path: Path, expected_backbone_hash: str | None = None):
    tensors = load_checkpoint(path)
    recorded = tensors.pop(META_CONFIG_HASH, None)
    if (
        expected_backbone_hash is not None
        and recorded is not None
        and _decode_text(recorded) != expected_backbone_hash
    ):
        raise ConfigError(
            f"{path}: amplifier was trained against a different backbone config"
        )
    return tokensr_from_tensors(tensors)


# -- eval ------------------------------------------------------------------


def bootstrap_ci(correct: np.ndarray, seed: int = 0, n_resamples: int = 1000) -> tuple[float, float]:
    rng = np.random.default_rng(seed)
    n = len(correct)
    stats = rng.choice(correct, size=(n_resamples, n), replace=True).mean(axis=1)
    return float(np.percentile(stats, 2.5)), float(np.percentile(stats, 97.5))


def _variant_stats(results: list[BlinkResult], answers: list[int], seed: int) -> dict:
    correct = np.array([r.answer_id == a for r, a in zip(results, answers)], dtype=float)
    lo, hi = bootstrap_ci(correct, seed)
    rho_per_layer: dict[int, list[float]] = {}
    actions = {"expand": 0, "drop": 0, "keep": 0}
    for r in results:
        for rep in r.reports:
            rho_per_layer.setdefault(rep.layer, []).append(rep.rho)
            if rep.action in actions:
                actions[rep.action] += 1
    return {
        "accuracy": float(correct.mean()),
        "ci95": [lo, hi],
        "n": len(correct),
        "mean_rho_per_layer": {str(k): float(np.mean(v)) for k, v in sorted(rho_per_layer.items())},
        "action_histogram": actions,
    }


def evaluate_variants(
    model: ToyMLLM,
    samples: list[SceneSample],
    cfg: HarnessConfig,
    tokensr_weights=None,
) -> dict:
    """Vanilla vs interpolation-only vs trained-amplifier runs, same samples."""
    answers = [s.answer_id for s in samples]
    report: dict = {}
    vanilla = [run_vanilla(model, s) for s in samples]
    report["vanilla"] = _variant_stats(vanilla, answers, cfg.seed)
    interp_cfg = cfg.blink_config(amplifier="interp")
    interp = [run_blink(model, s, interp_cfg) for s in samples]
    report["blink_interp"] = _variant_stats(interp, answers, cfg.seed)
    if tokensr_weights is not None:
        full_cfg = cfg.blink_config(amplifier="tokensr")
        full = [run_blink(model, s, full_cfg, tokensr_weights) for s in samples]
        report["blink"] = _variant_stats(full, answers, cfg.seed)
    return report


def cmd_eval(
    cfg: HarnessConfig,
    backbone_path: Path,
    data_dir: Path,
    out_dir: Path,
    tokensr_path: Path | None = None,
) -> dict:
    model, backbone_hash = load_backbone(backbone_path)
    tokensr_weights = (
        load_tokensr(tokensr_path, backbone_hash) if tokensr_path is not None else None
    )
    samples = list(read_dataset(data_dir))
    report = evaluate_variants(model, samples, cfg, tokensr_weights)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"config_hash": config_hash(cfg), "seed": cfg.seed, "variants": report}
    with open(out_dir / "eval_report.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(out_dir, "eval", cfg, {"n_samples": len(samples)})
    return payload


# -- ablate ----------------------------------------------------------------

ABLATION_SUITES = ("modules", "thresholds", "layers", "patches", "interp")


def _suite_cells(cfg: HarnessConfig, suite: str, n_layers: int) -> list[dict]:
    base = dict(amplifier=cfg.amplifier, variant="full", p=cfg.p, use_interp=True)
    tau_exp, tau_drop = cfg.resolved_thresholds()
    base.update(tau_exp=tau_exp, tau_drop=tau_drop, layers_sel=tuple(cfg.layers_sel))
    if suite == "modules":
        return [
            {**base, "name": "full"},
            {**base, "name": "no_sgs", "variant": "no_sgs"},
            {**base, "name": "no_dtr", "variant": "no_dtr"},
        ]
    if suite == "thresholds":
        return [
            {**base, "name": "default"},
            {**base, "name": "no_drop", "variant": "no_drop"},
            {**base, "name": "high_exp_low_drop", "tau_exp": 0.7, "tau_drop": 0.3},
            {**base, "name": "high_exp", "tau_exp": 0.7, "tau_drop": 0.4},
        ]
    if suite == "layers":
        cells = []
        for start in range(n_layers):
            for stop in range(start, n_layers):
                layers = tuple(range(start, stop + 1))
                kind = "single" if start == stop else "range"
                cells.append({**base, "name": f"L{start}-{stop}", "layers_sel": layers, "kind": kind})
        return cells
    if suite == "patches":
        cells = []
        for p in (2, 3, 4):
            cells.append({
                **base,
                "name": f"p{p}",
                "p": p,
                "tau_exp": scaled_threshold(0.5, p),
                "tau_drop": scaled_threshold(0.4, p),
            })
        return cells
    if suite == "interp":
        return [
            {**base, "name": "with_interp"},
            {**base, "name": "without_interp", "use_interp": False},
        ]
    raise ConfigError(f"unknown ablation suite {suite!r}; pick one of {ABLATION_SUITES}")


def cmd_ablate(
    cfg: HarnessConfig,
    suite: str,
    backbone_path: Path,
    data_dir: Path,
    out_dir: Path,
    tokensr_path: Path | None = None,
) -> list[dict]:
    model, backbone_hash = load_backbone(backbone_path)
    tokensr_weights = (
        load_tokensr(tokensr_path, backbone_hash) if tokensr_path is not None else None
    )
    samples = list(read_dataset(data_dir))
    answers = [s.answer_id for s in samples]
    cells = _suite_cells(cfg, suite, model.config.n_layers)
    rows = []
    for cell in cells:
        name = cell.pop("name")
        kind = cell.pop("kind", "variant")
        bc = BlinkConfig(rng_seed=cfg.seed, saliency_mode=cfg.saliency_mode, **cell)
        if bc.amplifier == "tokensr" and tokensr_weights is None:
            raise ConfigurationError("suite needs --tokensr for the trained amplifier")
        weights = tokensr_weights
        if bc.amplifier == "tokensr" and any(
            layer not in tokensr_weights for layer in bc.layers_sel
        ):
            # layer sweeps reach layers without trained modules; use interp there
            bc = dataclasses.replace(bc, amplifier="interp")
            weights = None
        results = [run_blink(model, s, bc, weights) for s in samples]
        correct = np.array([r.answer_id == a for r, a in zip(results, answers)], dtype=float)
        actions = {"expand": 0, "drop": 0, "keep": 0}
        for r in results:
            for rep in r.reports:
                actions[rep.action] += 1
        n_runs = max(1, len(results))
        rows.append({
            "suite": suite,
            "cell": name,
            "kind": kind,
            "variant": bc.variant,
            "tau_exp": bc.tau_exp,
            "tau_drop": bc.tau_drop,
            "layers": "-".join(str(layer) for layer in bc.layers_sel),
            "p": bc.p,
            "use_interp": int(bc.use_interp),
            "accuracy": float(correct.mean()),
            "mean_expand": actions["expand"] / n_runs,
            "mean_drop": actions["drop"] / n_runs,
            "mean_keep": actions["keep"] / n_runs,
        })
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"ablate_{suite}.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    write_manifest(out_dir, f"ablate-{suite}", cfg, {"cells": len(rows)})
    return rows


# -- trace -----------------------------------------------------------------


def attention_segment_trace(model: ToyMLLM, sample: SceneSample, expand_layer: int, p: int = 2) -> list[dict]:
    """Force one expansion, keep the block, and record the last prompt token's
    attention split over Visual / SuperRes / other positions at every layer."""
    from ..resolution import run_copy_baseline

    result = run_copy_baseline(model, sample, expand_layer, p)
    rows = []
    for layer_idx, state in enumerate(result.prefill.layers):
        probs = state.attn_row.mean(axis=0)
        slices = state.role_slices
        vis = probs[slices[Role.VISUAL]]
        sr = probs[slices[Role.SUPERRES]] if Role.SUPERRES in slices else np.array([])
        mass_vis = float(vis.sum())
        mass_sr = float(sr.sum())

        def seg_entropy(seg: np.ndarray) -> float:
            total = seg.sum()
            if total <= 0 or seg.size == 0:
                return 0.0
            q = seg / total
            return float(-(q * np.log(q + 1e-12)).sum())

        rows.append({
            "layer": layer_idx,
            "seq_len": state.length,
            "mass_visual": mass_vis,
            "mass_sr": mass_sr,
            "mass_other": float(1.0 - mass_vis - mass_sr),
            "entropy_visual": seg_entropy(vis),
            "entropy_sr": seg_entropy(sr),
        })
    return rows


def cmd_trace(
    cfg: HarnessConfig,
    backbone_path: Path,
    data_dir: Path,
    out_dir: Path,
    sample_ids: list[int],
    expand_layer: int,
) -> dict:
    model, _ = load_backbone(backbone_path)
    samples = list(read_dataset(data_dir))
    out_dir.mkdir(parents=True, exist_ok=True)
    sr_flatter = 0
    for sid in sample_ids:
        if not 0 <= sid < len(samples):
            raise ConfigError(f"sample id {sid} outside dataset of {len(samples)}")
        sample = samples[sid]
        rows = attention_segment_trace(model, sample, expand_layer, cfg.p)
        with open(out_dir / f"attention_trace_{sid}.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        post = [r for r in rows if r["mass_sr"] > 0]
        if post and np.mean([r["entropy_sr"] >= r["entropy_visual"] for r in post]) >= 0.5:
            sr_flatter += 1
        saliency_rows = layer_trace(model, sample, cfg.p)
        trace_to_csv(saliency_rows, sample.gt_patch(cfg.p), out_dir / f"saliency_trace_{sid}.csv")
    summary = {
        "expand_layer": expand_layer,
        "n_samples": len(sample_ids),
        "sr_entropy_ge_visual_fraction": sr_flatter / max(1, len(sample_ids)),
    }
    with open(out_dir / "trace_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(out_dir, "trace", cfg, summary)
    return summary
