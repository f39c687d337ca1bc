"""Experiment configuration: INI-style key = value files with sections.

Every value has a default, so an empty (or missing) config is a valid run.
CLI flags override file values; the BLINK_SEED environment variable overrides
both. The canonical serialization feeds the config hash recorded in result
manifests and checkpoints.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..model import ModelConfig
from ..resolution import BlinkConfig, scaled_threshold
from ..tokensr import TrainRecipe


class ConfigError(ValueError):
    pass


@dataclass
class HarnessConfig:
    # [model]
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 8
    vocab_size: int = 64
    image_size: int = 48
    patch_pixels: int = 4
    model_seed: int = 0
    # [blink]
    layers_sel: tuple[int, ...] = (3, 4)
    tau_exp: float | None = None  # None: default / patch-scaled
    tau_drop: float | None = None
    p: int = 2
    amplifier: str = "interp"
    variant: str = "full"
    use_interp: bool = True
    saliency_mode: str = "attention"
    # [train]
    backbone_epochs: int = 40
    backbone_batch: int = 32
    backbone_lr: float = 1e-3
    sr_augment_prob: float = 0.5
    target_accuracy: float = 0.8
    tokensr_lr: float = 1e-4
    tokensr_warmup: float = 0.03
    tokensr_batch: int = 8
    tokensr_epochs: int = 1
    # [data]
    difficulty: str = "medium"
    # [run]
    seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            vocab_size=self.vocab_size,
            image_size=self.image_size,
            patch_pixels=self.patch_pixels,
            rng_seed=self.model_seed,
        )

    def resolved_thresholds(self) -> tuple[float, float]:
        """Explicit thresholds win; otherwise defaults, patch-scaled for p != 2."""
        tau_exp = self.tau_exp if self.tau_exp is not None else scaled_threshold(0.5, self.p)
        tau_drop = self.tau_drop if self.tau_drop is not None else scaled_threshold(0.4, self.p)
        return tau_exp, tau_drop

    def blink_config(self, **overrides) -> BlinkConfig:
        tau_exp, tau_drop = self.resolved_thresholds()
        kwargs = dict(
            layers_sel=tuple(self.layers_sel),
            tau_exp=tau_exp,
            tau_drop=tau_drop,
            p=self.p,
            amplifier=self.amplifier,
            variant=self.variant,
            use_interp=self.use_interp,
            saliency_mode=self.saliency_mode,
            rng_seed=self.seed,
        )
        kwargs.update(overrides)
        return BlinkConfig(**kwargs)

    def tokensr_recipe(self) -> TrainRecipe:
        return TrainRecipe(
            learning_rate=self.tokensr_lr,
            warmup_ratio=self.tokensr_warmup,
            batch_size=self.tokensr_batch,
            epochs=self.tokensr_epochs,
            seed=self.seed,
        )


_SECTIONS = {
    "model": {
        "d_model": int, "n_heads": int, "n_layers": int, "vocab_size": int,
        "image_size": int, "patch_pixels": int, "model_seed": int,
    },
    "blink": {
        "layers_sel": "intlist", "tau_exp": float, "tau_drop": float, "p": int,
        "amplifier": str, "variant": str, "use_interp": "bool", "saliency_mode": str,
    },
    "train": {
        "backbone_epochs": int, "backbone_batch": int, "backbone_lr": float,
        "sr_augment_prob": float, "target_accuracy": float, "tokensr_lr": float,
        "tokensr_warmup": float, "tokensr_batch": int, "tokensr_epochs": int,
    },
    "data": {"difficulty": str},
    "run": {"seed": int},
}


def _parse_value(raw: str, kind):
    if kind == "intlist":
        return tuple(int(t) for t in raw.replace(",", " ").split())
    if kind == "bool":
        lower = raw.strip().lower()
        if lower in ("1", "true", "yes", "on"):
            return True
        if lower in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    return kind(raw)


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> HarnessConfig:
    cfg = HarnessConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in _SECTIONS[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                try:
                    setattr(cfg, key, _parse_value(raw, _SECTIONS[section][key]))
                except (ValueError, ConfigError) as exc:
                    raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc
    if overrides:
        for dotted, value in overrides.items():
            if value is None:
                continue
            section, _, key = dotted.partition(".")
            if section not in _SECTIONS or key not in _SECTIONS[section]:
                raise ConfigError(f"unknown config override {dotted!r}")
            try:
                setattr(cfg, key, _parse_value(str(value), _SECTIONS[section][key]))
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"override {dotted} = {value!r}: {exc}") from exc
    env_seed = os.environ.get("BLINK_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"BLINK_SEED must be an integer, got {env_seed!r}") from exc
    return cfg


def canonical_text(cfg: HarnessConfig) -> str:
    lines = []
    for section, keys in sorted(_SECTIONS.items()):
        lines.append(f"[{section}]")
        for key in sorted(keys):
            value = getattr(cfg, key)
            if key in ("tau_exp", "tau_drop") and value is None:
                value = cfg.resolved_thresholds()[0 if key == "tau_exp" else 1]
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: HarnessConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode()).hexdigest()
