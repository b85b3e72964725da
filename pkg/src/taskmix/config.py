"""Flat key-value run configuration: parse, resolve, echo.

Config files are plain text, one `key = value` per line, `#` comments.
CLI flags override file values, file values override defaults, and every
run writes the fully-resolved mapping back out so the echoed file
reproduces the run exactly.
"""

from __future__ import annotations

from pathlib import Path

from .episodes import MixConfig
from .errors import ConfigError
from .model import ExtractorSpec, ModelConfig
from .train import TrainConfig

# key -> (type tag, default); "paths" parses a comma-separated list
TRAIN_KEYS: dict[str, tuple[str, object]] = {
    "seed": ("int", 0),
    "epochs": ("int", 20),
    "episodes_per_epoch": ("int", 200),
    "n_way": ("int", 5),
    "k_shot": ("int", 1),
    "n_query": ("int", 10),
    "base_lr": ("float", 5e-4),
    "final_lr": ("float", 1e-5),
    "warmup_steps": ("int", 200),
    "aug_count": ("int", 3),
    "task_mode": ("str", "mix"),
    "mix_alpha": ("float", 1.0),
    "mix_beta": ("float", 1.0),
    "mix_lo": ("float", 0.0),
    "mix_hi": ("float", 0.5),
    "mix_mode": ("str", "pixel"),
    "val_episodes": ("int", 100),
    "checkpoint_every": ("int", 10),
    "train_data": ("paths", []),
    "val_data": ("paths", []),
    "extractor": ("str", "frozen_randconv"),
    "extractor_out_dim": ("int", 96),
    "extractor_layers": ("int", 2),
    "extractor_channels": ("int", 32),
    "extractor_seed": ("int", 0),
    "extractor_table": ("str", ""),
    "d_label": ("int", 32),
    "n_layers": ("int", 2),
    "n_heads": ("int", 4),
    "d_ff": ("int", 512),
    "n_max": ("int", 16),
    "init_std": ("float", 0.08),
}


def parse_config_file(path) -> dict[str, str]:
    """Raw key -> string mapping from a flat config file."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in TRAIN_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        raw[key] = value
    return raw


def _coerce(key: str, value) -> object:
    tag, _ = TRAIN_KEYS[key]
    try:
        if tag == "int":
            return int(value)
        if tag == "float":
            return float(value)
        if tag == "paths":
            if isinstance(value, (list, tuple)):
                return [str(v) for v in value]
            return [p.strip() for p in str(value).split(",") if p.strip()]
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})") from None


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> dict:
    """Defaults <- config file <- CLI overrides; returns a full mapping."""
    resolved = {key: default for key, (_, default) in TRAIN_KEYS.items()}
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            if key not in TRAIN_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            resolved[key] = _coerce(key, value)
    return resolved


def echo(resolved: dict, path) -> None:
    lines = []
    for key in TRAIN_KEYS:
        value = resolved[key]
        if isinstance(value, list):
            value = ",".join(value)
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def to_train_config(resolved: dict) -> TrainConfig:
    return TrainConfig(
        epochs=resolved["epochs"],
        episodes_per_epoch=resolved["episodes_per_epoch"],
        n_way=resolved["n_way"],
        k_shot=resolved["k_shot"],
        n_query=resolved["n_query"],
        base_lr=resolved["base_lr"],
        final_lr=resolved["final_lr"],
        warmup_steps=resolved["warmup_steps"],
        aug_count=resolved["aug_count"],
        task_mode=resolved["task_mode"],
        mix=MixConfig(alpha=resolved["mix_alpha"], beta=resolved["mix_beta"],
                      lo=resolved["mix_lo"], hi=resolved["mix_hi"],
                      mode=resolved["mix_mode"]),
        seed=resolved["seed"],
        val_episodes=resolved["val_episodes"],
        checkpoint_every=resolved["checkpoint_every"],
    )


def to_model_config(resolved: dict) -> ModelConfig:
    spec = ExtractorSpec(
        kind=resolved["extractor"],
        out_dim=resolved["extractor_out_dim"],
        layers=resolved["extractor_layers"],
        channels=resolved["extractor_channels"],
        seed=resolved["extractor_seed"],
        table_path=resolved["extractor_table"] or None,
    )
    return ModelConfig(
        extractor=spec,
        d_label=resolved["d_label"],
        n_layers=resolved["n_layers"],
        n_heads=resolved["n_heads"],
        d_ff=resolved["d_ff"],
        n_max=resolved["n_max"],
        init_std=resolved["init_std"],
    )
