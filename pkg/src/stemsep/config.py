"""Typed INI-style run configuration with fail-fast validation.

Five sections (dataset, stft, model, train, variant) hold flat key=value
pairs; unknown sections or keys are errors, as are type violations, so a
config either parses completely or the run never starts.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from . import data
from .data import DatasetSplit, split_dataset
from .dsp import StftConfig
from .training import TrainConfig, VariantConfig, VARIANTS


class ConfigError(ValueError):
    pass


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


# section -> key -> (parser, default); REQUIRED means no default
REQUIRED = object()
SCHEMA = {
    "dataset": {
        "kind": (str, "synth"),
        "root": (str, None),
        "num_tracks": (int, 20),
        "duration_s": (float, 10.0),
        "sample_rate": (int, 8000),
        "num_sources": (int, 4),
        "seed": (int, 424242),
        "train_tracks": (int, 14),
        "valid_tracks": (int, 3),
        "test_tracks": (int, 3),
    },
    "stft": {
        "fft_size": (int, 512),
        "hop_size": (int, 128),
        "center": (_parse_bool, True),
    },
    "model": {
        "hidden_size": (int, 48),
        "recurrent_layers": (int, 1),
    },
    "train": {
        "epochs": (int, 50),
        "batch_size": (int, 8),
        "samples_per_epoch": (int, 24),
        "valid_samples": (int, 16),
        "excerpt_seconds": (float, 0.75),
        "lr": (float, 1e-3),
        "weight_decay": (float, 1e-5),
        "lr_decay_factor": (float, 0.3),
        "plateau_patience": (int, 8),
        "early_stop_patience": (int, 14),
        "min_delta": (float, 1e-6),
        "alpha": (float, 10.0),
        "grad_clip": (float, 0.0),
        "seed": (int, 0),
    },
    "variant": {
        "name": (str, None),
        "use_mdl": (_parse_bool, False),
        "use_cl": (_parse_bool, False),
        "use_bridging": (_parse_bool, False),
    },
}


@dataclass
class RunConfig:
    values: dict  # (section, key) -> parsed value

    def __getitem__(self, section_key):
        return self.values[section_key]


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc

    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            convert = SCHEMA[section][key][0]
            try:
                values[(section, key)] = convert(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {exc}") from exc
    for section, keys in SCHEMA.items():
        for key, (_, default) in keys.items():
            values.setdefault((section, key), default)

    kind = values[("dataset", "kind")]
    if kind not in ("synth", "musdb"):
        raise ConfigError(f"bad value for dataset.kind: {kind!r} (synth or musdb)")
    if kind == "musdb" and not values[("dataset", "root")]:
        raise ConfigError("missing required key dataset.root (musdb datasets need a path)")
    name = values[("variant", "name")]
    if name is not None and name not in VARIANTS:
        raise ConfigError(
            f"bad value for variant.name: {name!r} (choose from {', '.join(VARIANTS)})")
    return RunConfig(values)


def variant_from_config(cfg: RunConfig) -> VariantConfig:
    """variant.name wins over explicit toggles when both are present."""
    name = cfg[("variant", "name")]
    if name is not None:
        return VARIANTS[name]
    return VariantConfig(
        use_mdl=cfg[("variant", "use_mdl")],
        use_cl=cfg[("variant", "use_cl")],
        use_bridging=cfg[("variant", "use_bridging")],
    )


def train_config_from(cfg: RunConfig, variant: VariantConfig | None = None,
                      seed: int | None = None) -> TrainConfig:
    t = dict(cfg.values)
    return TrainConfig(
        variant=variant if variant is not None else variant_from_config(cfg),
        alpha=t[("train", "alpha")],
        epochs=t[("train", "epochs")],
        batch_size=t[("train", "batch_size")],
        samples_per_epoch=t[("train", "samples_per_epoch")],
        valid_samples=t[("train", "valid_samples")],
        excerpt_seconds=t[("train", "excerpt_seconds")],
        lr=t[("train", "lr")],
        weight_decay=t[("train", "weight_decay")],
        plateau_patience=t[("train", "plateau_patience")],
        lr_decay_factor=t[("train", "lr_decay_factor")],
        early_stop_patience=t[("train", "early_stop_patience")],
        min_delta=t[("train", "min_delta")],
        grad_clip=t[("train", "grad_clip")],
        hidden_size=t[("model", "hidden_size")],
        num_recurrent_layers=t[("model", "recurrent_layers")],
        seed=seed if seed is not None else t[("train", "seed")],
        stft=StftConfig(
            t[("stft", "fft_size")], t[("stft", "hop_size")], t[("stft", "center")]),
    )


def load_dataset_split(cfg: RunConfig) -> DatasetSplit:
    kind = cfg[("dataset", "kind")]
    if kind == "synth":
        tracks = data.synth_dataset(
            num_tracks=cfg[("dataset", "num_tracks")],
            duration_s=cfg[("dataset", "duration_s")],
            sample_rate=cfg[("dataset", "sample_rate")],
            num_sources=cfg[("dataset", "num_sources")],
            seed=cfg[("dataset", "seed")],
        )
    else:
        root = Path(cfg[("dataset", "root")])
        if not root.is_dir():
            raise ConfigError(f"dataset.root does not exist: {root}")
        tracks = data.load_musdb_layout(root)
    return split_dataset(
        tracks,
        cfg[("dataset", "train_tracks")],
        cfg[("dataset", "valid_tracks")],
        cfg[("dataset", "test_tracks")],
    )
