"""Flat run configuration shared by every CLI command.

Precedence: command-line flag > ``key = value`` config file > built-in default.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .losses import LossConfig
from .network import NetworkConfig
from .training import TrainOptions


class ConfigError(ValueError):
    """Bad config file line, unknown key or unparsable value."""


def _opt(default, help: str):
    return field(default=default, metadata={"help": help})


@dataclass
class RunConfig:
    # paths
    data: str | None = _opt(None, "dataset root holding the low/high directories")
    low_dir: str = _opt("low", "name of the low-light subdirectory")
    high_dir: str = _opt("high", "name of the normal-light subdirectory")
    out: str | None = _opt(None, "output directory (train, inspect) or file/directory (enhance, eval)")
    checkpoint: str | None = _opt(None, "checkpoint to resume from (train) or run (enhance)")
    input: str | None = _opt(None, "input PNG or directory (enhance, inspect) / enhanced directory (eval)")
    reference: str | None = _opt(None, "reference directory (eval)")
    perceptual_weights: str | None = _opt(None, "archive with phi.<i>.kernel/bias feature-extractor weights")
    # run
    seed: int = _opt(0, "run seed for initialization, shuffling, crops and augmentation")
    deterministic: bool = _opt(False, "single-threaded BLAS for bitwise-reproducible runs")
    # training
    epochs: int = _opt(300, "training epochs")
    lr: float = _opt(2e-4, "initial Adam learning rate")
    batch: int = _opt(2, "images per optimizer step")
    patch: int = _opt(128, "training crop side (rounded down to a multiple of 2**levels)")
    beta1: float = _opt(0.9, "Adam first-moment decay")
    beta2: float = _opt(0.999, "Adam second-moment decay")
    adam_eps: float = _opt(1e-8, "Adam denominator epsilon")
    patience: int = _opt(10, "plateau epochs tolerated before decaying the learning rate")
    factor: float = _opt(0.2, "learning-rate decay factor on plateau")
    min_lr: float = _opt(0.0, "learning-rate floor")
    clip_grad: float = _opt(0.0, "global gradient-norm clip; 0 disables")
    max_steps: int = _opt(0, "stop after this many optimizer steps; 0 means no limit")
    val_fraction: float = _opt(0.0, "fraction of pairs held out; plateau then monitors their loss")
    augment: bool = _opt(True, "random rotation/flip augmentation")
    # network
    levels: int = _opt(3, "number of DWT stages")
    base_channels: int = _opt(16, "feature width at full resolution (doubles per level)")
    msc_depth: int = _opt(3, "stacked convolutions per MSC block")
    global_residual: bool = _opt(True, "add the input to the network output")
    attention_reduction: int = _opt(4, "sub-band attention squeeze ratio")
    # loss
    w1: float = _opt(1.0, "dark-region pixel loss weight")
    w2: float = _opt(1.5, "bright-region pixel loss weight")
    w3: float = _opt(1.0, "perceptual loss weight")
    w4: float = _opt(1.0, "SSIM reward weight")
    edge_loss: bool = _opt(True, "include the Sobel edge loss")
    channel_loss: bool = _opt(True, "include the channel-wise colour loss")
    edge_weight: float = _opt(1.0, "edge loss weight")
    channel_weight: float = _opt(1.0, "channel loss weight")
    bright_fraction: float = _opt(0.3, "share of pixels treated as the bright region")
    smooth_l1_beta: float = _opt(1.0, "Smooth-L1 quadratic/linear threshold")
    gauss_a: float = _opt(0.2, "Gaussian blur kernel peak")
    gauss_sigma_x: float = _opt(3.0, "Gaussian blur spread along rows")
    gauss_sigma_y: float = _opt(3.0, "Gaussian blur spread along columns")
    gauss_ksize: int = _opt(11, "Gaussian blur kernel side (odd)")
    ssim_c1: float = _opt(1e-4, "SSIM luminance stabilizer")
    ssim_c2: float = _opt(9e-4, "SSIM contrast stabilizer")

    def network(self) -> NetworkConfig:
        return NetworkConfig(self.levels, self.base_channels, self.msc_depth,
                             self.global_residual, self.attention_reduction)

    def loss(self) -> LossConfig:
        return LossConfig(
            w1=self.w1, w2=self.w2, w3=self.w3, w4=self.w4,
            bright_fraction=self.bright_fraction, smooth_l1_beta=self.smooth_l1_beta,
            gauss_a=self.gauss_a, gauss_sigma_x=self.gauss_sigma_x, gauss_sigma_y=self.gauss_sigma_y,
            gauss_ksize=self.gauss_ksize, ssim_c1=self.ssim_c1, ssim_c2=self.ssim_c2,
            edge_weight=self.edge_weight, channel_weight=self.channel_weight,
            use_edge=self.edge_loss, use_channel=self.channel_loss,
        )

    def train_options(self) -> TrainOptions:
        names = {f.name for f in fields(TrainOptions)}
        return TrainOptions(**{n: getattr(self, n) for n in names})


FIELDS = {f.name: f for f in fields(RunConfig)}


def field_type(name: str) -> type:
    t = FIELDS[name].type
    if isinstance(t, str):
        t = t.replace(" | None", "")
        return {"int": int, "float": float, "bool": bool, "str": str}[t]
    return t


def parse_value(name: str, raw: str) -> Any:
    t = field_type(name)
    raw = raw.strip()
    if t is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if t is str:
        return raw
    try:
        return t(raw)
    except ValueError:
        raise ConfigError(f"{name}: expected {t.__name__}, got {raw!r}") from None


def read_config_file(path: str | os.PathLike) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    values: dict[str, Any] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = parse_value(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return values


def build_config(file_values: dict[str, Any], cli_values: dict[str, Any]) -> RunConfig:
    merged = {**file_values, **{k: v for k, v in cli_values.items() if v is not None}}
    unknown = set(merged) - set(FIELDS)
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    return dataclasses.replace(RunConfig(), **merged)
