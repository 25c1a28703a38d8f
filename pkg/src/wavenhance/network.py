"""MSC blocks and the wavelet U-Net assembly.

Parameters live in a flat, ordered ``dict[str, Tensor]``. Names follow
``<stage><level>.<layer>.<kernel|bias>``; iteration order is fixed by
:func:`init_params` so checkpoints and optimizer state line up.
"""
from __future__ import annotations

from collections.abc import Collection, Mapping
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    clamp,
    concat,
    conv2d,
    leaky_relu,
    sigmoid,
)
from .wavelet import (
    BAND_NAMES,
    SubBandAttention,
    attend_subbands,
    denormalize_subbands,
    dwt,
    idwt,
    normalize_subbands,
    split_bands,
)

ModelParams = dict[str, Tensor]


@dataclass(frozen=True)
class NetworkConfig:
    levels: int = 3
    base_channels: int = 16
    msc_depth: int = 3
    global_residual: bool = True
    attention_reduction: int = 4
    alpha: float = 0.2

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.msc_depth < 1:
            raise ValueError("msc_depth must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.base_channels % self.attention_reduction:
            raise ValueError(
                f"attention_reduction {self.attention_reduction} must divide base_channels {self.base_channels}"
            )

    def width(self, level: int) -> int:
        return self.base_channels * 2 ** level

    @property
    def multiple(self) -> int:
        return 2 ** self.levels


@dataclass(frozen=True)
class ConvParams:
    kernel: Tensor
    bias: Tensor

    def __call__(self, x: Tensor, stride: int = 1) -> Tensor:
        return conv2d(x, self.kernel, self.bias, stride=stride, padding="same")


@dataclass(frozen=True)
class MscBlock:
    f_map: ConvParams
    f_0: ConvParams
    f_layers: tuple[ConvParams, ...]
    alpha: float = 0.2

    def __post_init__(self):
        if not self.f_layers:
            raise ValueError("an MSC block needs at least one stacked conv")
        cout = self.f_0.kernel.shape[3]
        for layer in self.f_layers:
            if layer.kernel.shape[2:] != (cout, cout):
                raise ShapeError(f"stacked conv {layer.kernel.shape} does not match projection width {cout}")


def msc_forward(x: Tensor, blk: MscBlock) -> Tensor:
    """Contrast-aware gating followed by stacked convs that re-inject the projected input.

    gate = sigmoid(f_map(x)); p = f_0(gate * x); x_1 = p;
    x_{l+1} = act(f_l(x_l + p)).
    """
    cin = blk.f_map.kernel.shape[2]
    if x.shape[-1] != cin:
        raise ShapeError(f"MSC block expects {cin} channels, got {x.shape[-1]}")
    gate = sigmoid(blk.f_map(x))
    proj = blk.f_0(gate * x)
    h = proj
    for layer in blk.f_layers:
        h = leaky_relu(layer(h + proj), blk.alpha)
    return h


# -- parameter construction ----------------------------------------------

def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _conv_shapes(name: str, k: int, cin: int, cout: int) -> list[tuple[str, tuple[int, ...], int]]:
    return [(f"{name}.kernel", (k, k, cin, cout), k * k * cin), (f"{name}.bias", (cout,), 0)]


def _msc_shapes(prefix: str, cin: int, cout: int, depth: int):
    shapes = _conv_shapes(f"{prefix}.map", 3, cin, cin)
    shapes += _conv_shapes(f"{prefix}.proj", 1, cin, cout)
    for l in range(depth):
        shapes += _conv_shapes(f"{prefix}.conv{l}", 3, cout, cout)
    return shapes


def param_shapes(cfg: NetworkConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """Ordered (name, shape, fan_in) for every learnable tensor; fan_in 0 marks a bias."""
    shapes = []
    for lvl in range(cfg.levels):
        c = cfg.width(lvl)
        cin = 3 if lvl == 0 else c
        shapes += _msc_shapes(f"enc{lvl}.msc", cin, c, cfg.msc_depth)
        hidden = c // cfg.attention_reduction
        for band in BAND_NAMES:
            shapes.append((f"enc{lvl}.att.{band}.squeeze", (c, hidden), c))
            shapes.append((f"enc{lvl}.att.{band}.excite", (hidden, c), hidden))
        shapes += _conv_shapes(f"enc{lvl}.down", 1, 4 * c, cfg.width(lvl + 1))
    shapes += _msc_shapes("mid.msc", cfg.width(cfg.levels), cfg.width(cfg.levels), cfg.msc_depth)
    for lvl in reversed(range(cfg.levels)):
        c = cfg.width(lvl)
        shapes += _conv_shapes(f"dec{lvl}.up", 1, cfg.width(lvl + 1), 4 * c)
        shapes += _msc_shapes(f"dec{lvl}.msc", 2 * c, c, cfg.msc_depth)
    shapes += _conv_shapes("out", 3, cfg.width(0), 3)
    return shapes


def init_params(cfg: NetworkConfig, seed: int = 0, zero_output: bool = True) -> ModelParams:
    """He-uniform kernels in +-sqrt(6/fan_in), zero biases, drawn in a fixed order.

    With ``zero_output`` and a global residual, the final conv starts at zero so
    the untrained network is the identity map and the output clamp starts unsaturated.
    """
    rng = np.random.default_rng(seed)
    params: ModelParams = {}
    for name, shape, fan_in in param_shapes(cfg):
        data = np.zeros(shape) if fan_in == 0 else _he_uniform(rng, shape, fan_in)
        if zero_output and cfg.global_residual and name == "out.kernel":
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def count_params(params: Mapping[str, Tensor]) -> int:
    return int(sum(t.size for t in params.values()))


def _conv(params: Mapping[str, Tensor], name: str) -> ConvParams:
    return ConvParams(params[f"{name}.kernel"], params[f"{name}.bias"])


def msc_block(params: Mapping[str, Tensor], prefix: str, cfg: NetworkConfig) -> MscBlock:
    return MscBlock(
        f_map=_conv(params, f"{prefix}.map"),
        f_0=_conv(params, f"{prefix}.proj"),
        f_layers=tuple(_conv(params, f"{prefix}.conv{l}") for l in range(cfg.msc_depth)),
        alpha=cfg.alpha,
    )


def attention(params: Mapping[str, Tensor], prefix: str, cfg: NetworkConfig) -> SubBandAttention:
    return SubBandAttention(
        squeeze=tuple(params[f"{prefix}.{b}.squeeze"] for b in BAND_NAMES),
        excite=tuple(params[f"{prefix}.{b}.excite"] for b in BAND_NAMES),
        alpha=cfg.alpha,
    )


def check_params(params: Mapping[str, Tensor], cfg: NetworkConfig) -> None:
    expected = {name: shape for name, shape, _ in param_shapes(cfg)}
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ShapeError(f"parameters do not match config: missing={missing[:5]} unexpected={extra[:5]}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeError(f"{name}: shape {params[name].shape} != expected {shape}")


def forward(x: Tensor, params: Mapping[str, Tensor], cfg: NetworkConfig,
            drop_skips: Collection[int] = ()) -> Tensor:
    """Enhance a batch of NHWC images in [0, 1].

    ``drop_skips`` zeroes the contracting-path skip at the given levels; it is a
    diagnostic used to confirm the skips carry signal.
    """
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ShapeError(f"expected an (N, H, W, 3) batch, got {x.shape}")
    H, W = x.shape[1:3]
    m = cfg.multiple
    if H % m or W % m:
        raise ShapeError(
            f"input {H}x{W} is not divisible by {m} (2**levels); pad the image to a multiple of {m}"
        )

    skips = []
    h = x
    for lvl in range(cfg.levels):
        h = msc_forward(h, msc_block(params, f"enc{lvl}.msc", cfg))
        skips.append(h)
        bands = normalize_subbands(dwt(h))
        h = attend_subbands(bands, attention(params, f"enc{lvl}.att", cfg))
        h = leaky_relu(_conv(params, f"enc{lvl}.down")(h), cfg.alpha)

    h = msc_forward(h, msc_block(params, "mid.msc", cfg))

    for lvl in reversed(range(cfg.levels)):
        h = leaky_relu(_conv(params, f"dec{lvl}.up")(h), cfg.alpha)
        h = idwt(denormalize_subbands(split_bands(h)))
        skip = skips[lvl]
        if lvl in drop_skips:
            skip = Tensor(np.zeros(skip.shape))
        h = concat([h, skip], axis=-1)
        h = msc_forward(h, msc_block(params, f"dec{lvl}.msc", cfg))

    residual = _conv(params, "out")(h)
    out = x + residual if cfg.global_residual else residual
    return clamp(out, 0.0, 1.0)
