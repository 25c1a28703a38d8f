"""Haar DWT/IDWT layers used in place of pooling and up-sampling.

Each sub-band is a stride-2 application of a 2x2 filter scaled by 1/2, so the
four filters form an orthonormal basis of every 2x2 block and the inverse is
the transpose.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    concat,
    conv2d,
    leaky_relu,
    record,
    reshape,
    scale,
    sigmoid,
    take_channels,
)

BAND_NAMES = ("ll", "lh", "hl", "hh")

FILTERS: dict[str, np.ndarray] = {
    "ll": np.array([[1.0, 1.0], [1.0, 1.0]]),
    "lh": np.array([[-1.0, -1.0], [1.0, 1.0]]),
    "hl": np.array([[-1.0, 1.0], [-1.0, 1.0]]),
    "hh": np.array([[1.0, -1.0], [-1.0, 1.0]]),
}

# A commonly misprinted HH variant. It equals -HL, so a bank built with it
# cannot be inverted; kept only to demonstrate that.
PRINTED_HH = np.array([[1.0, -1.0], [1.0, -1.0]])


def analysis_matrix(filters: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """4x4 matrix mapping a flattened 2x2 block to its four sub-band coefficients."""
    filters = FILTERS if filters is None else filters
    return 0.5 * np.stack([filters[b].reshape(-1) for b in BAND_NAMES])


@dataclass(frozen=True)
class SubBands:
    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor

    def __post_init__(self):
        shapes = {b.shape for b in self}
        if len(shapes) != 1:
            raise ShapeError(f"sub-bands disagree in shape: {sorted(shapes)}")

    def __iter__(self) -> Iterator[Tensor]:
        return iter((self.ll, self.lh, self.hl, self.hh))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.ll.shape


def _band(x: Tensor, name: str, filt: np.ndarray) -> Tensor:
    d = x.data
    out = 0.5 * (filt[0, 0] * d[:, 0::2, 0::2] + filt[0, 1] * d[:, 0::2, 1::2]
                 + filt[1, 0] * d[:, 1::2, 0::2] + filt[1, 1] * d[:, 1::2, 1::2])

    def backward(g):
        gx = np.empty(x.shape)
        gx[:, 0::2, 0::2] = 0.5 * filt[0, 0] * g
        gx[:, 0::2, 1::2] = 0.5 * filt[0, 1] * g
        gx[:, 1::2, 0::2] = 0.5 * filt[1, 0] * g
        gx[:, 1::2, 1::2] = 0.5 * filt[1, 1] * g
        return (gx,)

    return record(f"dwt_{name}", out, (x,), backward)


def dwt(x: Tensor) -> SubBands:
    """Split an NHWC tensor into LL, LH, HL, HH sub-bands at half resolution."""
    if x.ndim != 4:
        raise ShapeError(f"dwt expects NHWC, got shape {x.shape}")
    H, W = x.shape[1:3]
    if H % 2 or W % 2:
        raise ShapeError(f"dwt needs even height and width, got {H}x{W}; pad the input first")
    return SubBands(*(_band(x, name, FILTERS[name]) for name in BAND_NAMES))


def idwt(b: SubBands) -> Tensor:
    """Reassemble the full-resolution tensor from its four sub-bands."""
    bands = tuple(b)
    shapes = {t.shape for t in bands}
    if len(shapes) != 1:
        raise ShapeError(f"idwt: sub-band shapes differ: {sorted(shapes)}")
    N, h, w, C = bands[0].shape
    filts = [FILTERS[n] for n in BAND_NAMES]
    out = np.empty((N, 2 * h, 2 * w, C))
    for i in range(2):
        for j in range(2):
            out[:, i::2, j::2] = 0.5 * sum(f[i, j] * t.data for f, t in zip(filts, bands))

    def backward(g):
        blocks = [[g[:, i::2, j::2] for j in range(2)] for i in range(2)]
        return tuple(
            0.5 * (f[0, 0] * blocks[0][0] + f[0, 1] * blocks[0][1]
                   + f[1, 0] * blocks[1][0] + f[1, 1] * blocks[1][1])
            for f in filts
        )

    return record("idwt", out, bands, backward)


def normalize_subbands(b: SubBands, vmax: float = 1.0) -> SubBands:
    """Map the theoretical sub-band ranges of [0, vmax] features onto [0, 1].

    LL spans [0, 2*vmax]; detail bands span [-vmax, vmax].
    """
    s = 1.0 / (2.0 * vmax)
    return SubBands(
        scale(b.ll, s),
        scale(b.lh, s) + 0.5,
        scale(b.hl, s) + 0.5,
        scale(b.hh, s) + 0.5,
    )


def denormalize_subbands(b: SubBands, vmax: float = 1.0) -> SubBands:
    s = 2.0 * vmax
    return SubBands(
        scale(b.ll, s),
        scale(b.lh, s) - vmax,
        scale(b.hl, s) - vmax,
        scale(b.hh, s) - vmax,
    )


@dataclass(frozen=True)
class SubBandAttention:
    """Squeeze-and-excitation weights, one (squeeze, excite) pair per sub-band.

    squeeze[k] has shape (C, C // r); excite[k] has shape (C // r, C).
    """

    squeeze: tuple[Tensor, Tensor, Tensor, Tensor]
    excite: tuple[Tensor, Tensor, Tensor, Tensor]
    alpha: float = 0.2

    @property
    def channels(self) -> int:
        return self.squeeze[0].shape[0]


def band_scales(band: Tensor, squeeze: Tensor, excite: Tensor, alpha: float = 0.2) -> Tensor:
    """Per-channel scale in (0, 1) for one sub-band, shape (N, 1, 1, C)."""
    C, hidden = squeeze.shape
    pooled = band.mean(axis=(1, 2), keepdims=True)
    z = leaky_relu(conv2d(pooled, reshape(squeeze, (1, 1, C, hidden))), alpha)
    return sigmoid(conv2d(z, reshape(excite, (1, 1, hidden, C))))


def attend_subbands(b: SubBands, a: SubBandAttention) -> Tensor:
    """Rescale each sub-band channel-wise and stack them as LL|LH|HL|HH channels."""
    C = b.shape[-1]
    if a.channels != C:
        raise ShapeError(f"attention built for {a.channels} channels, sub-bands have {C}")
    for sq, ex in zip(a.squeeze, a.excite):
        if sq.shape[0] != C or ex.shape != (sq.shape[1], C):
            raise ShapeError(f"attention weight shapes {sq.shape}/{ex.shape} do not fit {C} channels")
    scaled = [band * band_scales(band, sq, ex, a.alpha) for band, sq, ex in zip(b, a.squeeze, a.excite)]
    return concat(scaled, axis=-1)


def split_bands(x: Tensor) -> SubBands:
    """Inverse of channel concatenation: (N, h, w, 4C) -> SubBands of C channels."""
    C4 = x.shape[-1]
    if C4 % 4:
        raise ShapeError(f"channel count {C4} is not a multiple of 4")
    C = C4 // 4
    return SubBands(*(take_channels(x, k * C, (k + 1) * C) for k in range(4)))
