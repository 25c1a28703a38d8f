"""Composite training objective: pixel, global (perceptual + SSIM), edge and channel terms."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    absolute,
    channel_sum,
    conv2d,
    depthwise_conv2d,
    leaky_relu,
    pad,
    smooth_l1 as smooth_l1_map,
    square,
)

LUMA = np.array([0.299, 0.587, 0.114])
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


@dataclass(frozen=True)
class LossConfig:
    w1: float = 1.0
    w2: float = 1.5
    w3: float = 1.0
    w4: float = 1.0
    bright_fraction: float = 0.3
    smooth_l1_beta: float = 1.0
    gauss_a: float = 0.2
    gauss_sigma_x: float = 3.0
    gauss_sigma_y: float = 3.0
    gauss_ksize: int = 11
    ssim_c1: float = 1e-4
    ssim_c2: float = 9e-4
    edge_weight: float = 1.0
    channel_weight: float = 1.0
    use_edge: bool = True
    use_channel: bool = True

    def __post_init__(self):
        for name in ("w1", "w2", "w3", "w4", "edge_weight", "channel_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 < self.bright_fraction < 1.0:
            raise ValueError("bright_fraction must lie in (0, 1)")
        if self.gauss_ksize < 1 or self.gauss_ksize % 2 == 0:
            raise ValueError("gauss_ksize must be a positive odd integer")
        if self.ssim_c1 <= 0 or self.ssim_c2 <= 0:
            raise ValueError("SSIM constants must be positive")
        if self.smooth_l1_beta <= 0:
            raise ValueError("smooth_l1_beta must be positive")


def smooth_l1(d: float, beta: float = 1.0) -> float:
    if beta <= 0:
        raise ValueError("beta must be positive")
    a = abs(d)
    return 0.5 * d * d / beta if a < beta else a - 0.5 * beta


# -- pixel term ----------------------------------------------------------

@dataclass(frozen=True)
class RegionSplit:
    bright_mask: np.ndarray  # (N, H, W) bool
    bright_count: int
    dark_count: int


def region_split(G: np.ndarray, bright_fraction: float = 0.3) -> RegionSplit:
    """Mark the brightest ``round(bright_fraction * H * W)`` pixels of each reference image.

    Pixels are ranked by luminance, ties broken by flat pixel index. A
    reference with constant luminance has no bright region.
    """
    G = np.asarray(G, dtype=np.float64)
    N, H, W, _ = G.shape
    lum = (G @ LUMA).reshape(N, H * W)
    k = int(round(bright_fraction * H * W))
    mask = np.zeros((N, H * W), dtype=bool)
    for n in range(N):
        if lum[n].max() == lum[n].min():
            continue
        order = np.argsort(-lum[n], kind="stable")
        mask[n, order[:k]] = True
    bright = int(mask.sum())
    return RegionSplit(mask.reshape(N, H, W), bright, N * H * W - bright)


def pixel_loss(E: Tensor, G: Tensor, cfg: LossConfig) -> Tensor:
    _same_shape(E, G)
    split = region_split(G.data, cfg.bright_fraction)
    C = E.shape[-1]
    per_px = smooth_l1_map(E - G.detach(), cfg.smooth_l1_beta)
    bright = split.bright_mask[..., None].astype(np.float64)
    loss = Tensor(0.0)
    if split.dark_count:
        loss = loss + cfg.w1 * (per_px * (1.0 - bright)).sum() / (split.dark_count * C)
    if split.bright_count:
        loss = loss + cfg.w2 * (per_px * bright).sum() / (split.bright_count * C)
    return loss


# -- global term ---------------------------------------------------------

class PerceptualExtractor:
    """Frozen conv stack standing in for a pretrained feature network.

    Default: three 3x3 stride-2 convs (3->8->16->32) with leaky ReLU, weights
    drawn from ``seed``. ``tap`` selects how many layers to run.
    """

    def __init__(self, channels=(8, 16, 32), seed: int = 0, tap: int | None = None, alpha: float = 0.2):
        rng = np.random.default_rng(seed)
        weights = []
        cin = 3
        for cout in channels:
            bound = np.sqrt(6.0 / (9 * cin))
            weights.append((rng.uniform(-bound, bound, size=(3, 3, cin, cout)), np.zeros(cout)))
            cin = cout
        self._set(weights, tap, alpha)

    def _set(self, weights, tap, alpha):
        self._layers = tuple((Tensor(k), Tensor(b)) for k, b in weights)
        for k, b in self._layers:
            k.data.flags.writeable = False
            b.data.flags.writeable = False
        self.tap = len(self._layers) if tap is None else int(tap)
        if not 1 <= self.tap <= len(self._layers):
            raise ValueError(f"tap must lie in [1, {len(self._layers)}]")
        self.alpha = alpha

    @classmethod
    def from_file(cls, path: str | Path, tap: int | None = None, alpha: float = 0.2) -> PerceptualExtractor:
        """Load weights stored as ``phi.<i>.kernel`` / ``phi.<i>.bias`` in the checkpoint format."""
        from .checkpoint import read_tensors

        tensors = read_tensors(path)
        weights = []
        i = 0
        while f"phi.{i}.kernel" in tensors:
            weights.append((tensors[f"phi.{i}.kernel"].copy(), tensors[f"phi.{i}.bias"].copy()))
            i += 1
        if not weights:
            raise ValueError(f"{path}: no phi.<i>.kernel tensors found")
        obj = cls.__new__(cls)
        obj._set(weights, tap, alpha)
        return obj

    def named_weights(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (k, b) in enumerate(self._layers):
            out[f"phi.{i}.kernel"] = k.data
            out[f"phi.{i}.bias"] = b.data
        return out

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for k, b in self._layers[: self.tap]:
            h = leaky_relu(conv2d(h, k, b, stride=2, padding="same"), self.alpha)
        return h


def ssim_global(E: Tensor, G: Tensor, c1: float = 1e-4, c2: float = 9e-4) -> Tensor:
    """SSIM from whole-image moments, averaged over the batch."""
    _same_shape(E, G)
    axes = (1, 2, 3)
    mu_e = E.mean(axis=axes, keepdims=True)
    mu_g = G.mean(axis=axes, keepdims=True)
    de = E - mu_e
    dg = G - mu_g
    var_e = (de * de).mean(axis=axes, keepdims=True)
    var_g = (dg * dg).mean(axis=axes, keepdims=True)
    cov = (de * dg).mean(axis=axes, keepdims=True)
    num = (2.0 * (mu_e * mu_g) + c1) * (2.0 * cov + c2)
    den = (mu_e * mu_e + mu_g * mu_g + c1) * (var_e + var_g + c2)
    return (num / den).mean()


def perceptual_term(E: Tensor, G: Tensor, ext: PerceptualExtractor) -> Tensor:
    fe = ext(E)
    fg = ext(G.detach())
    N, h, w, c = fe.shape
    return square(fe - fg).sum() / (N * c * h * w)


def global_loss(E: Tensor, G: Tensor, ext: PerceptualExtractor, cfg: LossConfig) -> Tensor:
    _same_shape(E, G)
    return cfg.w3 * perceptual_term(E, G, ext) - cfg.w4 * ssim_global(E, G.detach(), cfg.ssim_c1, cfg.ssim_c2)


# -- edge term -----------------------------------------------------------

def edge_loss(E: Tensor, G: Tensor) -> Tensor:
    """Mean absolute difference of per-channel Sobel responses in x and y."""
    _same_shape(E, G)
    G = G.detach()
    total = Tensor(0.0)
    for k in (SOBEL_X, SOBEL_Y):
        total = total + absolute(depthwise_conv2d(E, k) - depthwise_conv2d(G, k)).mean()
    return total


# -- channel term --------------------------------------------------------

def gaussian_kernel(cfg: LossConfig) -> np.ndarray:
    """Unnormalized Gaussian with peak ``gauss_a`` at the kernel center.

    The exponent divides by 2*sigma (not 2*sigma**2), as in the loss definition.
    """
    k = cfg.gauss_ksize
    mu = (k - 1) / 2.0
    r = np.arange(k, dtype=np.float64) - mu
    return cfg.gauss_a * np.exp(-(r[:, None] ** 2) / (2.0 * cfg.gauss_sigma_x) - (r[None, :] ** 2) / (2.0 * cfg.gauss_sigma_y))


def gaussian_blur(x: Tensor, kernel: np.ndarray) -> Tensor:
    """Same-size per-channel blur with reflect padding."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    return depthwise_conv2d(pad(x, ph, ph, pw, pw, mode="reflect"), kernel, padding="valid")


def channel_loss(E: Tensor, G: Tensor, cfg: LossConfig) -> Tensor:
    """Sum over colour channels of |total blurred E - total blurred G|, averaged over the batch."""
    _same_shape(E, G)
    if E.shape[-1] != 3:
        raise ShapeError(f"channel_loss expects 3 channels, got {E.shape[-1]}")
    kern = gaussian_kernel(cfg)
    se = channel_sum(gaussian_blur(E, kern))
    sg = channel_sum(gaussian_blur(G.detach(), kern))
    return absolute(se - sg).sum() / E.shape[0]


# -- total ---------------------------------------------------------------

@dataclass
class LossBreakdown:
    total: Tensor
    components: dict[str, float] = field(default_factory=dict)


def total_loss(E: Tensor, G: Tensor, ext: PerceptualExtractor, cfg: LossConfig) -> LossBreakdown:
    """Sum of the four terms; disabled terms are reported as 0.0."""
    parts = {
        "pixel": pixel_loss(E, G, cfg),
        "global": global_loss(E, G, ext, cfg),
    }
    parts["edge"] = cfg.edge_weight * edge_loss(E, G) if cfg.use_edge else None
    parts["channel"] = cfg.channel_weight * channel_loss(E, G, cfg) if cfg.use_channel else None
    total = Tensor(0.0)
    for t in parts.values():
        if t is not None:
            total = total + t
    comps = {name: (0.0 if t is None else t.item()) for name, t in parts.items()}
    comps["total"] = total.item()
    return LossBreakdown(total, comps)


def _same_shape(E: Tensor, G: Tensor) -> None:
    if E.shape != G.shape:
        raise ShapeError(f"enhanced {E.shape} and reference {G.shape} differ in shape")
