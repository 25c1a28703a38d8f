"""Evaluation metrics: PSNR and windowed SSIM on images scaled to [0, 1].

These operate on plain numpy arrays and are never differentiated; the loss
side keeps its own whole-image SSIM.
"""
from __future__ import annotations

import csv
import io
import math
import os
from collections.abc import Iterable
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError

WINDOW = 11
WINDOW_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2
CSV_HEADER = ("name", "psnr_db", "ssim")


def _as_nhwc(x) -> np.ndarray:
    a = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4:
        raise ShapeError(f"expected an (N, H, W, C) or (H, W, C) image, got shape {a.shape}")
    return a


def psnr(E, G) -> float:
    """Peak signal-to-noise ratio in dB with peak 1.0; ``math.inf`` when the images match."""
    e, g = _as_nhwc(E), _as_nhwc(G)
    if e.shape != g.shape:
        raise ShapeError(f"psnr: shapes {e.shape} and {g.shape} differ")
    mse = float(np.mean((e - g) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = WINDOW, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    # x: (N, H, W, C) -> (N, H-k+1, W-k+1, C)
    views = sliding_window_view(x, win.shape, axis=(1, 2))
    return np.einsum("nhwcij,ij->nhwc", views, win)


def ssim_windowed(E, G) -> float:
    """Mean SSIM over every valid 11x11 Gaussian window, each channel scored separately."""
    e, g = _as_nhwc(E), _as_nhwc(G)
    if e.shape != g.shape:
        raise ShapeError(f"ssim: shapes {e.shape} and {g.shape} differ")
    H, W = e.shape[1:3]
    if min(H, W) < WINDOW:
        raise ShapeError(f"ssim needs images of at least {WINDOW}x{WINDOW}, got {H}x{W}")
    win = gaussian_window()
    mu_e = _filter_valid(e, win)
    mu_g = _filter_valid(g, win)
    var_e = _filter_valid(e * e, win) - mu_e * mu_e
    var_g = _filter_valid(g * g, win) - mu_g * mu_g
    cov = _filter_valid(e * g, win) - mu_e * mu_g
    num = (2.0 * (mu_e * mu_g) + C1) * (2.0 * cov + C2)
    den = (mu_e * mu_e + mu_g * mu_g + C1) * (var_e + var_g + C2)
    return float(np.mean(num / den))


@dataclass
class PairResult:
    name: str
    psnr_db: float = math.nan
    ssim: float = math.nan
    error: str | None = None


@dataclass
class MetricReport:
    per_image: list[PairResult] = field(default_factory=list)
    psnr_db: float = math.nan
    ssim: float = math.nan

    @property
    def valid(self) -> list[PairResult]:
        return [r for r in self.per_image if r.error is None]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.per_image:
            w.writerow((r.name, _fmt(r.psnr_db), _fmt(r.ssim)))
        w.writerow(("MEAN", _fmt(self.psnr_db), _fmt(self.ssim)))
        return buf.getvalue()

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def _fmt(v: float) -> str:
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf"
    return repr(float(v))


def evaluate_pairs(pairs: Iterable[tuple]) -> MetricReport:
    """Score ``(name, enhanced, reference)`` triples (or bare pairs) in the given order.

    A pair whose shapes disagree gets an error entry; means cover valid pairs only.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("evaluate_pairs needs at least one pair")
    report = MetricReport()
    for i, item in enumerate(pairs):
        if len(item) == 3:
            name, enh, ref = item
        else:
            (enh, ref), name = item, f"pair{i}"
        try:
            report.per_image.append(PairResult(name, psnr(enh, ref), ssim_windowed(enh, ref)))
        except (ShapeError, ValueError) as exc:
            report.per_image.append(PairResult(name, error=str(exc)))
    valid = report.valid
    if valid:
        report.psnr_db = float(np.mean([r.psnr_db for r in valid]))
        report.ssim = float(np.mean([r.ssim for r in valid]))
    return report
