"""PNG codec and paired low/normal-light directory ingestion."""
from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor import Tensor

logger = logging.getLogger(__name__)


class ImageFormatError(ValueError):
    """File is not an 8-bit RGB/grayscale PNG."""


class TruncatedImageError(ValueError):
    pass


class PairShapeError(ValueError):
    """Low and reference images of a pair differ in size."""


class UnmatchedFileWarning(UserWarning):
    pass


_ACCEPTED_MODES = {"L", "RGB", "P", "LA", "RGBA"}


def load_array(path: str | os.PathLike) -> np.ndarray:
    """Read a PNG into an (H, W, 3) float64 array in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise ImageFormatError(f"{path}: {im.format} files are not supported, only PNG")
            if im.mode not in _ACCEPTED_MODES:
                raise ImageFormatError(f"{path}: mode {im.mode!r} is not 8-bit RGB or grayscale")
            try:
                im.load()
            except (OSError, SyntaxError) as exc:
                raise TruncatedImageError(f"{path}: {exc}") from None
            rgb = im.convert("RGB")
    except UnidentifiedImageError:
        raise ImageFormatError(f"{path}: not a readable image") from None
    return np.asarray(rgb, dtype=np.float64) / 255.0


def load_image(path: str | os.PathLike) -> Tensor:
    """Read a PNG as a (1, H, W, 3) tensor; grayscale is replicated to three channels."""
    return Tensor(load_array(path)[None])


def quantize(arr: np.ndarray) -> np.ndarray:
    """Round [0, 1] values to bytes, halves away from zero; out-of-range values are clipped."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.size and (np.nanmin(arr) < 0.0 or np.nanmax(arr) > 1.0):
        warnings.warn("image values outside [0, 1] were clamped before saving", RuntimeWarning, stacklevel=3)
    scaled = np.clip(np.nan_to_num(arr, nan=0.0), 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def save_image(t, path: str | os.PathLike) -> None:
    arr = np.asarray(getattr(t, "data", t), dtype=np.float64)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"save_image writes one image, got a batch of {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) data, got {arr.shape}")
    Image.fromarray(quantize(arr), mode="RGB").save(Path(path), format="PNG")


@dataclass(frozen=True)
class PairDescriptor:
    name: str
    low_path: Path
    ref_path: Path
    size: tuple[int, int]  # (width, height)


@dataclass
class ImagePair:
    name: str
    low: Tensor
    ref: Tensor


def _png_names(d: Path) -> set[str]:
    return {p.name for p in d.iterdir() if p.is_file() and p.suffix.lower() == ".png"}


def scan_pairs(low_dir: str | os.PathLike, ref_dir: str | os.PathLike) -> list[PairDescriptor]:
    """Match PNGs with identical filenames in the two directories, sorted by name.

    Unmatched files and pairs whose sizes differ are reported with warnings and
    skipped. Raises ``FileNotFoundError`` if nothing matches.
    """
    low_dir, ref_dir = Path(low_dir), Path(ref_dir)
    for d in (low_dir, ref_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"{d} is not a directory")
    low, ref = _png_names(low_dir), _png_names(ref_dir)
    for name in sorted(low ^ ref):
        side = "reference" if name in low else "low-light"
        warnings.warn(f"{name}: no matching {side} image", UnmatchedFileWarning, stacklevel=2)
    pairs = []
    for name in sorted(low & ref):
        with Image.open(low_dir / name) as a, Image.open(ref_dir / name) as b:
            sa, sb = a.size, b.size
        if sa != sb:
            err = PairShapeError(f"{name}: low image is {sa[0]}x{sa[1]}, reference is {sb[0]}x{sb[1]}")
            warnings.warn(f"pair rejected: {type(err).__name__}: {err}", UnmatchedFileWarning, stacklevel=2)
            continue
        pairs.append(PairDescriptor(name, low_dir / name, ref_dir / name, sa))
    if not pairs:
        raise FileNotFoundError(f"no matching PNG pairs between {low_dir} and {ref_dir}")
    return pairs


def load_pair(desc: PairDescriptor) -> ImagePair:
    low, ref = load_image(desc.low_path), load_image(desc.ref_path)
    if low.shape != ref.shape:
        raise PairShapeError(f"{desc.name}: decoded shapes {low.shape} and {ref.shape} differ")
    return ImagePair(desc.name, low, ref)


def load_dataset(root: str | os.PathLike, low_name: str = "low", high_name: str = "high") -> list[ImagePair]:
    root = Path(root)
    return [load_pair(d) for d in scan_pairs(root / low_name, root / high_name)]
