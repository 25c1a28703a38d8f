"""Command line: ``wavenhance {train,enhance,eval,inspect}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, read_tensors, write_tensors
from .config import FIELDS, ConfigError, RunConfig, build_config, field_type, read_config_file
from .dataio import load_array, load_dataset, save_image
from .losses import PerceptualExtractor
from .metrics import MetricReport, PairResult, evaluate_pairs
from .network import forward
from .tensor import Tensor, deterministic
from .training import TrainingDiverged, load_checkpoint, train
from .wavelet import BAND_NAMES, SubBands, dwt, idwt, normalize_subbands

log = logging.getLogger("wavenhance")

NETWORK_KEYS = ("levels", "base_channels", "msc_depth", "global_residual", "attention_reduction")


class UsageError(Exception):
    pass


class ConfigMismatchError(Exception):
    """Requested network settings disagree with the checkpoint."""


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    defaults = RunConfig()
    p.add_argument("--config", metavar="FILE", help="flat 'key = value' config file (flags override it)")
    group = p.add_argument_group("config keys")
    for name, f in FIELDS.items():
        flag = "--" + name.replace("_", "-")
        default = getattr(defaults, name)
        help_text = f"{f.metadata['help']} (default: {default})"
        t = field_type(name)
        if t is bool:
            group.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None, help=help_text)
        else:
            group.add_argument(flag, dest=name, type=t, default=None, metavar=t.__name__.upper(), help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wavenhance", description="Wavelet U-Net low-light image enhancement.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("train", "train a model on a <data>/low, <data>/high PNG dataset"),
        ("enhance", "enhance one PNG or every PNG in a directory"),
        ("eval", "PSNR/SSIM of enhanced images against references; writes a CSV report"),
        ("inspect", "write the four Haar sub-bands of an image as PNGs"),
    ]:
        p = sub.add_parser(name, help=helptext, description=helptext)
        if name == "inspect":
            p.add_argument("--roundtrip", action="store_true",
                           help="also write raw sub-band data and verify the inverse transform reproduces the input")
        _add_config_flags(p)
    return parser


def resolve_config(args: argparse.Namespace) -> tuple[RunConfig, set[str]]:
    """Merge flags over the config file over defaults; also return the keys set on the command line."""
    cli = {k: getattr(args, k) for k in FIELDS if getattr(args, k, None) is not None}
    file_values = read_config_file(args.config) if args.config else {}
    try:
        cfg = build_config(file_values, cli)
        cfg.network()
        cfg.loss()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg, set(cli) | set(file_values)


def _require(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if getattr(cfg, n) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


# -- commands ------------------------------------------------------------

def cmd_train(cfg: RunConfig, explicit: set[str]) -> int:
    _require(cfg, "data", "out")
    out = Path(cfg.out)
    pairs = load_dataset(cfg.data, cfg.low_dir, cfg.high_dir)
    log.info("loaded %d pairs from %s", len(pairs), cfg.data)
    resume = None
    net = cfg.network()
    if cfg.checkpoint:
        resume = load_checkpoint(cfg.checkpoint)
        _check_network(resume.net, cfg, explicit)
        net = resume.net
    ext = PerceptualExtractor.from_file(cfg.perceptual_weights) if cfg.perceptual_weights else PerceptualExtractor()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(
        "".join(f"{k} = {'' if v is None else v}\n" for k, v in dataclasses.asdict(cfg).items() if v is not None)
    )
    try:
        result = train(pairs, net, cfg.loss(), cfg.train_options(), out_dir=out, resume=resume, extractor=ext)
    except TrainingDiverged as exc:
        log.error("training aborted: %s", exc)
        return 1
    last = result.history[-1] if result.history else None
    if last:
        print(f"epoch {result.checkpoint.epoch} step {int(last['step'])} total loss {last['total']:.6g}")
    print(f"wrote {out / 'last.ckpt'} and {out / 'loss.csv'}")
    return 0


def _check_network(net, cfg: RunConfig, explicit: set[str]) -> None:
    for key in NETWORK_KEYS:
        if key in explicit and getattr(net, key) != getattr(cfg, key):
            raise ConfigMismatchError(
                f"checkpoint has {key}={getattr(net, key)} but {key}={getattr(cfg, key)} was requested"
            )


def enhance_array(img: np.ndarray, params, net) -> np.ndarray:
    """Reflect-pad (H, W, 3) data to a multiple of 2**levels, run the network, crop back."""
    H, W = img.shape[:2]
    m = net.multiple
    ph, pw = (-H) % m, (-W) % m
    padded = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect") if (ph or pw) else img
    out = forward(Tensor(padded[None]), params, net).data[0]
    return out[:H, :W]


def cmd_enhance(cfg: RunConfig, explicit: set[str]) -> int:
    _require(cfg, "checkpoint", "input", "out")
    ck = load_checkpoint(cfg.checkpoint)
    _check_network(ck.net, cfg, explicit)
    params = {k: Tensor(v.data) for k, v in ck.params.items()}
    src, dst = Path(cfg.input), Path(cfg.out)
    if src.is_dir():
        jobs = [(p, dst / p.name) for p in sorted(src.iterdir()) if p.suffix.lower() == ".png"]
        if not jobs:
            raise UsageError(f"no PNG files in {src}")
        dst.mkdir(parents=True, exist_ok=True)
    else:
        target = dst / src.name if dst.is_dir() else dst
        jobs = [(src, target)]
    for s, d in jobs:
        save_image(enhance_array(load_array(s), params, ck.net)[None], d)
        print(f"{s} -> {d}")
    return 0


def cmd_eval(cfg: RunConfig, explicit: set[str]) -> int:
    _require(cfg, "input", "reference")
    enh_dir, ref_dir = Path(cfg.input), Path(cfg.reference)
    for d in (enh_dir, ref_dir):
        if not d.is_dir():
            raise UsageError(f"{d} is not a directory")
    names = sorted({p.name for p in enh_dir.glob("*.png")} | {p.name for p in ref_dir.glob("*.png")})
    if not names:
        raise UsageError("no PNG files to evaluate")
    rows: list[PairResult] = []
    for name in names:
        e, r = enh_dir / name, ref_dir / name
        if not e.exists() or not r.exists():
            rows.append(PairResult(name, error=f"missing {'enhanced' if not e.exists() else 'reference'} image"))
            continue
        try:
            rows.append(evaluate_pairs([(name, load_array(e), load_array(r))]).per_image[0])
        except ValueError as exc:
            rows.append(PairResult(name, error=str(exc)))
    report = MetricReport(rows)
    valid = report.valid
    if valid:
        report.psnr_db = float(np.mean([r.psnr_db for r in valid]))
        report.ssim = float(np.mean([r.ssim for r in valid]))
    for r in rows:
        if r.error:
            print(f"{r.name}: error: {r.error}", file=sys.stderr)
    if cfg.out:
        report.write_csv(cfg.out)
    else:
        sys.stdout.write(report.to_csv())
    print(f"mean PSNR {report.psnr_db:.4f} dB  mean SSIM {report.ssim:.4f}  ({len(valid)}/{len(rows)} pairs)")
    return 0 if valid else 1


def cmd_inspect(cfg: RunConfig, explicit: set[str], roundtrip: bool = False) -> int:
    _require(cfg, "input", "out")
    src, out = Path(cfg.input), Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    img = load_array(src)
    H, W = img.shape[:2]
    if H % 2 or W % 2:
        img = np.pad(img, ((0, H % 2), (0, W % 2), (0, 0)), mode="reflect")
    x = Tensor(img[None])
    bands = dwt(x)
    for name, band in zip(BAND_NAMES, normalize_subbands(bands)):
        save_image(band.data, out / f"{src.stem}.{name}.png")
    print(f"wrote {', '.join(f'{src.stem}.{n}.png' for n in BAND_NAMES)} to {out}")
    if roundtrip:
        raw_path = out / f"{src.stem}.bands.r2mw"
        write_tensors(raw_path, {name: b.data for name, b in zip(BAND_NAMES, bands)})
        raw = read_tensors(raw_path)
        rec = idwt(SubBands(*(Tensor(raw[n]) for n in BAND_NAMES))).data
        err = float(np.max(np.abs(rec - x.data)))
        # rounding can leave values a few ulps outside [0, 1]
        save_image(np.clip(rec[:, :H, :W], 0.0, 1.0), out / f"{src.stem}.roundtrip.png")
        print(f"roundtrip max abs error {err:.3e}")
        if err > 1e-10:
            return 1
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg, explicit = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        with deterministic(cfg.deterministic), warnings.catch_warnings():
            warnings.simplefilter("default")
            if args.command == "train":
                return cmd_train(cfg, explicit)
            if args.command == "enhance":
                return cmd_enhance(cfg, explicit)
            if args.command == "eval":
                return cmd_eval(cfg, explicit)
            return cmd_inspect(cfg, explicit, roundtrip=args.roundtrip)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except ConfigMismatchError as exc:
        print(f"ConfigMismatchError: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, OSError, ValueError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
