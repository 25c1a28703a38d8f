"""Adam, plateau learning-rate decay, augmentation, checkpoints and the training loop."""
from __future__ import annotations

import csv
import logging
import math
import os
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import read_tensors, write_tensors
from .losses import LossConfig, PerceptualExtractor, total_loss
from .network import ModelParams, NetworkConfig, check_params, forward, init_params
from .tensor import Tensor, deterministic as deterministic_mode

logger = logging.getLogger(__name__)

HISTORY_HEADER = ("epoch", "step", "total", "pixel", "global", "edge", "channel", "lr")


class TrainingDiverged(RuntimeError):
    """Loss became NaN or infinite; the last good checkpoint is left in place."""


# -- optimizer -----------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None], st: AdamState) -> None:
    """One bias-corrected Adam update, in place."""
    for name in params:
        if grads.get(name) is None:
            raise KeyError(f"no gradient for parameter {name!r}")
    st.t += 1
    c1 = 1.0 - st.beta1 ** st.t
    c2 = 1.0 - st.beta2 ** st.t
    for name, p in params.items():
        g = grads[name]
        m = st.m.get(name)
        if m is None:
            m = st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        v = st.v[name]
        m *= st.beta1
        m += (1.0 - st.beta1) * g
        v *= st.beta2
        v += (1.0 - st.beta2) * (g * g)
        p.data -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)


# -- schedule ------------------------------------------------------------

@dataclass
class PlateauSchedule:
    lr: float = 2e-4
    patience: int = 10
    factor: float = 0.2
    min_lr: float = 0.0
    best: float = math.inf
    wait: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ValueError("factor must lie in (0, 1)")


def schedule_update(s: PlateauSchedule, epoch_loss: float) -> float:
    """Record one epoch's monitored loss and return the (possibly reduced) learning rate.

    The rate drops once more than ``patience`` consecutive epochs fail to
    strictly improve on the best loss seen.
    """
    if not math.isfinite(epoch_loss):
        raise TrainingDiverged(f"monitored loss is {epoch_loss}")
    if epoch_loss < s.best:
        s.best = epoch_loss
        s.wait = 0
    else:
        s.wait += 1
        if s.wait > s.patience:
            s.lr = max(s.lr * s.factor, s.min_lr)
            s.wait = 0
    return s.lr


# -- augmentation --------------------------------------------------------

def dihedral(x: np.ndarray, k: int) -> np.ndarray:
    """Element ``k`` (0..7) of the square's symmetry group on the H, W axes of NHWC data.

    k % 4 quarter-turns, preceded by a horizontal flip when k >= 4.
    """
    if k >= 4:
        x = x[:, :, ::-1]
    return np.ascontiguousarray(np.rot90(x, k % 4, axes=(1, 2)))


def dihedral_inverse(x: np.ndarray, k: int) -> np.ndarray:
    x = np.rot90(x, -(k % 4), axes=(1, 2))
    if k >= 4:
        x = x[:, :, ::-1]
    return np.ascontiguousarray(x)


def augment(low, ref, rng: np.random.Generator) -> tuple[Tensor, Tensor, int]:
    """Apply one uniformly chosen rotation/flip identically to both images.

    Returns the transformed pair and the transform index.
    """
    lo = np.asarray(getattr(low, "data", low))
    re = np.asarray(getattr(ref, "data", ref))
    if lo.shape != re.shape:
        raise ValueError(f"augment: shapes {lo.shape} and {re.shape} differ")
    k = int(rng.integers(8))
    return Tensor(dihedral(lo, k)), Tensor(dihedral(re, k)), k


def random_crop(low: np.ndarray, ref: np.ndarray, patch: int, multiple: int,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Aligned crop of side ``patch`` (shrunk to the image, rounded down to ``multiple``)."""
    H, W = low.shape[1:3]
    ph = min(patch, H) // multiple * multiple
    pw = min(patch, W) // multiple * multiple
    if ph == 0 or pw == 0:
        raise ValueError(f"image {H}x{W} is smaller than one {multiple}x{multiple} block")
    top = int(rng.integers(H - ph + 1))
    left = int(rng.integers(W - pw + 1))
    sl = (slice(None), slice(top, top + ph), slice(left, left + pw))
    return low[sl], ref[sl]


# -- checkpoints ---------------------------------------------------------

@dataclass
class Checkpoint:
    params: ModelParams
    net: NetworkConfig
    adam: AdamState
    schedule: PlateauSchedule
    epoch: int = 0
    seed: int = 0
    step: int = 0


def _to_tensors(ck: Checkpoint) -> dict[str, np.ndarray]:
    n = ck.net
    out: dict[str, np.ndarray] = {
        "meta.net": np.array([n.levels, n.base_channels, n.msc_depth, float(n.global_residual),
                              n.attention_reduction, n.alpha]),
        "meta.run": np.array([ck.epoch, ck.seed, ck.step], dtype=np.float64),
        "meta.adam": np.array([ck.adam.lr, ck.adam.beta1, ck.adam.beta2, ck.adam.eps, ck.adam.t]),
        "meta.schedule": np.array([ck.schedule.lr, ck.schedule.patience, ck.schedule.factor,
                                   ck.schedule.min_lr, ck.schedule.best, ck.schedule.wait]),
    }
    for name, p in ck.params.items():
        out[f"param.{name}"] = p.data
    for name in ck.params:
        if name in ck.adam.m:
            out[f"adam.m.{name}"] = ck.adam.m[name]
            out[f"adam.v.{name}"] = ck.adam.v[name]
    return out


def save_checkpoint(ck: Checkpoint, path: str | os.PathLike) -> None:
    write_tensors(path, _to_tensors(ck))


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    t = read_tensors(path)
    try:
        levels, base, depth, resid, red, alpha = t["meta.net"]
        epoch, seed, step = t["meta.run"]
        lr, b1, b2, eps, st = t["meta.adam"]
        slr, patience, factor, min_lr, best, wait = t["meta.schedule"]
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}: missing or malformed metadata ({exc})") from None
    net = NetworkConfig(int(levels), int(base), int(depth), bool(resid), int(red), float(alpha))
    params = {k[len("param."):]: Tensor(v.copy(), requires_grad=True) for k, v in t.items() if k.startswith("param.")}
    check_params(params, net)
    adam = AdamState(float(lr), float(b1), float(b2), float(eps), int(st))
    for name in params:
        if f"adam.m.{name}" in t:
            adam.m[name] = t[f"adam.m.{name}"].copy()
            adam.v[name] = t[f"adam.v.{name}"].copy()
    sched = PlateauSchedule(float(slr), int(patience), float(factor), float(min_lr), float(best), int(wait))
    return Checkpoint(params, net, adam, sched, int(epoch), int(seed), int(step))


# -- training loop -------------------------------------------------------

@dataclass
class TrainOptions:
    epochs: int = 300
    lr: float = 2e-4
    batch: int = 2
    patch: int = 128
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 10
    factor: float = 0.2
    min_lr: float = 0.0
    clip_grad: float = 0.0
    max_steps: int = 0
    val_fraction: float = 0.0
    augment: bool = True
    deterministic: bool = False


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict[str, float]]


def _stack(arrays: Sequence[np.ndarray]) -> Tensor:
    return Tensor(np.concatenate(arrays, axis=0))


def _write_history(path: Path, rows: list[dict[str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for r in rows:
            w.writerow([int(r["epoch"]), int(r["step"])] + [repr(float(r[k])) for k in HISTORY_HEADER[2:]])


def train(pairs: Sequence, net: NetworkConfig, loss_cfg: LossConfig, opts: TrainOptions,
          out_dir: str | os.PathLike | None = None, resume: Checkpoint | None = None,
          extractor: PerceptualExtractor | None = None) -> TrainResult:
    """Fit the network on ``pairs`` (objects with ``low``/``ref`` NHWC data).

    Writes ``last.ckpt``, ``best.ckpt`` and ``loss.csv`` into ``out_dir`` when
    given. Raises :class:`TrainingDiverged` on a non-finite loss.
    """
    if not pairs:
        raise ValueError("training needs at least one image pair")
    with deterministic_mode(opts.deterministic):
        return _train(pairs, net, loss_cfg, opts, out_dir, resume, extractor)


def _train(pairs, net, loss_cfg, opts, out_dir, resume, extractor) -> TrainResult:
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ext = extractor or PerceptualExtractor()

    if resume is None:
        params = init_params(net, opts.seed)
        adam = AdamState(opts.lr, opts.beta1, opts.beta2, opts.adam_eps)
        sched = PlateauSchedule(opts.lr, opts.patience, opts.factor, opts.min_lr)
        ck = Checkpoint(params, net, adam, sched, epoch=0, seed=opts.seed)
    else:
        ck = resume
        if ck.net != net:
            raise ValueError(f"checkpoint network {ck.net} does not match requested {net}")
    params = ck.params

    data = [(np.asarray(getattr(p.low, "data", p.low)), np.asarray(getattr(p.ref, "data", p.ref))) for p in pairs]
    split_rng = np.random.default_rng([ck.seed, 0xDA7A])
    order = split_rng.permutation(len(data))
    n_val = int(round(opts.val_fraction * len(data))) if len(data) > 1 else 0
    val_idx, train_idx = order[:n_val], np.sort(order[n_val:])

    history: list[dict[str, float]] = []
    step = ck.step
    best_path = out / "best.ckpt" if out else None
    last_path = out / "last.ckpt" if out else None
    best_seen = math.inf
    prior_rows: list[dict[str, float]] = []
    if resume is not None and out is not None and (out / "loss.csv").exists():
        with open(out / "loss.csv", newline="") as fh:
            prior_rows = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
        prior_rows = [r for r in prior_rows if r["epoch"] <= ck.epoch]

    for epoch in range(ck.epoch + 1, opts.epochs + 1):
        # seeded per epoch so a resumed run draws the same crops as an uninterrupted one
        rng = np.random.default_rng([ck.seed, epoch])
        perm = train_idx[rng.permutation(len(train_idx))]
        epoch_losses = []
        for start in range(0, len(perm), opts.batch):
            if opts.max_steps and step >= opts.max_steps:
                break
            lows, refs = [], []
            for i in perm[start:start + opts.batch]:
                lo, re = random_crop(*data[i], opts.patch, net.multiple, rng)
                if opts.augment:
                    lo_t, re_t, _ = augment(lo, re, rng)
                    lo, re = lo_t.data, re_t.data
                lows.append(lo)
                refs.append(re)
            if len({a.shape for a in lows}) > 1:
                # differently sized crops cannot share a batch; run them one at a time
                batches = [(_stack([a]), _stack([b])) for a, b in zip(lows, refs)]
            else:
                batches = [(_stack(lows), _stack(refs))]
            for p in params.values():
                p.zero_grad()
            comps_acc: dict[str, float] = {}
            for x, g in batches:
                E = forward(x, params, net)
                res = total_loss(E, g, ext, loss_cfg)
                if not math.isfinite(res.components["total"]):
                    raise TrainingDiverged(
                        f"loss became {res.components['total']} at epoch {epoch} step {step + 1}; "
                        f"last good checkpoint: {last_path}"
                    )
                share = 1.0 / len(batches)
                if res.total.requires_grad:
                    (res.total * share).backward()
                for k, v in res.components.items():
                    comps_acc[k] = comps_acc.get(k, 0.0) + v * share
            grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
            if opts.clip_grad > 0:
                norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if norm > opts.clip_grad:
                    grads = {n: g * (opts.clip_grad / norm) for n, g in grads.items()}
            ck.adam.lr = ck.schedule.lr
            adam_step(params, grads, ck.adam)
            step += 1
            row = {"epoch": epoch, "step": step, **{k: comps_acc[k] for k in ("total", "pixel", "global", "edge", "channel")},
                   "lr": ck.adam.lr}
            history.append(row)
            epoch_losses.append(comps_acc["total"])
        if not epoch_losses:
            break

        monitored = float(np.mean(epoch_losses))
        if len(val_idx):
            monitored = evaluate_loss([data[i] for i in val_idx], params, net, loss_cfg, ext)
        schedule_update(ck.schedule, monitored)
        ck.epoch = epoch
        ck.step = step
        logger.info("epoch %d  loss %.6f  lr %.3g", epoch, monitored, ck.schedule.lr)

        if out is not None:
            save_checkpoint(ck, last_path)
            if monitored < best_seen:
                best_seen = monitored
                save_checkpoint(ck, best_path)
            _write_history(out / "loss.csv", prior_rows + history)
        if opts.max_steps and step >= opts.max_steps:
            break

    for p in params.values():
        p.zero_grad()
    return TrainResult(ck, history)


def evaluate_loss(data, params, net, loss_cfg, ext) -> float:
    """Mean total loss over full images, without gradients."""
    frozen = {n: Tensor(p.data) for n, p in params.items()}
    vals = []
    for lo, re in data:
        H, W = lo.shape[1:3]
        m = net.multiple
        lo, re = lo[:, : H // m * m, : W // m * m], re[:, : H // m * m, : W // m * m]
        vals.append(total_loss(forward(Tensor(lo), frozen, net), Tensor(re), ext, loss_cfg).components["total"])
    return float(np.mean(vals))
