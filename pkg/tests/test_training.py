import csv
import math

import numpy as np
import pytest

from wavenhance.dataio import ImagePair
from wavenhance.losses import LossConfig
from wavenhance.network import NetworkConfig, init_params
from wavenhance.tensor import Tensor
from wavenhance.training import (
    HISTORY_HEADER,
    AdamState,
    Checkpoint,
    PlateauSchedule,
    TrainingDiverged,
    TrainOptions,
    adam_step,
    augment,
    dihedral,
    dihedral_inverse,
    load_checkpoint,
    random_crop,
    save_checkpoint,
    schedule_update,
    train,
)

NET = NetworkConfig(levels=1, base_channels=4, msc_depth=1)


class TestAdam:
    def test_first_step_closed_form(self):
        p = {"w": Tensor(np.zeros(3))}
        st = AdamState(lr=0.1)
        adam_step(p, {"w": np.ones(3)}, st)
        np.testing.assert_allclose(p["w"].data, -0.1, rtol=1e-7)
        assert st.t == 1

    def test_zero_gradient_no_change(self, rng):
        x = rng.normal(size=(2, 2))
        p = {"w": Tensor(x.copy())}
        st = AdamState(lr=0.1)
        for _ in range(5):
            adam_step(p, {"w": np.zeros((2, 2))}, st)
        np.testing.assert_array_equal(p["w"].data, x)

    def test_identical_grads_identical_updates(self, rng):
        g = rng.normal(size=4)
        p = {"a": Tensor(np.ones(4)), "b": Tensor(np.ones(4))}
        st = AdamState(lr=0.01)
        for _ in range(3):
            adam_step(p, {"a": g, "b": g}, st)
        np.testing.assert_array_equal(p["a"].data, p["b"].data)

    def test_missing_grad_named(self):
        with pytest.raises(KeyError, match="enc0.bias"):
            adam_step({"enc0.bias": Tensor(np.zeros(1))}, {}, AdamState())

    def test_constant_gradient_step_size(self):
        p = {"w": Tensor(np.zeros(2))}
        st = AdamState(lr=1e-3)
        g = np.array([0.3, -2.0])
        for _ in range(1000):
            before = p["w"].data.copy()
            adam_step(p, {"w": g}, st)
        np.testing.assert_allclose(p["w"].data - before, -1e-3 * np.sign(g), rtol=0.01)


class TestSchedule:
    def test_constant_stream_reduces_after_patience_plus_one(self):
        s = PlateauSchedule(lr=2e-4)
        assert schedule_update(s, 1.0) == 2e-4  # first value is an improvement over inf
        lrs = [schedule_update(s, 1.0) for _ in range(11)]
        assert lrs[:10] == [2e-4] * 10
        assert lrs[10] == pytest.approx(4e-5, rel=1e-12)

    def test_twice(self):
        s = PlateauSchedule(lr=2e-4, patience=0)
        schedule_update(s, 1.0)
        schedule_update(s, 1.0)
        assert schedule_update(s, 1.0) == pytest.approx(8e-6, rel=1e-12)

    def test_improving_keeps_lr(self):
        s = PlateauSchedule(lr=2e-4)
        assert all(schedule_update(s, 10.0 - i) == 2e-4 for i in range(30))

    def test_never_increases_and_floor(self, rng):
        s = PlateauSchedule(lr=1e-2, patience=1, min_lr=1e-4)
        lr = s.lr
        for v in rng.normal(size=200):
            new = schedule_update(s, float(v))
            assert new <= lr and new >= 1e-4
            assert s.wait <= s.patience
            lr = new
        assert lr == 1e-4

    def test_nan_aborts(self):
        with pytest.raises(TrainingDiverged):
            schedule_update(PlateauSchedule(), math.nan)

    def test_bad_factor(self):
        with pytest.raises(ValueError):
            PlateauSchedule(factor=1.0)


class TestAugment:
    def test_group_elements(self, rng):
        x = rng.random((1, 3, 5, 2))
        outs = [dihedral(x, k) for k in range(8)]
        np.testing.assert_array_equal(outs[0], x)
        assert len({o.tobytes() + bytes(o.shape) for o in outs}) == 8
        for k in range(8):
            np.testing.assert_array_equal(dihedral_inverse(outs[k], k), x)

    def test_pair_transformed_identically(self, rng):
        low = rng.random((1, 4, 6, 3))
        lo, re, k = augment(low, low.copy(), np.random.default_rng(5))
        np.testing.assert_array_equal(lo.data, re.data)
        np.testing.assert_array_equal(lo.data, dihedral(low, k))
        _, _, k2 = augment(low, low, np.random.default_rng(5))
        assert k == k2

    def test_uniform_choice(self):
        r = np.random.default_rng(0)
        x = np.zeros((1, 2, 2, 1))
        counts = np.bincount([augment(x, x, r)[2] for _ in range(4000)], minlength=8)
        assert counts.min() > 400

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            augment(rng.random((1, 2, 2, 3)), rng.random((1, 2, 4, 3)), rng)

    def test_random_crop(self, rng):
        lo, re = rng.random((2, 1, 20, 30, 3))
        a, b = random_crop(lo, re, 16, 8, rng)
        assert a.shape == (1, 16, 16, 3)
        # aligned: the same window in both images
        i = np.argwhere(np.all(lo[0] == a[0, 0, 0], axis=-1))[0]
        np.testing.assert_array_equal(re[:, i[0]:i[0] + 16, i[1]:i[1] + 16], b)
        assert random_crop(lo, re, 128, 8, rng)[0].shape == (1, 16, 24, 3)


def _pairs(smoke_pair, size=16):
    low, ref = smoke_pair
    return [ImagePair("p", Tensor(low[:, :size, :size]), Tensor(ref[:, :size, :size]))]


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path, rng):
        params = init_params(NET, 3)
        adam = AdamState(lr=1e-3, t=7, m={k: rng.normal(size=v.shape) for k, v in params.items()},
                         v={k: rng.random(v.shape) for k, v in params.items()})
        ck = Checkpoint(params, NET, adam, PlateauSchedule(lr=1e-3, best=0.5, wait=2), epoch=4, seed=9, step=12)
        save_checkpoint(ck, tmp_path / "a.ckpt")
        back = load_checkpoint(tmp_path / "a.ckpt")
        assert (back.epoch, back.seed, back.step, back.net) == (4, 9, 12, NET)
        assert back.schedule == ck.schedule
        assert back.adam.t == 7 and back.adam.lr == 1e-3
        for k in params:
            assert back.params[k].data.tobytes() == params[k].data.tobytes()
            assert back.adam.m[k].tobytes() == adam.m[k].tobytes()
        save_checkpoint(back, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


class TestTrain:
    OPTS = dict(epochs=3, patch=16, batch=1, lr=1e-3, deterministic=True)

    def test_outputs_and_history(self, tmp_path, smoke_pair):
        res = train(_pairs(smoke_pair), NET, LossConfig(), TrainOptions(**self.OPTS), out_dir=tmp_path)
        assert [r["step"] for r in res.history] == [1, 2, 3]
        assert res.checkpoint.epoch == 3 and res.checkpoint.step == 3
        with open(tmp_path / "loss.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == HISTORY_HEADER and len(rows) == 4
        assert float(rows[1][HISTORY_HEADER.index("lr")]) == 1e-3
        assert (tmp_path / "last.ckpt").exists() and (tmp_path / "best.ckpt").exists()

    def test_resume_matches_uninterrupted(self, tmp_path, smoke_pair):
        pairs = _pairs(smoke_pair)
        opts = dict(self.OPTS, epochs=4, augment=True)
        full = train(pairs, NET, LossConfig(), TrainOptions(**opts), out_dir=tmp_path / "full")
        train(pairs, NET, LossConfig(), TrainOptions(**dict(opts, epochs=2)), out_dir=tmp_path / "part")
        ck = load_checkpoint(tmp_path / "part" / "last.ckpt")
        assert ck.epoch == 2
        res = train(pairs, NET, LossConfig(), TrainOptions(**opts), out_dir=tmp_path / "part", resume=ck)
        assert res.checkpoint.epoch == 4
        assert [r["epoch"] for r in res.history] == [3, 4]
        assert (tmp_path / "full" / "last.ckpt").read_bytes() == (tmp_path / "part" / "last.ckpt").read_bytes()
        assert (tmp_path / "full" / "loss.csv").read_bytes() == (tmp_path / "part" / "loss.csv").read_bytes()
        assert full.checkpoint.step == 4

    def test_zero_weights_leave_params_unchanged(self, smoke_pair):
        cfg = LossConfig(w1=0, w2=0, w3=0, w4=0, edge_weight=0, channel_weight=0)
        res = train(_pairs(smoke_pair), NET, cfg, TrainOptions(**self.OPTS))
        init = init_params(NET, 0)
        for k, v in res.checkpoint.params.items():
            np.testing.assert_array_equal(v.data, init[k].data)

    def test_max_steps_and_batching(self, smoke_pair):
        low, ref = smoke_pair
        pairs = [ImagePair(str(i), Tensor(low[:, :16, 16 * i:16 * (i + 1)]), Tensor(ref[:, :16, 16 * i:16 * (i + 1)]))
                 for i in range(3)]
        res = train(pairs, NET, LossConfig(), TrainOptions(**dict(self.OPTS, batch=2, epochs=10, max_steps=5)))
        assert len(res.history) == 5 and res.checkpoint.step == 5
        assert [r["epoch"] for r in res.history] == [1, 1, 2, 2, 3]

    def test_validation_split_and_clipping(self, smoke_pair):
        low, ref = smoke_pair
        pairs = [ImagePair(str(i), Tensor(low[:, :16, 16 * i:16 * (i + 1)]), Tensor(ref[:, :16, 16 * i:16 * (i + 1)]))
                 for i in range(4)]
        res = train(pairs, NET, LossConfig(), TrainOptions(**dict(self.OPTS, val_fraction=0.25, clip_grad=0.1)))
        assert len(res.history) == 9  # 3 training pairs per epoch

    def test_divergence_keeps_last_checkpoint(self, tmp_path, smoke_pair):
        pairs = _pairs(smoke_pair)
        train(pairs, NET, LossConfig(), TrainOptions(**dict(self.OPTS, epochs=1)), out_dir=tmp_path)
        before = (tmp_path / "last.ckpt").read_bytes()
        bad = [ImagePair("nan", Tensor(np.full((1, 16, 16, 3), np.nan)), pairs[0].ref)]
        with np.errstate(invalid="ignore"), pytest.raises(TrainingDiverged, match="last good checkpoint"):
            train(bad, NET, LossConfig(), TrainOptions(**self.OPTS), out_dir=tmp_path)
        assert (tmp_path / "last.ckpt").read_bytes() == before

    def test_resume_with_other_network_rejected(self, tmp_path, smoke_pair):
        res = train(_pairs(smoke_pair), NET, LossConfig(), TrainOptions(**dict(self.OPTS, epochs=1)))
        with pytest.raises(ValueError, match="does not match"):
            train(_pairs(smoke_pair), NetworkConfig(levels=1, base_channels=8), LossConfig(),
                  TrainOptions(**self.OPTS), resume=res.checkpoint)

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train([], NET, LossConfig(), TrainOptions())

    def test_defaults(self):
        o = TrainOptions()
        assert (o.lr, o.batch, o.epochs, o.patience, o.factor) == (2e-4, 2, 300, 10, 0.2)
        assert (o.beta1, o.beta2, o.adam_eps) == (0.9, 0.999, 1e-8)
