"""Schedule, SGD stepping, augmentation, and the training loop."""

import csv

import numpy as np
import pytest

from fined.network import (
    NetworkSpec,
    ParamStore,
    build_network,
    init_params,
    save_params,
)
from fined.tensor import Tensor
from fined.toydata import make_shapes
from fined.trainer import (
    EpochLog,
    Sample,
    TrainConfig,
    augment,
    evaluate_mean_loss,
    fit,
    lr_at,
    sgd_step,
    write_loss_log,
)


@pytest.fixture
def rng():
    return np.random.default_rng(20260816)


def toy_samples(rng, count=5, size=16):
    out = []
    for i in range(count):
        img = rng.random((3, size, size), dtype=np.float32)
        gt = np.zeros((size, size), dtype=np.float32)
        row = int(rng.integers(2, size - 2))
        gt[row, 2:size - 2] = 1.0
        out.append(Sample(image=img, gt=gt, id=f"s{i}"))
    return out


class TestTrainConfig:
    def test_defaults_match_recipe(self):
        cfg = TrainConfig()
        assert cfg.lr0 == 0.01
        assert cfg.lr_decay == 0.1
        assert cfg.decay_every == 10
        assert cfg.batch_size == 3
        assert cfg.epochs == 60
        assert cfg.momentum == 0.0

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(lr0=-0.1)


class TestSchedule:
    def test_closed_form_every_epoch(self):
        cfg = TrainConfig()
        for epoch in range(60):
            assert lr_at(cfg, epoch) == 0.01 * 0.1 ** (epoch // 10)

    def test_epoch_25_is_1e4(self):
        assert lr_at(TrainConfig(), 25) == pytest.approx(1e-4, rel=1e-12)

    def test_steps_at_exact_boundaries(self):
        cfg = TrainConfig()
        assert lr_at(cfg, 9) == 0.01
        assert lr_at(cfg, 10) == pytest.approx(0.001)
        assert lr_at(cfg, 20) == pytest.approx(1e-4)


def tiny_store(values):
    store = ParamStore()
    for name, arr in values.items():
        store.add(name, Tensor(np.asarray(arr, dtype=np.float32)
                               .reshape(1, 1, 1, -1)))
    return store


def flat(store, name):
    return store[name].data.ravel()


class TestSgdStep:
    def test_momentum_zero_is_plain_descent(self):
        store = tiny_store({"w": [1.0, 2.0]})
        grads = {"w": np.array([0.5, -1.0], dtype=np.float32)
                 .reshape(1, 1, 1, 2)}
        sgd_step(store, grads, lr=0.1, momentum=0.0, velocity={})
        assert np.allclose(flat(store, "w"), [0.95, 2.1])

    def test_zero_gradients_leave_weights_alone(self):
        store = tiny_store({"w": [3.0, -4.0]})
        grads = {"w": np.zeros((1, 1, 1, 2), dtype=np.float32)}
        sgd_step(store, grads, lr=0.5, momentum=0.9, velocity={})
        assert np.allclose(flat(store, "w"), [3.0, -4.0])

    def test_two_momentum_steps_match_hand_trace(self):
        # v1 = g1, w1 = w0 - lr*g1; v2 = 0.9*g1 + g2, w2 = w1 - lr*v2
        store = tiny_store({"w": [1.0]})
        velocity = {}
        g1 = np.full((1, 1, 1, 1), 2.0, dtype=np.float32)
        g2 = np.full((1, 1, 1, 1), -1.0, dtype=np.float32)
        sgd_step(store, {"w": g1}, lr=0.1, momentum=0.9, velocity=velocity)
        assert np.allclose(flat(store, "w"), [0.8])
        sgd_step(store, {"w": g2}, lr=0.1, momentum=0.9, velocity=velocity)
        # v2 = 0.9*2 + (-1) = 0.8; w = 0.8 - 0.1*0.8 = 0.72
        assert np.allclose(flat(store, "w"), [0.72])
        assert np.allclose(velocity["w"].ravel(), [0.8])

    def test_missing_gradient_key_rejected(self):
        store = tiny_store({"w": [1.0], "b": [0.0]})
        with pytest.raises(ValueError, match="missing gradient"):
            sgd_step(store, {"w": np.zeros((1, 1, 1, 1), np.float32)},
                     lr=0.1, momentum=0.0, velocity={})

    def test_shape_mismatch_rejected(self):
        store = tiny_store({"w": [1.0, 2.0]})
        with pytest.raises(ValueError, match="shape"):
            sgd_step(store, {"w": np.zeros((1, 1, 1, 3), np.float32)},
                     lr=0.1, momentum=0.0, velocity={})


class TestAugment:
    def test_five_samples_become_120(self, rng):
        out = augment(toy_samples(rng, count=5))
        assert len(out) == 120
        assert len({s.id for s in out}) == 120

    def test_flip_twice_is_identity(self, rng):
        s = toy_samples(rng, count=1)[0]
        flipped = s.image[:, :, ::-1][:, :, ::-1]
        assert np.array_equal(flipped, s.image)

    def test_rotation_matches_index_permutation_oracle(self):
        img = np.arange(2 * 3, dtype=np.float32).reshape(1, 2, 3)
        img = np.concatenate([img, img + 10, img + 20])
        gt = np.arange(6, dtype=np.float32).reshape(2, 3) / 6.0
        out = augment([Sample(image=img, gt=gt, id="a")], scales=(1.0,))
        rot90 = next(s for s in out if s.id == "a~f0r90s1")
        assert rot90.dims == (3, 2)
        # 90-degree counter-clockwise: out[i, j] == in[j, W-1-i]
        for i in range(3):
            for j in range(2):
                assert rot90.gt[i, j] == gt[j, 3 - 1 - i]
                for c in range(3):
                    assert rot90.image[c, i, j] == img[c, j, 3 - 1 - i]

    def test_gt_follows_image_under_flip(self, rng):
        s = toy_samples(rng, count=1)[0]
        out = augment([s], scales=(1.0,))
        flip = next(x for x in out if x.id == "s0~f1r0s1")
        assert np.array_equal(flip.gt, s.gt[:, ::-1])
        assert np.array_equal(flip.image, s.image[:, :, ::-1])

    def test_rescaled_dims_and_gt_range(self, rng):
        s = toy_samples(rng, count=1, size=16)[0]
        out = augment([s], scales=(0.5, 1.0, 1.5))
        dims = {x.dims for x in out}
        assert dims == {(8, 8), (16, 16), (24, 24)}
        for x in out:
            assert x.gt.min() >= 0.0 and x.gt.max() <= 1.0

    def test_scale_tags_in_ids(self, rng):
        out = augment(toy_samples(rng, count=1), scales=(0.5, 1.0, 1.5))
        assert any(s.id.endswith("s0.5") for s in out)
        assert any(s.id.endswith("s1.5") for s in out)


class TestSampleValidation:
    def test_wrong_channel_count(self):
        with pytest.raises(ValueError, match="3, h, w"):
            Sample(image=np.zeros((1, 4, 4)), gt=np.zeros((4, 4)), id="x")

    def test_gt_dim_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            Sample(image=np.zeros((3, 4, 4)), gt=np.zeros((5, 4)), id="x")


class TestFit:
    def test_same_seed_bit_identical(self, rng, tmp_path):
        spec = NetworkSpec.variant("fined2", "train")
        samples = toy_samples(rng, count=4)
        cfg = TrainConfig(epochs=3, seed=11)
        stores = []
        for _ in range(2):
            net = build_network(spec)
            store = init_params(spec, seed=7, std=0.05)
            fit(net, store, samples, cfg)
            path = tmp_path / f"run{len(stores)}.fined"
            save_params(store, str(path))
            stores.append(path.read_bytes())
        assert stores[0] == stores[1]

    def test_empty_dataset_rejected(self):
        spec = NetworkSpec.variant("fined2", "train")
        net = build_network(spec)
        with pytest.raises(ValueError, match="empty dataset"):
            fit(net, init_params(spec, seed=0), [], TrainConfig(epochs=1))

    def test_inference_graph_rejected(self, rng):
        spec = NetworkSpec.variant("fined2", "inference")
        net = build_network(spec)
        with pytest.raises(ValueError, match="train-mode"):
            fit(net, init_params(spec, seed=0), toy_samples(rng, count=1),
                TrainConfig(epochs=1))

    def test_log_matches_schedule_and_writes_csv(self, rng, tmp_path):
        spec = NetworkSpec.variant("fined2", "train")
        net = build_network(spec)
        store = init_params(spec, seed=1, std=0.05)
        cfg = TrainConfig(epochs=4, seed=3, decay_every=2)
        path = tmp_path / "loss.csv"
        _, log = fit(net, store, toy_samples(rng, count=3), cfg,
                     log_path=str(path))
        assert [e.epoch for e in log] == [0, 1, 2, 3]
        assert [e.lr for e in log] == [0.01, 0.01, 0.001, 0.001]
        assert all(np.isfinite(e.mean_total_loss) for e in log)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "lr", "mean_total_loss"]
        assert len(rows) == 5
        assert float(rows[1][2]) == pytest.approx(log[0].mean_total_loss,
                                                  rel=1e-9)

    def test_batches_never_mix_dims(self, rng):
        # mixed-size dataset trains without shape errors: bucketing works
        spec = NetworkSpec.variant("fined2", "train")
        net = build_network(spec)
        store = init_params(spec, seed=2, std=0.05)
        mixed = toy_samples(rng, count=2, size=16) + toy_samples(
            rng, count=2, size=24)
        _, log = fit(net, store, mixed, TrainConfig(epochs=2, seed=5))
        assert len(log) == 2

    def test_loss_non_increasing_windows_at_small_lr(self, rng):
        # the documented stability property: with one sample and a gentle
        # constant-phase lr, 5-epoch windows rarely regress
        spec = NetworkSpec.variant("fined2", "train")
        net = build_network(spec)
        store = init_params(spec, seed=4, std=0.1)
        samples = toy_samples(rng, count=1)
        cfg = TrainConfig(epochs=18, seed=9, lr0=2e-4)
        _, log = fit(net, store, samples, cfg)
        losses = [e.mean_total_loss for e in log]
        windows = [(losses[i + 5] <= losses[i])
                   for i in range(len(losses) - 5)]
        assert sum(windows) / len(windows) >= 0.9

    def test_overfit_single_sample_known_red(self):
        # Documented target: one 32x32 sample, 30 epochs of the default
        # schedule, final mean loss below 0.2x the initial. Known-red: from
        # a cold start the 0.01 learning rate either parks (small inits
        # barely move) or diverges (awake inits overflow within ~40 steps),
        # so the target is unreachable before the first decay kicks in; the
        # README's "Known limitation" section records the probe campaign.
        # Pinned at the best surviving init found so the gap stays visible.
        spec = NetworkSpec.variant("fined2", "train")
        net = build_network(spec)
        store = init_params(spec, seed=0, std=0.05)
        samples = make_shapes(count=1, size=32, seed=7)
        cfg = TrainConfig(epochs=30, seed=0)
        initial = evaluate_mean_loss(net, store, samples, cfg)
        with np.errstate(over="ignore", invalid="ignore"):
            fit(net, store, samples, cfg)
            final = evaluate_mean_loss(net, store, samples, cfg)
        assert final < 0.2 * initial, (
            f"final {final:.1f} vs initial {initial:.1f} "
            f"(ratio {final / initial:.3f}, need < 0.2)")


class TestEvaluateMeanLoss:
    def test_matches_manual_average(self, rng):
        spec = NetworkSpec.variant("fined2", "train")
        net = build_network(spec)
        store = init_params(spec, seed=6, std=0.05)
        samples = toy_samples(rng, count=3)
        cfg = TrainConfig(epochs=1)
        mean = evaluate_mean_loss(net, store, samples, cfg)
        singles = [evaluate_mean_loss(net, store, [s], cfg) for s in samples]
        assert mean == pytest.approx(sum(singles) / 3, rel=1e-9)


class TestWriteLossLog:
    def test_round_trip(self, tmp_path):
        entries = [EpochLog(0, 0.01, 12.5), EpochLog(1, 0.01, 11.25)]
        path = tmp_path / "log.csv"
        write_loss_log(str(path), entries)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[1] == ["0", "0.01", "12.5"]
        assert rows[2] == ["1", "0.01", "11.25"]
