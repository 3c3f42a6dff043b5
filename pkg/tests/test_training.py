"""Loss weighting, schedule, init statistics, and training-loop contracts."""

import numpy as np
import pytest

from qsmkit.dipole import NoiseConfig
from qsmkit.errors import ConfigError, ShapeError, UsageError
from qsmkit.ir2unet import NetworkConfig, build_network, ir2_forward
from qsmkit.tensor import Tensor, backward, mse, zero_grad
from qsmkit.training import (
    TrainConfig,
    compute_loss,
    init_weights,
    loss_weights,
    lr_schedule,
    train_loop,
)


class TestLossWeights:
    def test_t4_lambda_half_exact(self):
        assert loss_weights(4, 0.5) == [0.125, 0.25, 0.5, 1.0]

    def test_monotone_increasing_for_lambda_below_one(self):
        w = loss_weights(6, 0.7)
        assert all(a < b for a, b in zip(w, w[1:]))

    def test_all_equal_outputs_give_zero(self, rng):
        gt = Tensor(rng.normal(size=(1, 1, 4, 4, 4)))
        latents = [Tensor(gt.data.copy()) for _ in range(3)]
        final = Tensor(gt.data.copy())
        assert compute_loss(latents, final, gt, 0.5).item() == 0.0

    def test_hand_computed_t2_case(self, rng):
        gt = Tensor(rng.normal(size=(2, 1, 4, 4, 4)))
        chi1 = Tensor(gt.data + 2.0)  # mse 4
        chi2 = Tensor(gt.data - np.sqrt(2.0))  # mse 2
        final = Tensor(gt.data + 1.0)  # mse 1
        loss = compute_loss([chi1, chi2], final, gt, 0.5)
        assert abs(loss.item() - 5.0) < 1e-12

    def test_loss_nonnegative(self, rng):
        gt = Tensor(rng.normal(size=(1, 1, 4, 4, 4)))
        latents = [Tensor(rng.normal(size=(1, 1, 4, 4, 4))) for _ in range(2)]
        final = Tensor(rng.normal(size=(1, 1, 4, 4, 4)))
        assert compute_loss(latents, final, gt, 0.5).item() >= 0.0

    def test_shape_mismatch_raises(self, rng):
        gt = Tensor(np.zeros((1, 1, 4, 4, 4)))
        bad = Tensor(np.zeros((1, 1, 2, 2, 2)))
        with pytest.raises(ShapeError):
            compute_loss([bad], Tensor(gt.data.copy()), gt, 0.5)

    def test_differentiable_through_all_terms(self, rng):
        gt = Tensor(rng.normal(size=(1, 1, 2, 2, 2)))
        latents = [Tensor(rng.normal(size=(1, 1, 2, 2, 2)), requires_grad=True) for _ in range(2)]
        final = Tensor(rng.normal(size=(1, 1, 2, 2, 2)), requires_grad=True)
        backward(compute_loss(latents, final, gt, 0.5))
        assert all(l.grad is not None and np.any(l.grad != 0) for l in latents)
        assert np.any(final.grad != 0)


class TestLrSchedule:
    @pytest.mark.parametrize(
        "epoch,rate",
        [(1, 1e-3), (10, 1e-3), (30, 1e-3), (31, 1e-4), (45, 1e-4), (60, 1e-4),
         (61, 1e-5), (75, 1e-5), (100, 1e-5)],
    )
    def test_segments(self, epoch, rate):
        assert lr_schedule(epoch) == rate

    def test_covers_every_epoch_without_gaps(self):
        rates = [lr_schedule(e) for e in range(1, 101)]
        assert rates.count(1e-3) == 30
        assert rates.count(1e-4) == 30
        assert rates.count(1e-5) == 40

    def test_out_of_range_rejected(self):
        with pytest.raises(UsageError):
            lr_schedule(0)
        with pytest.raises(UsageError):
            lr_schedule(101)


class TestInitWeights:
    def test_sampled_std_and_mean(self):
        net = build_network(NetworkConfig(T=4, base_channels=8, dropout_rate=0.0),
                            np.random.default_rng(0))
        init_weights(net, np.random.default_rng(123))
        draws = np.concatenate(
            [p.data.ravel() for n, p in net.params.items()
             if n.endswith("/weight") or n.endswith("/bias")]
        )
        assert draws.size >= 10**5
        assert abs(draws.std() - 0.01) < 0.01 * 0.05
        assert abs(draws.mean()) < 3 * 0.01 / np.sqrt(draws.size)

    def test_batchnorm_affine_and_running_state(self):
        net = build_network(NetworkConfig(T=1, base_channels=4), np.random.default_rng(0))
        init_weights(net, np.random.default_rng(5))
        assert np.all(net.params["iter1/enc1/bn1/gamma"].data == 1.0)
        assert np.all(net.params["iter1/enc1/bn1/beta"].data == 0.0)
        assert np.all(net.buffers["iter1/enc1/bn1/running_mean"] == 0.0)
        assert np.all(net.buffers["iter1/enc1/bn1/running_var"] == 1.0)

    def test_same_seed_identical(self):
        nets = []
        for _ in range(2):
            net = build_network(NetworkConfig(T=2, base_channels=4), np.random.default_rng(0))
            init_weights(net, np.random.default_rng(77))
            nets.append(net)
        for name in nets[0].params:
            assert np.array_equal(nets[0].params[name].data, nets[1].params[name].data)


def _tiny_dataset(rng, n_pairs=4, size=8):
    pairs = []
    for _ in range(n_pairs):
        chi = rng.normal(scale=0.1, size=(size, size, size)).astype(np.float32)
        field = rng.normal(scale=0.1, size=(size, size, size)).astype(np.float32)
        pairs.append((field, chi))
    return pairs


def _tiny_net(seed=0, **kw):
    cfg = dict(T=2, base_channels=2, dropout_rate=0.0)
    cfg.update(kw)
    ncfg = NetworkConfig(**cfg)
    net = build_network(ncfg, np.random.default_rng(seed))
    return init_weights(net, np.random.default_rng(seed))


class TestTrainLoop:
    def test_empty_dataset_rejected(self):
        with pytest.raises(UsageError):
            train_loop([], _tiny_net(), TrainConfig(epochs=1))

    def test_zero_lr_leaves_parameters_identical(self, rng):
        net = _tiny_net(1)
        before = {n: p.data.copy() for n, p in net.params.items()}
        cfg = TrainConfig(epochs=2, batch_size=2, noise=NoiseConfig((0.0, 0.0)),
                          lr_override=0.0)
        train_loop(_tiny_dataset(rng), net, cfg)
        for name, p in net.params.items():
            assert np.array_equal(p.data, before[name]), name

    def test_identical_seeds_give_bit_identical_histories(self, rng):
        data = _tiny_dataset(rng)
        runs = []
        for _ in range(2):
            net = _tiny_net(3)
            cfg = TrainConfig(epochs=2, batch_size=2, seed=42,
                              noise=NoiseConfig((0.0, 0.005), seed=42))
            _, hist = train_loop(data, net, cfg)
            runs.append(hist.steps)
        assert runs[0] == runs[1]

    def test_history_bookkeeping(self, rng):
        data = _tiny_dataset(rng, n_pairs=5)
        net = _tiny_net(4)
        cfg = TrainConfig(epochs=2, batch_size=2, noise=NoiseConfig((0.0, 0.0)))
        _, hist = train_loop(data, net, cfg)
        assert len(hist.steps) == 2 * int(np.ceil(5 / 2))
        assert len(hist.epoch_mean_loss) == 2
        assert hist.epoch_lr == [1e-3, 1e-3]
        steps = [s for s, _, _, _ in hist.steps]
        assert steps == list(range(len(steps)))

    def test_overfit_trend_on_one_patch(self, rng):
        chi = rng.normal(scale=0.1, size=(8, 8, 8)).astype(np.float32)
        field = rng.normal(scale=0.1, size=(8, 8, 8)).astype(np.float32)
        net = _tiny_net(5, base_channels=4)
        cfg = TrainConfig(epochs=20, batch_size=2, noise=NoiseConfig((0.0, 0.0)))
        _, hist = train_loop([(field, chi), (field, chi)], net, cfg)
        assert hist.epoch_mean_loss[-1] < 0.8 * hist.epoch_mean_loss[0]

    def test_checkpoint_cadence(self, rng):
        saved = []
        net = _tiny_net(6)
        cfg = TrainConfig(epochs=4, batch_size=4, checkpoint_every=2,
                          noise=NoiseConfig((0.0, 0.0)))
        train_loop(_tiny_dataset(rng), net, cfg, checkpoint_fn=lambda e, n: saved.append(e))
        assert saved == [2, 4]

    def test_nonfinite_loss_aborts(self, rng):
        net = _tiny_net(7)
        net.params["fusion/weight"].data[:] = np.inf
        cfg = TrainConfig(epochs=1, batch_size=2, noise=NoiseConfig((0.0, 0.0)))
        with pytest.raises(Exception):
            train_loop(_tiny_dataset(rng), net, cfg)

    def test_gradient_reaches_every_replica(self, rng):
        # every parameter tensor in every iteration replica sees gradient
        net = _tiny_net(8, base_channels=4)
        x = Tensor(rng.normal(scale=0.1, size=(2, 1, 16, 16, 16)).astype(np.float32))
        gt = Tensor(rng.normal(scale=0.1, size=(2, 1, 16, 16, 16)).astype(np.float32))
        chi_final, latents = ir2_forward(x, net, mode="train")
        backward(compute_loss(latents, chi_final, gt, 0.5))
        touched = 0
        for p in net.parameters():
            assert p.tensor.grad is not None, p.name
            touched += int(np.any(p.tensor.grad != 0))
        assert touched / len(net.parameters()) > 0.99
        zero_grad(net.parameters())

    def test_epoch_bounds_validated(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)
        with pytest.raises(ConfigError):
            TrainConfig(epochs=101)
