import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiercva.regressor import (ACTIVATIONS, ConfigurationError, NetworkParams, TrainConfig, TrainedModelSequence,
                               TrainingDiverged, backward_learn, forward, init_network, loss, loss_and_grad,
                               make_batches, refit_output_layer, rescale_output, train_base)
from hiercva.rng import RandomStream


def random_net(d=3, h=2, u=5, seed=0, activation="tanh", mu=0.3):
    net = init_network(d, h, u, RandomStream(seed), activation, mu)
    rng = np.random.default_rng(seed)
    net.biases = [rng.normal(size=b.shape) * 0.3 for b in net.biases]
    return net


def flat_grad(net, z, y, pos):
    _, dW, db, dmu = loss_and_grad(net, z, y, pos)
    return np.concatenate([g.ravel() for pair in zip(dW, db) for g in pair] + [[dmu]])


def fd_grad(net, z, y, pos, h=1e-6):
    theta = net.flat()
    out = np.empty_like(theta)
    for j in range(len(theta)):
        e = np.zeros_like(theta)
        e[j] = h
        out[j] = (loss(net.with_flat(theta + e), z, y, pos) - loss(net.with_flat(theta - e), z, y, pos)) / (2 * h)
    return out


class TestForward:
    def test_zero_network_is_constant(self):
        net = init_network(4, 2, 8, RandomStream(0), mu=2.5)
        net.weights = [np.zeros_like(w) for w in net.weights]
        z = np.random.default_rng(0).normal(size=(50, 4))
        np.testing.assert_array_equal(forward(net, z), 2.5)
        np.testing.assert_array_equal(forward(net, z, positive=True), 2.5)

    def test_positive_head_floor(self):
        net = random_net(mu=0.0)
        z = np.random.default_rng(1).normal(size=(1000, 3)) * 5
        assert np.all(forward(net, z, positive=True) >= 0)
        net.mu = -0.7
        assert np.all(forward(net, z, positive=True) >= -0.7)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            forward(random_net(d=3), np.zeros((4, 2)))

    @pytest.mark.parametrize("activation", sorted(set(ACTIVATIONS) - {"relu"}))
    @pytest.mark.parametrize("pos", [False, True])
    def test_gradient_matches_finite_differences(self, activation, pos):
        rng = np.random.default_rng(2)
        for point in range(10):
            net = random_net(seed=point, activation=activation)
            z = rng.normal(size=(12, 3))
            y = rng.normal(size=12)
            if pos:
                f = forward(net, z, positive=False) - net.mu
                if np.min(np.abs(f)) < 1e-4:  # stay clear of ReLU-head kinks
                    continue
            g, fd = flat_grad(net, z, y, pos), fd_grad(net, z, y, pos)
            assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(fd)

    def test_relu_gradient_away_from_kinks(self):
        net = random_net(activation="relu", seed=4)
        z = np.random.default_rng(3).normal(size=(10, 3))
        y = np.ones(10)
        g, fd = flat_grad(net, z, y, False), fd_grad(net, z, y, False, h=1e-7)
        assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(fd)


class TestMakeBatches:
    def test_two_by_two(self):
        b = make_batches(2, 2, 2)
        assert [len(x) for x in b] == [2, 2]
        assert sorted(np.concatenate(b)) == [0, 1, 2, 3]

    def test_single_batch(self):
        np.testing.assert_array_equal(make_batches(3, 5, 1)[0], np.arange(15))

    def test_enumeration(self):
        b = make_batches(4, 8, 4)
        assert [len(x) for x in b] == [8] * 4
        # row-major flat index k*N + l: batch j holds exactly path j's replicas
        for j, idx in enumerate(b):
            assert {(int(f) // 8, int(f) % 8) for f in idx} == {(j, l) for l in range(8)}

    def test_divisibility(self):
        with pytest.raises(ConfigurationError):
            make_batches(3, 3, 2)

    @given(M=st.integers(1, 40), N=st.integers(1, 40), nb=st.integers(1, 40))
    def test_partition(self, M, N, nb):
        if (M * N) % nb:
            return
        b = make_batches(M, N, nb)
        assert len({len(x) for x in b}) == 1
        np.testing.assert_array_equal(np.sort(np.concatenate(b)), np.arange(M * N))


class TestRefit:
    def test_fixed_point(self):
        net = random_net()
        z = np.random.default_rng(5).normal(size=(200, 3))
        y = forward(net, z, positive=False)
        new = refit_output_layer(net, z, y, ridge=1e-12)
        assert abs(loss(new, z, y, False) - loss(net, z, y, False)) < 1e-10
        np.testing.assert_allclose(new.weights[-1], net.weights[-1], atol=1e-6)

    def test_normal_equations_width_one(self):
        net = init_network(1, 1, 1, RandomStream(6), mu=0.2)
        net.weights[0][:] = 0.8
        net.biases[0][:] = -0.1
        z = np.linspace(-2, 2, 41)[:, None]
        y = np.sin(z[:, 0]) + 0.5
        h = np.tanh(0.8 * z[:, 0] - 0.1)
        A = np.array([[h @ h, h.sum()], [h.sum(), len(h)]])
        rhs = np.array([h @ (y - 0.2), (y - 0.2).sum()])
        w, b = np.linalg.solve(A, rhs)
        new = refit_output_layer(net, z, y, ridge=0.0)
        assert new.weights[-1][0, 0] == pytest.approx(w, abs=1e-10)
        assert new.biases[-1][0] == pytest.approx(b, abs=1e-10)

    def test_never_increases_mse(self):
        rng = np.random.default_rng(7)
        for inst in range(20):
            net = random_net(d=4, u=6, seed=100 + inst)
            z = rng.normal(size=(300, 4))
            y = rng.normal(size=300) + z[:, 0] ** 2
            before = loss(net, z, y, False)
            after = loss(refit_output_layer(net, z, y), z, y, False)
            assert after <= before + 1e-8


class TestTrainBase:
    cfg = TrainConfig(epochs=8, n_batches=10, width=16, learning_rate=1e-2)

    def test_constant_labels(self):
        z = np.random.default_rng(8).normal(size=(500, 2))
        y = np.full(500, 3.0)
        init = init_network(2, 2, 16, RandomStream(0), mu=0.0)
        best, rep = train_base(z, y, make_batches(500, 1, 10), self.cfg, init)
        assert rep.best_loss <= loss(NetworkParams([np.zeros_like(w) for w in init.weights],
                                                   [np.zeros_like(b) for b in init.biases], 3.0), z, y, True) + 1e-6
        assert best.positive_head

    def test_best_tracking_is_prefix_minimum(self):
        rng = np.random.default_rng(9)
        z = rng.normal(size=(400, 2))
        y = np.abs(z[:, 0]) + 0.3 * rng.normal(size=400)
        best, rep = train_base(z, y, make_batches(400, 1, 10), self.cfg, init_network(2, 2, 16, RandomStream(1)))
        trace = np.array(rep.epoch_losses)
        assert rep.best_loss == trace.min() and rep.best_epoch == int(np.argmin(trace)) + 1
        assert loss(best, z, y, True) == pytest.approx(rep.best_loss, rel=1e-12)
        prefix = np.minimum.accumulate(trace)
        assert np.all(np.diff(prefix) <= 0)

    def test_quadratic_toy(self):
        rng = np.random.default_rng(10)
        z = rng.uniform(-1, 1, size=(10_000, 1))
        y = z[:, 0] ** 2 + 0.1 * rng.normal(size=10_000)
        cfg = TrainConfig(epochs=20, n_batches=50, width=32, learning_rate=5e-3)
        init = init_network(1, 2, 32, RandomStream(2), mu=float(y.mean()))
        best, _ = train_base(z, y, make_batches(10_000, 1, 50), cfg, init)
        zt = rng.uniform(-1, 1, size=(10_000, 1))
        yt = zt[:, 0] ** 2 + 0.1 * rng.normal(size=10_000)
        assert np.mean((forward(best, zt) - yt) ** 2) <= 1.1 * 0.01

    def test_outputs_stay_nonnegative(self):
        # sparse nonnegative labels pull a free offset below zero
        rng = np.random.default_rng(13)
        z = rng.normal(size=(2000, 2))
        y = np.where(z[:, 0] > 1.5, 50.0 * z[:, 0], 0.0)
        init = init_network(2, 2, 16, RandomStream(3), mu=-1.0)
        best, _ = train_base(z, y, make_batches(2000, 1, 10), self.cfg, init)
        assert best.mu >= 0
        assert forward(best, rng.normal(size=(5000, 2))).min() >= 0

    def test_divergence_is_reported(self):
        z = np.random.default_rng(11).normal(size=(100, 2))
        y = z[:, 0] * 1e200  # squared residuals overflow
        cfg = TrainConfig(epochs=2, n_batches=2, optimizer="sgd", learning_rate=1.0, width=4)
        with pytest.raises(TrainingDiverged, match="learning rate"):
            with np.errstate(all="ignore"):
                train_base(z, y, make_batches(100, 1, 2), cfg, init_network(2, 2, 4, RandomStream(0)))

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(epochs=1)
        with pytest.raises(ConfigurationError):
            TrainConfig(optimizer="rmsprop")


class TestRescale:
    @pytest.mark.parametrize("pos", [False, True])
    def test_exact(self, pos):
        net = random_net(mu=0.4)
        z = np.random.default_rng(12).normal(size=(100, 3))
        np.testing.assert_allclose(forward(rescale_output(net, 37.5), z, positive=pos),
                                   37.5 * forward(net, z, positive=pos), rtol=1e-13)


def stationary_source(i, M=2000, N=1):
    # identical label law at every step
    rng = np.random.default_rng(1000 + i)
    z = rng.normal(size=(M * N, 2))
    y = np.exp(0.5 * z[:, 0]) + 0.2 * rng.normal(size=M * N) + 1.0
    return z, 1e4 * y


class TestBackwardLearn:
    cfg = TrainConfig(epochs=8, n_batches=20, width=16)

    def test_warm_start_does_not_hurt(self):
        model = backward_learn(stationary_source, range(1, 6), self.cfg, 2000, 1)
        rep = model.reports
        cold = rep[5].best_loss * rep[5].label_scale ** 2
        for i in range(1, 5):
            assert rep[i].best_loss * rep[i].label_scale ** 2 <= 1.05 * cold

    def test_single_step_is_one_train_base(self):
        model = backward_learn(stationary_source, [1], self.cfg, 2000, 1)
        z, y = stationary_source(1)
        sc = model.scalers[1]
        s = model.reports[1].label_scale
        init = init_network(2, 2, 16, RandomStream(self.cfg.seed).split(1), mu=float(np.mean(y / s)))
        best, _ = train_base(sc(z), y / s, make_batches(2000, 1, 20), self.cfg, init)
        np.testing.assert_allclose(model.predict(1, z), s * forward(best, sc(z)), rtol=1e-12)

    def test_deterministic_and_serialisable(self, tmp_path):
        a = backward_learn(stationary_source, [1, 2], self.cfg, 2000, 1)
        b = backward_learn(stationary_source, [1, 2], self.cfg, 2000, 1)
        a.save(tmp_path / "a.npz")
        b.save(tmp_path / "b.npz")
        assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
        back = TrainedModelSequence.load(tmp_path / "a.npz")
        z, _ = stationary_source(7)
        for i in (1, 2):
            np.testing.assert_array_equal(back.predict(i, z), a.predict(i, z))

    def test_passthrough_columns_not_scaled(self):
        def src(i):
            rng = np.random.default_rng(i)
            x = (rng.uniform(size=(400, 1)) < 0.3).astype(float)
            z = np.hstack([x, rng.normal(size=(400, 1)) * 5 + 2])
            return z, 1 + x[:, 0] + rng.normal(size=400) * 0.1
        model = backward_learn(src, [1], TrainConfig(epochs=2, n_batches=4, width=4), 400, 1, n_passthrough=1)
        assert model.scalers[1].mean[0] == 0 and model.scalers[1].scale[0] == 1
        assert model.scalers[1].scale[1] == pytest.approx(5, rel=0.1)
