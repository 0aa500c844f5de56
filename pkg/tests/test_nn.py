import math

import numpy as np
import pytest

from beamfocus.autodiff import Tensor, log_softmax, minimum, select_rows, softmax
from beamfocus.errors import DimensionMismatch, ShapeMismatch
from beamfocus.nn import (
    Adam,
    GaussianHead,
    ManagerNet,
    Mlp,
    build_manager_tokens,
    categorical_entropy,
    categorical_log_probs,
    categorical_sample,
    load_checkpoint,
    save_checkpoint,
    tokens_from_global_obs,
)


def fd_check(loss_fn, params, rng, samples_per_param=6, step=1e-5, tol=1e-4):
    """Central-difference check on randomly sampled components of each tensor."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    for p in params:
        flat = p.data.ravel()
        gflat = p.grad.ravel()
        count = min(samples_per_param, flat.size)
        for i in rng.choice(flat.size, size=count, replace=False):
            keep = flat[i]
            flat[i] = keep + step
            up = float(loss_fn().data)
            flat[i] = keep - step
            down = float(loss_fn().data)
            flat[i] = keep
            fd = (up - down) / (2.0 * step)
            denom = max(abs(fd), abs(gflat[i]), 1e-6)
            assert abs(gflat[i] - fd) / denom < tol, (
                f"analytic {gflat[i]!r} vs fd {fd!r}"
            )


class TestAutodiffBasics:
    def test_broadcast_add_mul(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3,)), requires_grad=True)
        fd_check(lambda: ((a * b + b) ** 2.0).sum(), [a, b], rng)

    def test_matmul_batched(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        fd_check(lambda: ((a @ w).relu()).sum(), [a, w], rng)

    def test_softmax_log_softmax(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        fd_check(lambda: (softmax(x * w, axis=-1) * w).sum(), [x, w], rng)
        fd_check(lambda: (log_softmax(x * w, axis=-1)).mean(), [x, w], rng)

    def test_minimum_and_clip(self):
        rng = np.random.default_rng(3)
        a = Tensor(rng.normal(size=(50,)), requires_grad=True)
        b = Tensor(rng.normal(size=(50,)), requires_grad=True)
        fd_check(lambda: minimum(a * 2.0, b).sum(), [a, b], rng)
        fd_check(lambda: (a.clip(-0.5, 0.5) * b).sum(), [a, b], rng)

    def test_select_rows(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        idx = rng.integers(0, 4, size=6)
        fd_check(lambda: (select_rows(x, idx) ** 2.0).sum(), [x], rng)

    def test_exp_log(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.uniform(0.5, 2.0, size=(10,)), requires_grad=True)
        fd_check(lambda: (x.exp() + x.log()).sum(), [x], rng)


class TestMlp:
    def test_zeroed_final_layer_outputs_zero(self):
        rng = np.random.default_rng(0)
        net = Mlp(4, (8,), 3, rng)
        net.weights[-1].data[:] = 0.0
        out = net(rng.normal(size=(5, 4)))
        assert np.array_equal(out.data, np.zeros((5, 3)))

    def test_identity_linear(self):
        rng = np.random.default_rng(0)
        net = Mlp(3, (), 3, rng)
        net.weights[0].data = np.eye(3)
        x = rng.normal(size=(7, 3))
        assert np.allclose(net(x).data, x, atol=1e-15)

    def test_shape_mismatch(self):
        net = Mlp(4, (8,), 3, np.random.default_rng(0))
        with pytest.raises(ShapeMismatch):
            net(np.zeros((5, 6)))

    def test_gradient_check_actor_shape(self):
        rng = np.random.default_rng(7)
        net = Mlp(9, (256, 256), 3, rng, out_scale=0.01)
        x = rng.normal(size=(4, 9))
        target = rng.normal(size=(4, 3))
        fd_check(lambda: ((net(x) - target) ** 2.0).mean(), list(net.params().values()), rng)

    def test_gradient_check_many_instances(self):
        for seed in range(5):
            rng = np.random.default_rng(100 + seed)
            net = Mlp(6, (32, 32), 2, rng)
            x = rng.normal(size=(3, 6))
            fd_check(
                lambda: (net(x) ** 2.0).sum(), list(net.params().values()), rng,
                samples_per_param=4,
            )


class TestManager:
    def test_logit_count(self):
        net = ManagerNet(2, 2, np.random.default_rng(0))
        tokens = build_manager_tokens(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 3)))
        assert net(tokens).data.shape == (1, 4)

    def test_zero_params_give_uniform_logits(self):
        net = ManagerNet(2, 2, np.random.default_rng(0))
        for p in net.params().values():
            p.data[:] = 0.0
        tokens = build_manager_tokens(
            np.random.default_rng(1).normal(size=(2, 3)), np.zeros((2, 3)), np.ones((2, 3))
        )
        logits = net(tokens).data[0]
        assert np.allclose(logits, logits[0], atol=1e-15)

    def test_gradient_check(self):
        rng = np.random.default_rng(11)
        net = ManagerNet(2, 2, rng, embed_dim=16, fc_dim=32)
        tokens = tokens_from_global_obs(rng.normal(size=18), 2, 2)
        target = rng.integers(0, 4, size=1)
        fd_check(
            lambda: -select_rows(categorical_log_probs(net(tokens)), target).sum(),
            list(net.params().values()),
            rng,
        )

    def test_tokens_roundtrip_layout(self):
        rng = np.random.default_rng(3)
        users = rng.normal(size=(2, 3))
        refs = rng.normal(size=(2, 3))
        focals = rng.normal(size=(2, 3))
        obs = np.concatenate([users.ravel(), refs.ravel(), focals.ravel()])
        tokens = tokens_from_global_obs(obs, 2, 2)[0]
        assert np.array_equal(tokens[0, 0:3], users[0])
        assert np.array_equal(tokens[2, 0:3], refs[0])
        assert np.array_equal(tokens[2, 3:6], focals[0])
        assert tokens[0, 6] == 1.0 and tokens[2, 7] == 1.0


class TestHeads:
    def test_flat_categorical(self):
        logits = Tensor(np.zeros((1, 2)))
        logp = categorical_log_probs(logits).data[0]
        assert np.allclose(np.exp(logp), [0.5, 0.5], atol=1e-12)
        assert categorical_entropy(logits).data[0] == pytest.approx(math.log(2.0), abs=1e-12)

    def test_log_probs_normalize(self):
        rng = np.random.default_rng(0)
        logits = Tensor(rng.normal(size=(10, 7)) * 5)
        total = np.exp(categorical_log_probs(logits).data).sum(axis=-1)
        assert np.allclose(total, 1.0, atol=1e-10)

    def test_categorical_sampling_frequencies(self):
        rng = np.random.default_rng(5)
        logits = np.log(np.array([0.2, 0.5, 0.3]))
        draws = np.array([categorical_sample(logits, rng) for _ in range(20000)])
        freq = np.bincount(draws, minlength=3) / len(draws)
        assert np.allclose(freq, [0.2, 0.5, 0.3], atol=0.02)

    def test_gaussian_entropy_formula(self):
        head = GaussianHead(3, init_log_std=math.log(0.3))
        expected = 3 * (math.log(0.3) + 0.5 * math.log(2 * math.pi * math.e))
        assert head.entropy().data == pytest.approx(expected, abs=1e-12)

    def test_gaussian_entropy_monotone_in_std(self):
        values = [
            GaussianHead(3, init_log_std=ls).entropy().data
            for ls in (0.0, -1.0, -2.0, -5.0, -10.0)
        ]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_gaussian_sample_mean(self):
        head = GaussianHead(3, init_log_std=math.log(0.3))
        rng = np.random.default_rng(17)
        mean = np.array([0.4, -1.2, 2.0])
        n = 100_000
        draws = np.array([head.sample(mean, rng) for _ in range(n)])
        bound = 3 * 0.3 / math.sqrt(n)
        assert np.all(np.abs(draws.mean(axis=0) - mean) < bound)

    def test_gaussian_log_prob_matches_formula(self):
        head = GaussianHead(3, init_log_std=math.log(0.5))
        rng = np.random.default_rng(2)
        mean = rng.normal(size=(4, 3))
        acts = rng.normal(size=(4, 3))
        got = head.log_prob(Tensor(mean), acts).data
        var = 0.25
        expected = (
            -0.5 * ((acts - mean) ** 2 / var) - math.log(0.5) - 0.5 * math.log(2 * math.pi)
        ).sum(axis=-1)
        assert np.allclose(got, expected, atol=1e-12)

    def test_gaussian_log_prob_gradients(self):
        rng = np.random.default_rng(8)
        head = GaussianHead(3)
        mean = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        acts = rng.normal(size=(5, 3))
        fd_check(lambda: head.log_prob(mean, acts).sum(), [mean, head.log_std], rng)


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1)
        p.grad = np.zeros(2)
        opt.step()
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_first_step_closed_form(self):
        p = Tensor(np.array([1.0, 1.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.01)
        g = np.array([0.3, -4.0])
        p.grad = g.copy()
        opt.step()
        expected = np.array([1.0, 1.0]) - 0.01 * g / (np.abs(g) + 1e-8)
        assert np.allclose(p.data, expected, atol=1e-12)

    def test_matches_canonical_recurrence(self):
        rng = np.random.default_rng(0)
        p = Tensor(rng.normal(size=(4,)), requires_grad=True)
        opt = Adam({"p": p}, lr=0.003)
        ref = p.data.copy()
        m = np.zeros(4)
        v = np.zeros(4)
        for t in range(1, 6):
            g = rng.normal(size=4)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.003 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            p.grad = g.copy()
            opt.step()
            assert np.allclose(p.data, ref, atol=1e-12)

    def test_quadratic_descent(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=2.0e-4)
        history = [abs(float(p.data[0]))]
        for _ in range(100):
            p.grad = 2.0 * p.data
            opt.step()
            history.append(abs(float(p.data[0])))
        assert all(a > b for a, b in zip(history, history[1:]))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        net = Mlp(4, (8,), 2, rng)
        head = GaussianHead(2)
        opt = Adam({**net.params(), **head.params()})
        x = rng.normal(size=(3, 4))
        ((net(x) ** 2.0).sum()).backward()
        opt.step()
        gen = np.random.default_rng(99)
        gen.random(5)
        path = tmp_path / "ckpt.json"
        save_checkpoint(
            path,
            {"actor": net.params(), "head": head.params()},
            {"opt": opt},
            rng_state=gen.bit_generator.state,
            meta={"note": "test"},
        )

        net2 = Mlp(4, (8,), 2, np.random.default_rng(1))
        head2 = GaussianHead(2)
        opt2 = Adam({**net2.params(), **head2.params()})
        blob = load_checkpoint(path, {"actor": net2.params(), "head": head2.params()}, {"opt": opt2})
        assert np.array_equal(net2.weights[0].data, net.weights[0].data)
        assert np.array_equal(head2.log_std.data, head.log_std.data)
        assert opt2.t == opt.t
        assert np.array_equal(opt2.m["w0"], opt.m["w0"])
        gen2 = np.random.default_rng(0)
        gen2.bit_generator.state = blob["rng_state"]
        assert gen2.random() == gen.random()

    def test_shape_mismatch_rejected(self, tmp_path):
        rng = np.random.default_rng(0)
        net = Mlp(4, (8,), 2, rng)
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, {"actor": net.params()})
        other = Mlp(4, (16,), 2, rng)
        with pytest.raises(DimensionMismatch):
            load_checkpoint(path, {"actor": other.params()})
