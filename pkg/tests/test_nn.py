import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from astra_lab import nn
from astra_lab.checkpoint import (
    CheckpointError, load_checkpoint, load_into, save_checkpoint,
)
from astra_lab.numerics import Parameter, Tape, check_gradients, ops


def make_rng(seed=0):
    return np.random.default_rng(seed)


class TestMlp:
    def test_zero_params_give_zero_output(self):
        mlp = nn.Mlp([3, 4, 2], make_rng())
        for p in mlp.parameters():
            p.value[...] = 0.0
        y = mlp(np.ones((5, 3)))
        assert np.array_equal(y.value, np.zeros((5, 2)))

    def test_identity_single_layer(self):
        mlp = nn.Mlp([3, 3], make_rng())
        mlp.W[0].value[...] = np.eye(3)
        mlp.b[0].value[...] = 0.0
        x = make_rng(1).normal(size=(4, 3))
        assert np.allclose(mlp(x).value, x)

    def test_matches_hand_computed_two_layer(self):
        rng = make_rng(2)
        mlp = nn.Mlp([2, 3, 1], rng)
        x = rng.normal(size=(1, 2))
        # independent scalar evaluation
        h = np.tanh(x @ mlp.W[0].value + mlp.b[0].value)
        y_ref = h @ mlp.W[1].value + mlp.b[1].value
        assert np.max(np.abs(mlp(x).value - y_ref)) < 1e-12

    def test_width_mismatch_raises(self):
        mlp = nn.Mlp([3, 2], make_rng())
        with pytest.raises(ValueError, match="width"):
            mlp(np.ones((1, 4)))

    def test_bad_spec_rejected(self):
        with pytest.raises(ValueError):
            nn.Mlp([3], make_rng())
        with pytest.raises(ValueError):
            nn.Mlp([3, 0, 1], make_rng())

    def test_zero_last_makes_initial_output_zero(self):
        mlp = nn.Mlp([4, 8, 3], make_rng(3), zero_last=True)
        y = mlp(make_rng(4).normal(size=(6, 4)))
        assert np.array_equal(y.value, np.zeros((6, 3)))

    def test_gradient_check(self):
        rng = make_rng(5)
        mlp = nn.Mlp([3, 5, 2], rng)
        x = rng.normal(size=(4, 3))

        def loss():
            return ops.sum(ops.square(mlp(x)))

        assert check_gradients(loss, mlp.parameters()) <= 1e-4


class TestGruCell:
    def test_zero_params_zero_state_stay_zero(self):
        # update gate 0.5, candidate 0 -> h stays exactly 0
        gru = nn.GruCell(3, 4, make_rng())
        for p in gru.parameters():
            p.value[...] = 0.0
        h = gru.step(np.zeros((2, 4)), np.ones((2, 3)))
        # candidate is tanh(Wx)=0 only when W=0; with x arbitrary still 0
        assert np.array_equal(h.value, np.zeros((2, 4)))

    def test_hidden_stays_in_open_unit_interval(self):
        rng = make_rng(6)
        gru = nn.GruCell(2, 8, rng)
        h = gru.zero_state(1)
        for _ in range(1000):
            x = rng.normal(scale=3.0, size=(1, 2))
            h = gru.step(h, x).value
            assert np.all(h > -1.0) and np.all(h < 1.0)

    def test_size_mismatch(self):
        gru = nn.GruCell(3, 4, make_rng())
        with pytest.raises(ValueError, match="input size"):
            gru.step(np.zeros((1, 4)), np.zeros((1, 2)))
        with pytest.raises(ValueError, match="hidden size"):
            gru.step(np.zeros((1, 3)), np.zeros((1, 3)))

    def test_gradient_through_20_unrolled_steps(self):
        rng = make_rng(7)
        gru = nn.GruCell(2, 4, rng)
        xs = rng.normal(size=(20, 1, 2))

        def loss():
            h = ops.as_node(gru.zero_state(1))
            for t in range(20):
                h = gru.step(h, xs[t])
            return ops.sum(ops.square(h))

        assert check_gradients(loss, gru.parameters()) <= 1e-4


class TestGaussianHead:
    def test_log_var_always_within_clamp(self):
        rng = make_rng(8)
        head = nn.GaussianHead(3, 2, 8, rng)
        # inflate weights to push pre-clamp values out of range
        for p in head.parameters():
            p.value *= 50.0
        _, log_var = head(rng.normal(scale=5.0, size=(64, 3)))
        assert np.all(log_var.value >= nn.LOG_VAR_MIN)
        assert np.all(log_var.value <= nn.LOG_VAR_MAX)

    def test_gradient_check(self):
        rng = make_rng(9)
        head = nn.GaussianHead(2, 2, 4, rng)
        x = rng.normal(size=(3, 2))
        z = rng.normal(size=(3, 2))

        def loss():
            mu, log_var = head(x)
            return nn.gaussian_nll(z, mu, log_var)

        assert check_gradients(loss, head.parameters()) <= 1e-4


class TestGaussianNll:
    def test_unit_gaussian_at_mean(self):
        val = nn.gaussian_nll(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
        assert val.value == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-12)

    def test_unit_gaussian_one_sigma_off(self):
        val = nn.gaussian_nll(np.ones((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
        assert val.value == pytest.approx(0.5 * math.log(2 * math.pi) + 0.5, abs=1e-12)

    def test_matches_independent_density_evaluation(self):
        rng = make_rng(10)
        z = rng.normal(size=(1, 3))
        mu = rng.normal(size=(1, 3))
        log_var = rng.uniform(-1, 1, size=(1, 3))
        sigma = np.exp(0.5 * log_var)
        dens = np.prod(np.exp(-0.5 * ((z - mu) / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi)))
        assert nn.gaussian_nll(z, mu, log_var).value == pytest.approx(-np.log(dens))

    def test_shape_and_finiteness_errors(self):
        with pytest.raises(ValueError):
            nn.gaussian_nll(np.zeros((1, 2)), np.zeros((1, 3)), np.zeros((1, 3)))
        with pytest.raises(FloatingPointError):
            nn.gaussian_nll(np.array([[np.nan]]), np.zeros((1, 1)), np.zeros((1, 1)))

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_minimized_at_mu_equals_z(self, seed):
        # gradient w.r.t. mu vanishes at mu = z
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(1, 3))
        mu = Parameter(z.copy(), "mu")
        log_var = rng.uniform(-1, 1, size=(1, 3))
        with Tape() as tape:
            loss = nn.gaussian_nll(z, ops.leaf(mu), log_var)
            grads = tape.gradients(loss, [mu])
        assert np.allclose(grads[mu], 0.0, atol=1e-12)


class TestCheckpoint:
    def test_round_trip_preserves_forward(self, tmp_path):
        rng = make_rng(11)
        mlp = nn.Mlp([3, 8, 2], rng)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {n: p.value for n, p in mlp.named_parameters().items()})
        x = rng.normal(size=(4, 3))
        y_before = mlp(x).value.copy()
        for p in mlp.parameters():
            p.value[...] = 0.0
        load_into(path, mlp.named_parameters())
        assert np.max(np.abs(mlp(x).value - y_before)) < 1e-6

    def test_empty_parameter_list(self, tmp_path):
        path = tmp_path / "empty.ckpt"
        save_checkpoint(path, {})
        assert load_checkpoint(path) == {}

    def test_corrupted_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        save_checkpoint(path, {"w": np.zeros(2)})
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="bad header"):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "trunc.ckpt"
        save_checkpoint(path, {"w": np.arange(16.0)})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "ver.ckpt"
        save_checkpoint(path, {})
        raw = bytearray(path.read_bytes())
        raw[9] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_name_mismatch(self, tmp_path):
        path = tmp_path / "names.ckpt"
        save_checkpoint(path, {"other": np.zeros(2)})
        target = {"w": Parameter(np.zeros(2), "w")}
        with pytest.raises(CheckpointError, match="name mismatch"):
            load_into(path, target)
