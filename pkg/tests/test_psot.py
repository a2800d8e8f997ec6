import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quantlab.activations import ActivationBatch, SyntheticSpec, generate_synthetic
from quantlab.errors import ConfigError, FormatError
from quantlab.infometrics import dispersion_bn
from quantlab.psot import (
    OrthoTransform,
    PsotConfig,
    cayley_step,
    centering_project,
    grad_loss,
    hadamard,
    loss_ps,
    orthogonality_error,
    peak_stats,
    random_orthogonal,
    read_transform,
    train_psot,
    weighted_loss_and_grad,
    write_transform,
)
from quantlab.quantizer import fake_quantize


def fd_grad(x, R, T, h=1e-5):
    G = np.zeros_like(R)
    for i in range(R.shape[0]):
        for j in range(R.shape[1]):
            P, M = R.copy(), R.copy()
            P[i, j] += h
            M[i, j] -= h
            G[i, j] = (loss_ps(x, P, T) - loss_ps(x, M, T)) / (2 * h)
    return G


def outlier_split(seed):
    """32 calibration samples of 16 tokens and 128 held-out tokens."""
    spec = SyntheticSpec(dim=64, n_tokens=640, outlier_rate=0.01, outlier_gain=20, seed=seed)
    X = generate_synthetic(spec).data
    calib = [ActivationBatch(part, sample_id=i) for i, part in enumerate(np.split(X[:512], 32))]
    return calib, X[512:]


class TestHadamard:
    def test_base_case(self):
        np.testing.assert_allclose(hadamard(2), np.array([[1, 1], [1, -1]]) / math.sqrt(2))

    @pytest.mark.parametrize("d", [2, 4, 64])
    def test_orthogonal(self, d):
        assert orthogonality_error(hadamard(d)) < 1e-12

    def test_spreads_unit_vector(self):
        y = np.eye(64)[0] @ hadamard(64)
        np.testing.assert_allclose(np.abs(y), 1 / 8)
        assert dispersion_bn(y) == pytest.approx(1.0)

    @pytest.mark.parametrize("d", [0, 1, 6, 12])
    def test_rejects_non_power_of_two(self, d):
        with pytest.raises(ConfigError):
            hadamard(d)


class TestCentering:
    def test_hand_cases(self):
        np.testing.assert_array_equal(centering_project([1.0, 1.0]), [0, 0])
        np.testing.assert_array_equal(centering_project([2.0, 0.0]), [1, -1])

    def test_idempotent(self, rng):
        y = rng.normal(size=10)
        np.testing.assert_allclose(centering_project(centering_project(y)), centering_project(y), atol=1e-15)


class TestLoss:
    def test_hand_case(self):
        assert loss_ps([2.0, 0.0], np.eye(2), 1.0) == pytest.approx(math.sqrt(0.5))

    def test_constant_token(self):
        assert loss_ps(np.full(8, 3.0), np.eye(8), 2.0) == pytest.approx(0.0, abs=1e-14)

    def test_uniform_limit(self, rng):
        x = rng.normal(size=8)
        y = centering_project(x)
        assert loss_ps(x, np.eye(8), 1e6) == pytest.approx(np.linalg.norm(y) / 8, abs=1e-6)

    def test_rows_and_transform(self, rng):
        X = rng.normal(size=(5, 8))
        T = OrthoTransform.block_hadamard(8, 2)
        np.testing.assert_allclose(loss_ps(X, T, 2.0), [loss_ps(x, T.dense(), 2.0) for x in X])

    def test_dim_mismatch(self):
        with pytest.raises(ConfigError):
            loss_ps(np.ones(3), np.eye(4), 1.0)


class TestGradient:
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_finite_differences(self, seed):
        r = np.random.default_rng(seed)
        x = r.normal(size=8) * r.uniform(0.5, 3.0)
        R = random_orthogonal(8, r)
        T = r.uniform(0.5, 3.0)
        an = grad_loss(x, R, T)
        fd = fd_grad(x, R, T)
        np.testing.assert_allclose(an, fd, rtol=1e-4, atol=1e-4 * np.abs(fd).max())

    def test_constant_token_zero_gradient(self):
        np.testing.assert_array_equal(grad_loss(np.full(4, 2.0), np.eye(4), 1.0), 0.0)

    def test_shift_only_adds_rank_one_term(self, rng):
        # centering removes the shift, so the token-space gradient g is unchanged
        # and dL/dR = outer(x, g) moves by exactly outer(c·1, g)
        x = rng.normal(size=8)
        a = grad_loss(x, np.eye(8), 2.0)
        b = grad_loss(x + 5.0, np.eye(8), 2.0)
        assert loss_ps(x + 5.0, np.eye(8), 2.0) == pytest.approx(loss_ps(x, np.eye(8), 2.0), abs=1e-14)
        diff = (b - a) / 5.0
        np.testing.assert_allclose(diff, np.tile(diff[0], (8, 1)), atol=1e-12)
        assert abs(diff[0].sum()) < 1e-12

    def test_block_gradient_matches_dense(self, rng):
        X = rng.normal(size=(6, 8))
        T = OrthoTransform.block_random(8, 2, rng)
        blocks = grad_loss(X, T, 2.0)
        dense = grad_loss(X, T.dense(), 2.0)
        np.testing.assert_allclose(blocks[0], dense[:4, :4], atol=1e-12)
        np.testing.assert_allclose(blocks[1], dense[4:, 4:], atol=1e-12)

    def test_weighted_mean(self, rng):
        X = rng.normal(size=(4, 8))
        T = OrthoTransform.block_hadamard(8, 1)
        w = np.array([1.0, 2.0, 1.0, 3.0])
        loss, grads = weighted_loss_and_grad(X, w, T, 2.0)
        assert loss == pytest.approx(np.dot(w, loss_ps(X, T, 2.0)) / 4)
        expected = sum(wi * grad_loss(x, T.dense(), 2.0) for wi, x in zip(w, X)) / 4
        np.testing.assert_allclose(grads[0], expected, atol=1e-12)


class TestCayley:
    def test_zero_gradient(self, rng):
        R = random_orthogonal(6, rng)
        np.testing.assert_allclose(cayley_step(R, np.zeros((6, 6)), 1.0), R, atol=1e-15)

    @pytest.mark.parametrize("lr", [0.1, 1.0, 2.0])
    def test_stays_orthogonal(self, rng, lr):
        R = random_orthogonal(8, rng)
        R2 = cayley_step(R, rng.normal(size=(8, 8)), lr)
        assert orthogonality_error(R2) < 1e-10

    def test_descent(self, rng):
        x = rng.normal(size=8)
        x[2] *= 10
        R = random_orthogonal(8, rng)
        G = grad_loss(x, R, 2.0)
        assert loss_ps(x, cayley_step(R, G, 1e-3), 2.0) < loss_ps(x, R, 2.0)

    def test_step_cap(self, rng):
        R = random_orthogonal(8, rng)
        G = 100 * rng.normal(size=(8, 8))
        capped = cayley_step(R, G, 2.0, max_step=0.1)
        A = G @ R.T - R @ G.T
        lr = 0.1 / np.linalg.norm(A)
        np.testing.assert_allclose(capped, cayley_step(R, G, lr), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            cayley_step(np.eye(3), np.zeros((2, 2)), 0.1)


class TestTransform:
    def test_round_trip(self, tmp_path, rng):
        T = OrthoTransform.block_random(16, 2, rng)
        write_transform(T, tmp_path / "r.ortm")
        back = read_transform(tmp_path / "r.ortm")
        assert back.block_dims == [8, 8]
        for a, b in zip(T.blocks, back.blocks):
            np.testing.assert_array_equal(a, b)

    def test_layout(self, tmp_path):
        write_transform(OrthoTransform.block_hadamard(4, 2), tmp_path / "r.ortm")
        raw = (tmp_path / "r.ortm").read_bytes()
        assert raw[:4] == b"ORTM" and raw[4] == 1
        assert struct.unpack_from("<Q", raw, 8)[0] == 2
        assert struct.unpack_from("<QQ", raw, 16) == (2, 2)
        assert len(raw) == 16 + 16 + 2 * 4 * 8

    def test_bad_magic(self, tmp_path):
        (tmp_path / "r.ortm").write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(FormatError):
            read_transform(tmp_path / "r.ortm")

    def test_truncated(self, tmp_path):
        write_transform(OrthoTransform.block_hadamard(4, 1), tmp_path / "r.ortm")
        raw = (tmp_path / "r.ortm").read_bytes()
        (tmp_path / "r.ortm").write_bytes(raw[:-8])
        with pytest.raises(FormatError, match="truncated"):
            read_transform(tmp_path / "r.ortm")

    def test_block_structure(self, rng):
        D = OrthoTransform.block_random(8, 2, rng).dense()
        assert np.all(D[:4, 4:] == 0) and np.all(D[4:, :4] == 0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_energy(self, seed):
        r = np.random.default_rng(seed)
        T = OrthoTransform.block_random(16, 2, r)
        x = r.normal(size=16) * r.uniform(0.1, 10)
        y = T.apply(x)
        assert np.linalg.norm(y) == pytest.approx(np.linalg.norm(x), rel=1e-9)
        assert np.linalg.norm(centering_project(y)) <= np.linalg.norm(x) * (1 + 1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_dispersion_ratio_identity(self, seed):
        r = np.random.default_rng(seed)
        t = centering_project(r.normal(size=16))
        tp = centering_project(OrthoTransform.block_random(16, 1, r).apply(t))
        lhs = dispersion_bn(tp) / dispersion_bn(t)
        rhs = (np.linalg.norm(tp) / np.linalg.norm(t)) * (np.abs(t).max() / np.abs(tp).max())
        assert lhs == pytest.approx(rhs, rel=1e-12)


class TestTraining:
    def test_config_validation(self):
        with pytest.raises(ConfigError):
            PsotConfig(epochs=0)
        with pytest.raises(ConfigError):
            PsotConfig(temperature=0)

    def test_zero_lr_is_noop(self, rng):
        batches = [ActivationBatch(rng.normal(size=(8, 16))) for _ in range(4)]
        T, trace = train_psot(batches, config=PsotConfig(epochs=1, learning_rate=0.0))
        for R in T.blocks:
            np.testing.assert_array_equal(R, hadamard(8))
        assert trace[0] == trace[-1]

    def test_deterministic(self, rng):
        batches = [ActivationBatch(rng.normal(size=(8, 16))) for _ in range(8)]
        cfg = PsotConfig(epochs=3, seed=5)
        a, ta = train_psot(batches, config=cfg)
        b, tb = train_psot(batches, config=cfg)
        assert ta == tb
        for x, y in zip(a.blocks, b.blocks):
            np.testing.assert_array_equal(x, y)

    def test_weight_length_checked(self, rng):
        batches = [ActivationBatch(rng.normal(size=(8, 16)))]
        with pytest.raises(ConfigError):
            train_psot(batches, weights=np.ones(7))

    def test_orthogonality_every_step(self):
        calib, _ = outlier_split(3)
        errors = []
        train_psot(calib, config=PsotConfig(fd_check=True),
                   callback=lambda e, k, T: errors.append(T.orthogonality_error()))
        assert len(errors) == 15 * 8
        assert max(errors) < 1e-8

    def test_suppresses_peaks(self):
        calib, held = outlier_split(3)
        T, trace = train_psot(calib)
        had = OrthoTransform.block_hadamard(64, 2)
        peak, bn = peak_stats(held, T)
        peak_h, bn_h = peak_stats(held, had)
        assert trace[-1] <= trace[0]
        assert peak < peak_h
        assert bn > bn_h
        mse = np.mean((fake_quantize(T.apply(held), 4) - T.apply(held)) ** 2)
        mse_h = np.mean((fake_quantize(had.apply(held), 4) - had.apply(held)) ** 2)
        assert mse < mse_h
