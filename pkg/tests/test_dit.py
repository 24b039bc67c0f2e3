"""Denoiser architecture: embedding, masking, zero-init, gradients."""

import numpy as np
import pytest

from asynctpp import tensor as T
from asynctpp.dit import (DitConfig, dit_forward, init_dit_params, masked_attention,
                          schedule_embedding)
from asynctpp.schedule import make_schedule
from asynctpp.tensor import Tensor

CFG = DitConfig(n_max=6, d_latent=3, d_model=16, num_layers=2, num_heads=2, h_emb=8)


def fresh(seed=0):
    return init_dit_params(CFG, np.random.default_rng(seed))


class TestScheduleEmbedding:
    def test_zero_entry_gives_ones_and_zeros(self):
        e = schedule_embedding(np.zeros(3), 10_000.0, 4)
        np.testing.assert_array_equal(e[:, :4], np.ones((3, 4)))
        np.testing.assert_array_equal(e[:, 4:], np.zeros((3, 4)))

    def test_unit_entry_first_frequency(self):
        e = schedule_embedding(np.array([1.0]), 10_000.0, 4)
        assert e[0, 0] == pytest.approx(np.cos(1.0))
        assert e[0, 4] == pytest.approx(np.sin(1.0))

    def test_equal_entries_equal_rows(self):
        e = schedule_embedding(np.array([0.4, 0.7, 0.4]), 10_000.0, 8)
        np.testing.assert_array_equal(e[0], e[2])
        assert not np.array_equal(e[0], e[1])

    def test_frequency_decay(self):
        h = 16
        e = schedule_embedding(np.array([1.0]), 10_000.0, h)
        args = np.arccos(np.clip(e[0, :h], -1, 1))
        assert np.all(np.diff(args) < 0)  # decreasing arguments across j

    def test_range_validation(self):
        with pytest.raises(ValueError):
            schedule_embedding(np.array([1.5]), 10_000.0, 4)


class TestMaskedAttention:
    def test_all_ones_is_standard_attention(self):
        rng = np.random.default_rng(0)
        q = Tensor(rng.standard_normal((4, 8)), dtype=np.float64)
        k = Tensor(rng.standard_normal((4, 8)), dtype=np.float64)
        v = Tensor(rng.standard_normal((4, 8)), dtype=np.float64)
        out = masked_attention(q, k, v, np.ones(4))
        scores = q.data @ k.data.T / np.sqrt(8)
        w = np.exp(scores - scores.max(-1, keepdims=True))
        w /= w.sum(-1, keepdims=True)
        np.testing.assert_allclose(out.data, w @ v.data, atol=1e-12)

    def test_single_key_returns_that_value(self):
        rng = np.random.default_rng(1)
        q = Tensor(rng.standard_normal((4, 8)), dtype=np.float64)
        k = Tensor(rng.standard_normal((4, 8)), dtype=np.float64)
        v = Tensor(rng.standard_normal((4, 8)), dtype=np.float64)
        mask = np.zeros(4)
        mask[0] = 1
        out = masked_attention(q, k, v, mask)
        for row in range(4):
            np.testing.assert_allclose(out.data[row], v.data[0], atol=1e-12)

    def test_masked_values_do_not_affect_output(self):
        rng = np.random.default_rng(2)
        q = Tensor(rng.standard_normal((5, 8)), dtype=np.float64)
        k = Tensor(rng.standard_normal((5, 8)), dtype=np.float64)
        v0 = rng.standard_normal((5, 8))
        mask = np.array([1, 1, 0, 0, 1])
        out0 = masked_attention(q, k, Tensor(v0, dtype=np.float64), mask)
        v1 = v0.copy()
        v1[2:4] = rng.standard_normal((2, 8)) * 100
        out1 = masked_attention(q, k, Tensor(v1, dtype=np.float64), mask)
        np.testing.assert_array_equal(out0.data, out1.data)

    def test_all_zero_mask_rejected(self):
        q = Tensor(np.zeros((3, 4)))
        with pytest.raises(ValueError, match="at least one"):
            masked_attention(q, q, q, np.zeros(3))


class TestForward:
    def test_fresh_params_output_zero(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((6, 3)).astype(np.float32)
        a = make_schedule("async", 6).a_diag(0.37)
        out = dit_forward(fresh(), x, a, np.ones(6, bool), CFG)
        assert out.shape == (6, 3)
        np.testing.assert_array_equal(out.data, np.zeros((6, 3)))

    def test_shape_validation(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ValueError, match="shape"):
            dit_forward(fresh(), rng.standard_normal((5, 3)).astype(np.float32),
                        np.ones(5), np.ones(5, bool), CFG)

    def test_batched_matches_single(self):
        params = _perturbed_params(seed=5)
        rng = np.random.default_rng(6)
        x = rng.standard_normal((2, 6, 3)).astype(np.float32)
        a = np.stack([make_schedule("async", 6).a_diag(s) for s in (0.3, 0.6)])
        mask = np.ones((2, 6), bool)
        with T.no_grad():
            full = dit_forward(params, x, a, mask, CFG).data
            one = dit_forward(params, x[1], a[1], mask[1], CFG).data
        np.testing.assert_allclose(full[1], one, atol=1e-6)

    def test_masked_key_invariance_with_mask_restricted_queries(self):
        # perturbing inputs at masked positions leaves unmasked outputs alone
        params = _perturbed_params(seed=7)
        rng = np.random.default_rng(8)
        x0 = rng.standard_normal((6, 3)).astype(np.float32)
        a = make_schedule("async", 6).a_diag(0.5)
        mask = np.array([1, 1, 1, 0, 0, 1], bool)
        with T.no_grad():
            out0 = dit_forward(params, x0, a, mask, CFG).data
        x1 = x0.copy()
        x1[3:5] += rng.standard_normal((2, 3)).astype(np.float32) * 50
        with T.no_grad():
            out1 = dit_forward(params, x1, a, mask, CFG).data
        np.testing.assert_allclose(out0[mask], out1[mask], atol=1e-6)

    def test_permutation_sensitivity_counterexample(self):
        # positional conditioning means permuting rows does not commute
        params = _perturbed_params(seed=9)
        rng = np.random.default_rng(10)
        x = rng.standard_normal((6, 3)).astype(np.float32)
        a = make_schedule("async", 6).a_diag(0.45)
        mask = np.ones(6, bool)
        perm = np.array([1, 0, 2, 3, 4, 5])
        with T.no_grad():
            out = dit_forward(params, x, a, mask, CFG).data
            out_perm = dit_forward(params, x[perm], a, mask, CFG).data
        assert not np.allclose(out[perm], out_perm, atol=1e-5)

    def test_determinism(self):
        params = _perturbed_params(seed=11)
        rng = np.random.default_rng(12)
        x = rng.standard_normal((6, 3)).astype(np.float32)
        a = make_schedule("async", 6).a_diag(0.5)
        with T.no_grad():
            a1 = dit_forward(params, x, a, np.ones(6, bool), CFG).data
            a2 = dit_forward(params, x, a, np.ones(6, bool), CFG).data
        assert np.array_equal(a1, a2)


def _perturbed_params(seed):
    """Fresh params with the zero-init projections nudged so outputs are nonzero."""
    params = init_dit_params(CFG, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1000)
    for name, p in params.items():
        if np.all(p.data == 0):
            p.data = (rng.standard_normal(p.shape) * 0.05).astype(p.data.dtype)
    return params


class TestGradients:
    def test_forward_norm_gradient_matches_finite_diff(self):
        T.set_default_dtype("f64")
        try:
            cfg = DitConfig(n_max=4, d_latent=2, d_model=8, num_layers=1,
                            num_heads=2, h_emb=4)
            params = init_dit_params(cfg, np.random.default_rng(13))
            rng = np.random.default_rng(14)
            for name, p in params.items():
                if np.all(p.data == 0):
                    p.data = rng.standard_normal(p.shape) * 0.1
            x = rng.standard_normal((4, 2))
            a = make_schedule("async", 4).a_diag(0.4)
            mask = np.ones(4, bool)

            def loss_fn():
                out = dit_forward(params, x, a, mask, cfg)
                return (out * out).sum()

            grads = T.grad(loss_fn())
            # spot-check 60 random coordinates across all parameters
            names = sorted(params)
            flat = np.concatenate([params[n].data.ravel() for n in names])
            sizes = {n: params[n].data.size for n in names}

            def f(vec):
                off = 0
                for n in names:
                    params[n].data = vec[off:off + sizes[n]].reshape(params[n].shape).copy()
                    off += sizes[n]
                with T.no_grad():
                    out = dit_forward(params, x, a, mask, cfg)
                return float((out.data ** 2).sum())

            coords = np.random.default_rng(15).choice(flat.size, size=60, replace=False)
            base = flat.copy()
            analytic = np.concatenate([
                (grads[params[n]].data if params[n] in grads
                 else np.zeros(params[n].shape)).ravel()
                for n in names])
            eps = 1e-5
            worst = 0.0
            for c in coords:
                vp, vm = base.copy(), base.copy()
                vp[c] += eps
                vm[c] -= eps
                fd = (f(vp) - f(vm)) / (2 * eps)
                denom = max(abs(fd), abs(analytic[c]), 1e-6)
                worst = max(worst, abs(fd - analytic[c]) / denom)
            f(base)  # restore
            assert worst < 1e-5
        finally:
            T.set_default_dtype("f32")


class TestConfig:
    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            DitConfig(n_max=4, d_latent=2, d_model=10, num_heads=4)

    def test_period_and_h(self):
        with pytest.raises(ValueError):
            DitConfig(n_max=4, d_latent=2, t_max_period=0.5)
        with pytest.raises(ValueError):
            DitConfig(n_max=4, d_latent=2, h_emb=0)
