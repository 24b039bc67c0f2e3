"""Noise schedules: windows, derivatives, interpolation and the
numerical instantiations of the flow-validity results."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asynctpp.schedule import (field_equivalence_check, interpolate,
                               inverse_flow, invertible_limit_check, make_schedule,
                               validate_schedule)


class TestWindows:
    def test_async_window_width_exact(self):
        for n in (1, 2, 6, 17, 32):
            sched = make_schedule("async", n)
            for i in range(1, n + 1):
                assert sched.window(i).width == Fraction(n, 2 * n - 1)

    def test_async_n6_figure_anchors(self):
        sched = make_schedule("async", 6)
        assert sched.window(6).s_start == 0 and sched.window(6).s_end == Fraction(6, 11)
        assert sched.window(1).s_start == Fraction(5, 11) and sched.window(1).s_end == 1

    def test_disjoint_windows(self):
        sched = make_schedule("disjoint", 4)
        assert sched.window(4).s_start == 0 and sched.window(4).s_end == Fraction(1, 4)
        assert sched.window(1).s_start == Fraction(3, 4) and sched.window(1).s_end == 1

    def test_sync_window_everything(self):
        sched = make_schedule("sync", 5)
        for i in range(1, 6):
            assert sched.window(i) == sched.window(1)
            assert sched.window(i).s_start == 0 and sched.window(i).s_end == 1

    def test_window_out_of_range(self):
        sched = make_schedule("async", 4)
        with pytest.raises(ValueError):
            sched.window(0)
        with pytest.raises(ValueError):
            sched.window(5)


class TestDiagonal:
    def test_async_n6_exact_values(self):
        sched = make_schedule("async", 6)
        # event 6 fully diffused at s = 6/11; event 1 still intact at 5/11
        assert sched.a_diag_exact(Fraction(6, 11))[5] == 0
        assert sched.a_diag_exact(Fraction(5, 11))[0] == 1
        # direct evaluation at an interior point: i=3, s=1/2
        assert sched.a_diag_exact(Fraction(1, 2))[2] == Fraction(7, 12)
        assert abs(sched.a_diag(0.5)[2] - 7.0 / 12.0) < 1e-12

    def test_boundaries(self):
        for kind in ("async", "disjoint", "sync"):
            sched = make_schedule(kind, 5)
            np.testing.assert_array_equal(sched.a_diag(0.0), np.ones(5))
            np.testing.assert_array_equal(sched.a_diag(1.0), np.zeros(5))

    def test_out_of_range_s(self):
        sched = make_schedule("async", 3)
        with pytest.raises(ValueError):
            sched.a_diag(-0.1)
        with pytest.raises(ValueError):
            sched.a_diag(1.1)

    def test_sync_derivative_constant(self):
        sched = make_schedule("sync", 4)
        for s in (0.0, 0.3, 1.0):
            np.testing.assert_array_equal(sched.a_prime_diag(s), -np.ones(4))

    def test_async_derivative_inside_and_outside_window(self):
        sched = make_schedule("async", 6)
        # window of i=3 is (3/11, 9/11]; slope -(2N-1)/N = -11/6
        assert sched.a_prime_diag(0.7)[2] == pytest.approx(-11.0 / 6.0)
        assert sched.a_prime_diag(0.1)[2] == 0.0

    def test_derivative_left_hand_at_kink(self):
        sched = make_schedule("async", 6)
        s_end_3 = float(Fraction(9, 11))
        assert sched.a_prime_diag(s_end_3)[2] == pytest.approx(-11.0 / 6.0)
        # just above the window end the derivative is 0
        assert sched.a_prime_diag(s_end_3 + 1e-9)[2] == 0.0

    def test_derivative_at_zero_uses_right_hand_value(self):
        sched = make_schedule("async", 6)
        ap = sched.a_prime_diag(0.0)
        assert ap[5] == pytest.approx(-11.0 / 6.0)  # window of i=6 starts at 0
        assert np.all(ap[:5] == 0.0)

    def test_derivative_integrates_back_to_diagonal(self):
        # breakpoint-aware piecewise-constant integral of a' equals the
        # increment of a, for all kinds (64-bit)
        rng = np.random.default_rng(0)
        for kind in ("async", "disjoint", "sync"):
            sched = make_schedule(kind, 7)
            bps = [float(b) for b in sched.breakpoints]
            for _ in range(20):
                lo, hi = np.sort(rng.uniform(0.0, 1.0, size=2))
                if lo == hi:
                    continue
                cuts = [lo] + [b for b in bps if lo < b < hi] + [hi]
                integral = np.zeros(7)
                for a, b in zip(cuts[:-1], cuts[1:]):
                    integral += sched.a_prime_diag(b) * (b - a)
                np.testing.assert_allclose(sched.a_diag(hi) - sched.a_diag(lo),
                                           integral, atol=1e-9)


class TestInterpolate:
    def test_endpoints(self):
        rng = np.random.default_rng(1)
        x0 = rng.standard_normal((5, 3))
        eps = rng.standard_normal((5, 3))
        sched = make_schedule("async", 5)
        np.testing.assert_array_equal(interpolate(x0, eps, sched, 0.0), x0)
        np.testing.assert_array_equal(interpolate(x0, eps, sched, 1.0), eps)

    def test_rowwise_scalar_oracle(self):
        rng = np.random.default_rng(2)
        x0 = rng.standard_normal((4, 2))
        eps = rng.standard_normal((4, 2))
        sched = make_schedule("async", 4)
        s = 0.37
        out = interpolate(x0, eps, sched, s)
        for i in range(4):
            w = sched.window(i + 1)
            a = min(max((float(w.s_end) - s) / float(w.width), 0.0), 1.0)
            np.testing.assert_allclose(out[i], a * x0[i] + (1 - a) * eps[i], rtol=1e-12)

    def test_shape_mismatch(self):
        sched = make_schedule("async", 4)
        with pytest.raises(ValueError):
            interpolate(np.zeros((3, 2)), np.zeros((3, 2)), sched, 0.5)

    @given(st.floats(0.05, 0.95), st.floats(-2, 2))
    @settings(max_examples=30, deadline=None)
    def test_affine_in_inputs(self, s, scale):
        rng = np.random.default_rng(3)
        x0 = rng.standard_normal((4, 2))
        eps = rng.standard_normal((4, 2))
        sched = make_schedule("async", 4)
        a = interpolate(scale * x0, scale * eps, sched, s)
        b = scale * interpolate(x0, eps, sched, s)
        np.testing.assert_allclose(a, b, atol=1e-10)


class TestInverseFlow:
    def test_s0_identity(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((4, 2))
        eps = rng.standard_normal((4, 2))
        sched = make_schedule("async", 4)
        np.testing.assert_array_equal(inverse_flow(x, eps, sched, 0.0), x)

    def test_s1_returns_noise(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((4, 2))
        eps = rng.standard_normal((4, 2))
        sched = make_schedule("async", 4)
        np.testing.assert_array_equal(inverse_flow(x, eps, sched, 1.0), eps)

    @pytest.mark.parametrize("kind", ["async", "disjoint", "sync"])
    def test_roundtrip_100_random_s(self, kind):
        # forward-inverse-forward restores x_s (the left-invertibility claim)
        rng = np.random.default_rng(6)
        sched = make_schedule(kind, 6)
        worst = 0.0
        for _ in range(100):
            x0 = rng.standard_normal((6, 3))
            eps = rng.standard_normal((6, 3))
            s = float(rng.uniform(0.0, 1.0))
            x_s = interpolate(x0, eps, sched, s)
            back = interpolate(inverse_flow(x_s, eps, sched, s), eps, sched, s)
            worst = max(worst, float(np.max(np.abs(back - x_s))))
        assert worst < 1e-6

    def test_partial_reconstruction_rowwise(self):
        rng = np.random.default_rng(7)
        sched = make_schedule("async", 6)
        x0 = rng.standard_normal((6, 3))
        eps = rng.standard_normal((6, 3))
        s = 0.5
        a = sched.a_diag(s)
        rec = inverse_flow(interpolate(x0, eps, sched, s), eps, sched, s)
        for i in range(6):
            if a[i] == 1.0:
                np.testing.assert_array_equal(rec[i], x0[i])
            elif a[i] == 0.0:
                np.testing.assert_array_equal(rec[i], eps[i])
            else:
                np.testing.assert_allclose(rec[i], x0[i], atol=1e-6 / a[i])


class TestValidate:
    @pytest.mark.parametrize("kind", ["async", "disjoint", "sync"])
    @pytest.mark.parametrize("n", [1, 6, 32])
    def test_constructed_schedules_pass(self, kind, n):
        assert validate_schedule(make_schedule(kind, n), 1001).ok

    def test_broken_schedule_reports_boundaries(self):
        report = validate_schedule(make_schedule("broken", 4), 101)
        checks = {v.check for v in report.violations}
        assert any("A(0)" in c for c in checks)
        assert any("A(1)" in c for c in checks)
        assert any("monotone" in c for c in checks)

    def test_grid_size_validation(self):
        with pytest.raises(ValueError):
            validate_schedule(make_schedule("async", 4), 1)


class TestFieldEquivalence:
    def test_sync_exact_mode_zero(self):
        rng = np.random.default_rng(8)
        x0 = rng.standard_normal((6, 4))
        eps = rng.standard_normal((6, 4))
        dev = field_equivalence_check(x0, eps, make_schedule("sync", 6), 200, rng,
                                      mode="exact")
        assert dev == 0.0

    def test_async_float32_small(self):
        rng = np.random.default_rng(9)
        x0 = rng.standard_normal((6, 4))
        eps = rng.standard_normal((6, 4))
        dev = field_equivalence_check(x0, eps, make_schedule("async", 6), 1000, rng,
                                      mode="f32")
        assert dev < 1e-5

    def test_async_exact_mode_zero(self):
        rng = np.random.default_rng(10)
        x0 = rng.standard_normal((6, 2))
        eps = rng.standard_normal((6, 2))
        dev = field_equivalence_check(x0, eps, make_schedule("async", 6), 100, rng,
                                      mode="exact")
        assert dev == 0.0

    def test_zero_rows_with_zero_derivative_agree(self):
        # at s past a row's window both fields vanish on that row
        sched = make_schedule("async", 6)
        s = 0.9  # row 6 has a=0, a'=0 here
        assert sched.a_diag(s)[5] == 0.0 and sched.a_prime_diag(s)[5] == 0.0


class TestInvertibleLimit:
    def test_linearity_and_monotonicity(self):
        rng = np.random.default_rng(11)
        x0 = rng.standard_normal((6, 3))
        eps = rng.standard_normal((6, 3))
        sched = make_schedule("async", 6)
        table = invertible_limit_check(x0, eps, sched, [0.1, 0.01, 0.001])
        devs = [d for _, d in table]
        assert devs[0] > devs[1] > devs[2]
        ratios = [d / s for s, d in table]
        np.testing.assert_allclose(ratios, ratios[0], rtol=1e-9)

    def test_half_sigma_is_half_field(self):
        rng = np.random.default_rng(12)
        x0 = rng.standard_normal((4, 2))
        eps = rng.standard_normal((4, 2))
        sched = make_schedule("async", 4)
        (sigma, dev), = invertible_limit_check(x0, eps, sched, [0.5], num_s=16)
        # reference magnitude of the sigma=0 field over the same grid
        ref = 0.0
        for j in range(16):
            s = (j + 0.5) / 16
            ref = max(ref, float(np.max(np.abs(
                sched.a_prime_diag(s)[:, None] * (x0 - eps)))))
        assert dev == pytest.approx(0.5 * ref, rel=1e-9)

    def test_sigma_bound_example(self):
        rng = np.random.default_rng(13)
        x0 = rng.standard_normal((4, 2))
        eps = rng.standard_normal((4, 2))
        sched = make_schedule("async", 4)
        (_, dev), = invertible_limit_check(x0, eps, sched, [1e-3])
        bound = 1e-3 * float(np.max(np.abs(sched.slope_bound() * (x0 - eps)))) + 1e-7
        assert dev <= bound

    def test_sigma_out_of_range(self):
        sched = make_schedule("async", 4)
        with pytest.raises(ValueError):
            invertible_limit_check(np.zeros((4, 1)), np.zeros((4, 1)), sched, [1.5])
