from __future__ import annotations

import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tpqi.coincidence import InterferenceParams, RateEstimates, p_coinc_nonzero
from tpqi.temporal import (
    DetectionWindow,
    EmptyShapeError,
    compose_shape,
    cumulative_dcdc,
    cumulative_nvdc,
    cumulative_nvnv,
    g2_dcdc,
    g2_nvdc,
    g2_nvnv,
    nv_wavepacket_density,
)

from oracles import poisson_z, quad_integral, sample_delta_t

SHAPES = {"nvnv": g2_nvnv, "nvdc": g2_nvdc, "dcdc": g2_dcdc}
CUMULATIVES = {"nvnv": cumulative_nvnv, "nvdc": cumulative_nvdc, "dcdc": cumulative_dcdc}

windows = st.builds(
    lambda s, w: DetectionWindow(s, s + w),
    st.floats(0.1, 20.0), st.floats(0.5, 60.0),
)


class TestWindow:
    @pytest.mark.parametrize("a,b,tau", [(0, 5, 12.5), (5, 5, 12.5), (6, 5, 12.5), (1, 5, 0.0)])
    def test_invalid(self, a, b, tau):
        with pytest.raises(ValueError):
            DetectionWindow(a, b, tau)

    def test_length(self):
        assert DetectionWindow(2.5, 22.5).W == 20


class TestWavepacket:
    w = DetectionWindow(5.0, 30.0)

    def test_outside(self):
        assert nv_wavepacket_density(4.9, self.w) == 0
        assert nv_wavepacket_density(30.1, self.w) == 0

    def test_normalized(self):
        val = quad_integral(lambda t: nv_wavepacket_density(t, self.w), 5.0, 30.0)
        assert val == pytest.approx(1.0, abs=1e-10)

    def test_closed_form_and_ratio(self):
        tau = 12.5
        expect = math.exp(-5 / tau) / (tau * (math.exp(-5 / tau) - math.exp(-30 / tau)))
        assert nv_wavepacket_density(5.0, self.w) == pytest.approx(expect, rel=1e-14)
        ratio = nv_wavepacket_density(5.0, self.w) / nv_wavepacket_density(17.5, self.w)
        assert ratio == pytest.approx(math.e, rel=1e-12)


class TestPureShapes:
    @pytest.mark.parametrize("name", SHAPES)
    def test_zero_at_support_edge(self, name):
        w = DetectionWindow(2.5, 22.5)
        assert SHAPES[name](w.W, w) == pytest.approx(0, abs=1e-15)
        assert SHAPES[name](-w.W, w) == pytest.approx(0, abs=1e-15)
        assert SHAPES[name](w.W + 1, w) == 0

    def test_dcdc_peak(self):
        w = DetectionWindow(2.5, 22.5)
        assert g2_dcdc(0.0, w) == pytest.approx(1 / (2 * w.W))

    @settings(max_examples=40, deadline=None)
    @given(windows)
    def test_half_integral_by_quadrature(self, w):
        for f in SHAPES.values():
            val = quad_integral(lambda x: f(x, w), -w.W, w.W, points=[0.0])
            assert val == pytest.approx(0.5, abs=1e-9)

    @given(windows, st.floats(-80, 80))
    def test_even_and_nonnegative(self, w, x):
        for f in SHAPES.values():
            assert f(x, w) >= 0
            assert f(x, w) == pytest.approx(f(-x, w), rel=1e-12, abs=1e-300)

    def test_nvnv_peak_above_triangle(self):
        w = DetectionWindow(2.5, 22.5)
        assert w.W > w.tau * math.log(2)
        assert g2_nvnv(0.0, w) > g2_dcdc(0.0, w)

    @pytest.mark.parametrize("name", SHAPES)
    def test_cumulative_derivative(self, name):
        w = DetectionWindow(3.0, 27.0)
        x = np.linspace(-w.W, w.W, 10_000)
        h = 1e-5
        deriv = (CUMULATIVES[name](x + h, w) - CUMULATIVES[name](x - h, w)) / (2 * h)
        dens = SHAPES[name](x, w)
        inner = np.abs(x) < w.W - 2 * h
        mask = inner & (dens > 1e-6 * dens.max())
        assert np.max(np.abs(deriv[mask] - dens[mask]) / dens[mask]) < 1e-6
        assert CUMULATIVES[name](w.W, w) == pytest.approx(0.5, abs=1e-12)
        assert CUMULATIVES[name](-w.W, w) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.slow
    @pytest.mark.parametrize("name", SHAPES)
    def test_matches_sampled_pairs(self, name):
        w = DetectionWindow(2.5, 22.5)
        edges = np.arange(-w.W, w.W + 1e-9, 0.5)
        counts = np.zeros(edges.size - 1)
        n_total = 0
        for k in range(10):
            dt = sample_delta_t(name, w.T_start, w.T_end, w.tau, 10**7, seed=100 + k)
            counts += np.histogram(dt, edges)[0]
            n_total += dt.size
        # expected mass per bin from the density alone (fine trapezoid)
        expected = np.empty_like(counts)
        for i in range(counts.size):
            sub = np.linspace(edges[i], edges[i + 1], 201)
            expected[i] = 2 * np.trapezoid(SHAPES[name](sub, w), sub) * n_total
        assert np.max(np.abs(poisson_z(counts, expected))) < 4


class TestCompose:
    w = DetectionWindow(2.5, 32.5)

    def test_dark_counts_only_is_triangle(self):
        r = RateEstimates(0, 0, 0, 0, 1e-4, 2e-4)
        shape = compose_shape(self.w, r)
        tri = g2_dcdc(shape.delta_t, self.w)
        assert np.allclose(shape.area_normalized(), 2 * tri, rtol=1e-12)

    def test_full_interference_no_background_is_zero(self):
        r = RateEstimates(1e-3, 1e-3, 1e-3, 1e-3, 0, 0)
        shape = compose_shape(self.w, r, InterferenceParams(1.0), zero_bin=True)
        assert np.all(shape.density == 0)
        assert np.all(shape.area_normalized() == 0)

    def test_all_zero_weights(self):
        with pytest.raises(EmptyShapeError):
            compose_shape(self.w, RateEstimates.zero())

    def test_integrates_to_half_of_coincidence_probability(self):
        r = RateEstimates(2.9e-5, 2.9e-5, 1.85e-5, 1.85e-5, 4.2e-6, 4.2e-6)
        shape = compose_shape(self.w, r, step=0.01)
        assert 2 * shape.integral() == pytest.approx(p_coinc_nonzero(r), rel=1e-4)
        assert np.trapezoid(shape.area_normalized(), shape.delta_t) == pytest.approx(1.0, rel=1e-4)
        assert np.trapezoid(shape.count_scaled(250), shape.delta_t) == pytest.approx(250, rel=1e-4)

    def test_weighted_sum(self):
        r = RateEstimates(1e-4, 2e-4, 3e-4, 4e-4, 5e-5, 6e-5)
        shape = compose_shape(self.w, r, InterferenceParams(0.4), zero_bin=True)
        a, b, c = shape.weights
        x = shape.delta_t
        assert np.allclose(shape.density, a * g2_nvnv(x, self.w) + b * g2_nvdc(x, self.w)
                           + c * g2_dcdc(x, self.w), rtol=1e-13)
        assert a == pytest.approx((1e-4 * 4e-4 + 2e-4 * 3e-4) * 0.6)

    def test_bin_probabilities_sum_to_one(self):
        r = RateEstimates(1e-4, 2e-4, 3e-4, 4e-4, 5e-5, 6e-5)
        shape = compose_shape(self.w, r)
        p = shape.bin_probabilities(np.linspace(-self.w.W, self.w.W, 76))
        assert p.sum() == pytest.approx(1.0, abs=1e-12)

    def test_csv(self):
        r = RateEstimates(1e-4, 2e-4, 3e-4, 4e-4, 5e-5, 6e-5)
        shape = compose_shape(self.w, r, step=1.0)
        text = shape.to_csv()
        header = [line for line in text.splitlines() if line.startswith("#")]
        assert any(line.startswith("# w_nvnv=") for line in header)
        assert any(line.startswith("# w_dcdc=") for line in header)
        body = np.loadtxt(io.StringIO(text), delimiter=",", comments="#", skiprows=len(header) + 1)
        assert body.shape == (61, 3)
        assert np.allclose(body[:, 1], shape.density)
