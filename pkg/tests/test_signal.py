"""Signal-path tests: filter response oracle, spline, normalization, HR, noise."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayesrppg.errors import ConfigError, DegenerateInputError, ExtrapolationError, ShapeError
from bayesrppg.signal import (
    BandSpec,
    BvpTrace,
    add_noise,
    butterworth_bandpass,
    cubic_spline_resample,
    design_bandpass_sos,
    estimate_hr,
    normalize_signal,
    sos_magnitude,
)

FS = 30.0


def sine_trace(freq_hz, fs=FS, duration_s=60.0, amp=1.0, phase=0.0):
    t = np.arange(int(duration_s * fs)) / fs
    return BvpTrace(amp * np.sin(2 * np.pi * freq_hz * t + phase), fs)


def measured_gain(freq_hz, duration_s=240.0, discard_s=90.0):
    """Empirical filtfilt amplitude gain via quadrature projection on the interior."""
    trace = sine_trace(freq_hz, duration_s=duration_s)
    out = butterworth_bandpass(trace).samples
    t = trace.times()
    keep = (t >= discard_s) & (t <= duration_s - discard_s)
    tc, yc = t[keep], out[keep]
    # least-squares amplitude of the known-frequency component
    c = np.cos(2 * np.pi * freq_hz * tc)
    s = np.sin(2 * np.pi * freq_hz * tc)
    a = 2.0 * np.mean(yc * s)
    b = 2.0 * np.mean(yc * c)
    return float(np.hypot(a, b))


class TestButterworthBandpass:
    def test_dc_is_rejected(self):
        trace = BvpTrace(np.ones(int(30 * FS)), FS)
        out = butterworth_bandpass(trace).samples
        interior = out[int(2 * FS) : -int(2 * FS)]
        assert np.abs(interior).max() < 1e-3

    def test_output_length_equals_input_length(self):
        trace = sine_trace(1.0, duration_s=10.0)
        assert butterworth_bandpass(trace).samples.size == trace.samples.size

    def test_midband_gain_within_1db(self):
        # analytic filtfilt gain |H|^2 at 1.5 Hz, compared to measurement
        sos = design_bandpass_sos(BandSpec(), FS)
        analytic = sos_magnitude(sos, 1.5, FS)[0] ** 2
        assert abs(20 * np.log10(analytic)) < 1.0  # mid-passband, near unity
        assert abs(20 * np.log10(measured_gain(1.5) / analytic)) < 0.1

    def test_deep_stopband_attenuation(self):
        sos = design_bandpass_sos(BandSpec(), FS)
        analytic = sos_magnitude(sos, 0.1, FS)[0] ** 2
        assert 20 * np.log10(analytic) < -40.0  # far below the band
        g = measured_gain(0.1)
        assert 20 * np.log10(max(g, 1e-300)) < -40.0

    def test_zero_phase_no_lag(self):
        trace = sine_trace(1.2, duration_s=60.0)
        out = butterworth_bandpass(trace).samples
        x = trace.samples[int(10 * FS) : int(50 * FS)]
        y = out[int(10 * FS) : int(50 * FS)]
        lags = np.arange(-10, 11)
        xc = [np.dot(x, np.roll(y, k)) for k in lags]
        assert lags[int(np.argmax(xc))] == 0

    def test_band_outside_nyquist_rejected(self):
        trace = sine_trace(1.0, fs=5.0, duration_s=30.0)
        with pytest.raises(ConfigError, match="Nyquist"):
            butterworth_bandpass(trace, BandSpec(0.6, 3.0))


class TestCubicSplineResample:
    def test_knots_reproduced_exactly(self):
        rng = np.random.default_rng(0)
        trace = BvpTrace(rng.standard_normal(50), FS)
        vals = cubic_spline_resample(trace, trace.times())
        np.testing.assert_allclose(vals, trace.samples, atol=1e-12)

    def test_linear_data_reproduced_exactly(self):
        trace = BvpTrace(np.linspace(-2.0, 5.0, 40), FS)
        targets = np.linspace(0.1, trace.times()[-1] - 0.1, 77)
        expected = -2.0 + (5.0 - (-2.0)) * targets * FS / 39
        np.testing.assert_allclose(cubic_spline_resample(trace, targets), expected, atol=1e-10)

    def test_sine_upsampling_accuracy(self):
        trace = sine_trace(1.5, duration_s=10.0)
        t_end = trace.times()[-1]
        targets = np.arange(int(t_end * 60)) / 60.0
        interior = (targets > 0.5) & (targets < t_end - 0.5)
        vals = cubic_spline_resample(trace, targets[interior])
        expected = np.sin(2 * np.pi * 1.5 * targets[interior])
        assert np.abs(vals - expected).max() < 1e-3

    def test_extrapolation_rejected(self):
        trace = BvpTrace(np.arange(10.0), FS)
        with pytest.raises(ExtrapolationError):
            cubic_spline_resample(trace, [trace.times()[-1] + 0.1])


class TestNormalizeSignal:
    def test_basic_mapping(self):
        np.testing.assert_allclose(normalize_signal([0.0, 5.0, 10.0]), [-1.0, 0.0, 1.0])

    def test_endpoints_preserved_when_already_normalized(self):
        x = np.array([-1.0, -0.25, 0.5, 1.0])
        np.testing.assert_allclose(normalize_signal(x), x)

    def test_constant_signal_rejected(self):
        with pytest.raises(DegenerateInputError):
            normalize_signal([2.0, 2.0, 2.0])

    @given(st.lists(st.floats(-100, 100), min_size=3, max_size=60).filter(lambda v: max(v) > min(v)))
    @settings(max_examples=50, deadline=None)
    def test_idempotent(self, vals):
        once = normalize_signal(vals)
        twice = normalize_signal(once)
        np.testing.assert_allclose(twice, once, atol=1e-12)


class TestEstimateHr:
    def test_pure_sinusoids(self):
        assert abs(estimate_hr(sine_trace(1.5, duration_s=512 / FS)) - 90.0) <= 0.5
        assert abs(estimate_hr(sine_trace(1.0, duration_s=512 / FS)) - 60.0) <= 0.5

    def test_dominant_peak_of_mixture(self):
        t = np.arange(512) / FS
        x = 1.0 * np.sin(2 * np.pi * 1.2 * t) + 0.3 * np.sin(2 * np.pi * 2.0 * t)
        assert abs(estimate_hr(BvpTrace(x, FS)) - 72.0) <= 0.5

    def test_scale_and_offset_invariance(self):
        trace = sine_trace(1.3, duration_s=20.0)
        shifted = BvpTrace(5.0 + 3.0 * trace.samples, FS)
        assert estimate_hr(shifted) == estimate_hr(trace)

    def test_too_short_trace_rejected(self):
        with pytest.raises(ShapeError, match="samples"):
            estimate_hr(BvpTrace(np.ones(60), FS))


class TestAddNoise:
    def test_level_zero_is_identity(self):
        rng = np.random.default_rng(0)
        clip = rng.random((3, 4, 5, 5)).astype(np.float32)
        out = add_noise(clip, 0.0, rng)
        np.testing.assert_array_equal(out, clip)

    def test_noise_std_on_midgray(self):
        clip = np.full((3, 16, 148, 148), 0.5, dtype=np.float32)  # > 1e6 pixels
        noisy = add_noise(clip, 0.1, np.random.default_rng(1))
        resid = (noisy - clip).ravel()
        assert 0.097 <= resid.std() <= 0.103

    def test_output_stays_in_unit_interval(self):
        clip = np.random.default_rng(2).random((3, 8, 16, 16)).astype(np.float32)
        out = add_noise(clip, 0.5, np.random.default_rng(3))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_seeded_reproducibility(self):
        clip = np.random.default_rng(4).random((3, 4, 8, 8)).astype(np.float32)
        a = add_noise(clip, 0.05, np.random.default_rng(77))
        b = add_noise(clip, 0.05, np.random.default_rng(77))
        np.testing.assert_array_equal(a, b)

    def test_negative_level_rejected(self):
        with pytest.raises(ConfigError):
            add_noise(np.zeros((1, 1, 1, 1)), -0.1, np.random.default_rng(0))
