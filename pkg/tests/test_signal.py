import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from uwbpos.errors import MaskCoverageError, UndersampledError
from uwbpos.signal import (
    FccMask,
    PulseShape,
    RangingSignalSpec,
    SpectralMetrics,
    Waveform,
    build_ranging_signal,
    check_fcc_mask,
    classify_uwb,
    effective_bandwidth,
    energy_spectral_density,
    gaussian_pulse,
    spectral_metrics,
)

FS = 50e9


def beta_by_quadrature(order, sigma):
    """Second-moment bandwidth of |S(f)|^2 ~ f^(2n) exp(-4 pi^2 sigma^2 f^2)."""
    esd = lambda f: f ** (2 * order) * np.exp(-4 * np.pi**2 * sigma**2 * f**2)
    scale = 1.0 / sigma
    num = integrate.quad(lambda u: (u * scale) ** 2 * esd(u * scale), 0, 20)[0]
    den = integrate.quad(lambda u: esd(u * scale), 0, 20)[0]
    return np.sqrt(num / den)


class TestWaveform:
    def test_basic_properties(self):
        w = Waveform(10.0, [1.0, 2.0, 3.0], t0=0.5)
        assert w.duration == pytest.approx(0.3)
        assert w.dt == pytest.approx(0.1)
        np.testing.assert_allclose(w.times, [0.5, 0.6, 0.7])
        assert w.energy == pytest.approx(14.0 / 10.0)

    def test_samples_are_read_only(self):
        w = Waveform(10.0, [1.0, 2.0])
        with pytest.raises(ValueError):
            w.samples[0] = 5.0

    @pytest.mark.parametrize("fs, samples", [(0.0, [1.0]), (-1.0, [1.0]), (1.0, [])])
    def test_invalid(self, fs, samples):
        with pytest.raises(ValueError):
            Waveform(fs, samples)

    def test_csv_round_trip(self, tmp_path):
        w = gaussian_pulse(2, 1e-9, FS)
        path = tmp_path / "w.csv"
        w.to_csv(path)
        header = path.read_text().splitlines()[0]
        assert header == "time_s,amplitude"
        back = Waveform.from_csv(path)
        assert back.sample_rate == pytest.approx(FS, rel=1e-9)
        assert back.t0 == pytest.approx(w.t0, abs=1e-21)
        np.testing.assert_array_equal(back.samples, w.samples)


class TestGaussianPulse:
    def test_order0_peak_at_zero(self):
        w = gaussian_pulse(0, 1e-9, FS)
        i = int(np.argmax(w.samples))
        assert w.times[i] == pytest.approx(0.0, abs=1e-15)
        assert w.samples[i] == pytest.approx(1.0)
        np.testing.assert_allclose(w.samples, w.samples[::-1], atol=1e-15)

    def test_order1_is_odd(self):
        w = gaussian_pulse(1, 1e-9, FS)
        mid = len(w) // 2
        assert w.times[mid] == pytest.approx(0.0, abs=1e-15)
        assert w.samples[mid] == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(w.samples, -w.samples[::-1], atol=1e-12)
        assert np.max(np.abs(w.samples)) == pytest.approx(1.0)

    def test_support_is_one_and_a_half_widths(self):
        w = gaussian_pulse(2, 1e-9, FS)
        assert w.times[0] == pytest.approx(-0.75e-9, abs=1 / FS)
        assert w.times[-1] == pytest.approx(0.75e-9, abs=1 / FS)

    def test_order2_beta_matches_closed_form(self):
        w = gaussian_pulse(2, 1e-9, FS)
        sigma = 1e-9 / 7
        closed = np.sqrt(5 / 2) / (2 * np.pi * sigma)
        assert closed == pytest.approx(1.7615e9, rel=1e-4)
        assert effective_bandwidth(w) == pytest.approx(closed, rel=0.01)

    @pytest.mark.parametrize("order", [0, 1, 2, 5])
    def test_closed_form_matches_quadrature(self, order):
        p = PulseShape(order, 1e-9)
        assert p.effective_bandwidth() == pytest.approx(
            beta_by_quadrature(order, p.sigma), rel=1e-9
        )

    def test_undersampled(self):
        with pytest.raises(UndersampledError):
            gaussian_pulse(2, 1e-9, 19e9)

    def test_unsupported_order(self):
        with pytest.raises(ValueError, match="order"):
            gaussian_pulse(3, 1e-9, FS)


class TestRangingSignal:
    def pulse_energy(self):
        return gaussian_pulse(2, 1e-9, FS).energy

    def test_single_frame_is_the_pulse(self):
        spec = RangingSignalSpec(PulseShape(2, 1e-9), 20e-9, 1, (1,))
        s = build_ranging_signal(spec, FS)
        p = gaussian_pulse(2, 1e-9, FS)
        np.testing.assert_array_equal(s.samples[: len(p)], p.samples)
        assert not np.any(s.samples[len(p):])
        assert s.t0 == p.t0

    def test_second_pulse_inverted_at_frame_interval(self):
        spec = RangingSignalSpec(PulseShape(2, 1e-9), 100e-9, 2, (1, -1))
        s = build_ranging_signal(spec, FS)
        i0 = int(np.argmin(np.abs(s.times)))
        i1 = int(np.argmin(np.abs(s.times - 100e-9)))
        assert abs(s.samples[i0]) == pytest.approx(1.0)
        assert s.samples[i1] == pytest.approx(-s.samples[i0])
        n = len(gaussian_pulse(2, 1e-9, FS))
        np.testing.assert_allclose(s.samples[i1 - n // 2 : i1 + n // 2 + 1], -s.samples[:n])

    def test_ternary_zero_transmits_nothing(self):
        spec = RangingSignalSpec(PulseShape(2, 1e-9), 20e-9, 4, (1, 0, -1, 1))
        s = build_ranging_signal(spec, FS)
        assert s.energy == pytest.approx(3 * self.pulse_energy(), rel=1e-12)

    def test_frame_too_short(self):
        spec = RangingSignalSpec(PulseShape(2, 1e-9), 1.2e-9, 2, (1, 1))
        with pytest.raises(ValueError, match="overlap"):
            build_ranging_signal(spec, FS)

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(frame_interval=0.5e-9, num_frames=1, code=(1,)),
            dict(frame_interval=20e-9, num_frames=0, code=()),
            dict(frame_interval=20e-9, num_frames=2, code=(1,)),
            dict(frame_interval=20e-9, num_frames=1, code=(2,)),
        ],
    )
    def test_spec_invariants(self, kwargs):
        with pytest.raises(ValueError):
            RangingSignalSpec(PulseShape(2, 1e-9), **kwargs)

    @given(st.lists(st.sampled_from([-1, 0, 1]), min_size=1, max_size=8))
    def test_energy_is_code_weight_times_pulse_energy(self, code):
        spec = RangingSignalSpec(PulseShape(2, 1e-9), 5e-9, len(code), tuple(code))
        s = build_ranging_signal(spec, FS)
        expected = spec.code_weight * self.pulse_energy()
        assert s.energy == pytest.approx(expected, rel=1e-9, abs=1e-30)


class TestSpectralMetrics:
    def test_fcc_edges_arithmetic(self):
        m = SpectralMetrics(3.1e9, 10.6e9, 0.0)
        assert m.bandwidth == pytest.approx(7.5e9)
        assert m.center_frequency == pytest.approx(6.85e9)
        assert m.fractional_bandwidth == pytest.approx(1.0949, abs=1e-4)

    def test_order0_sigma_1ns(self):
        w = gaussian_pulse(0, 7e-9, 20e9)
        beta = spectral_metrics(w).beta
        assert beta == pytest.approx(1 / (2 * np.sqrt(2) * np.pi * 1e-9), rel=0.01)
        assert beta == pytest.approx(112.5e6, rel=0.01)

    def test_amplitude_scaling_invariance(self):
        w = gaussian_pulse(2, 1e-9, FS)
        a, b = spectral_metrics(w), spectral_metrics(w.scaled(2.0))
        assert b.f_low == pytest.approx(a.f_low, rel=1e-12)
        assert b.f_high == pytest.approx(a.f_high, rel=1e-12)
        assert b.beta == pytest.approx(a.beta, rel=1e-12)

    def test_edges_are_ten_db_down(self):
        w = gaussian_pulse(2, 1e-9, FS)
        m = spectral_metrics(w)
        sigma = 1e-9 / 7
        # analytic ESD of the 2nd derivative: f^4 exp(-4 pi^2 sigma^2 f^2)
        esd = lambda f: f**4 * np.exp(-4 * np.pi**2 * sigma**2 * f**2)
        peak = esd(1 / (np.sqrt(2) * np.pi * sigma))
        assert esd(m.f_low) / peak == pytest.approx(0.1, rel=0.02)
        assert esd(m.f_high) / peak == pytest.approx(0.1, rel=0.02)

    def test_zero_energy(self):
        with pytest.raises(ValueError):
            spectral_metrics(Waveform(FS, np.zeros(64)))

    def test_esd_parseval(self):
        w = gaussian_pulse(5, 1e-9, FS)
        f, esd = energy_spectral_density(w)
        assert np.trapezoid(esd, f) == pytest.approx(w.energy, rel=1e-3)

    @given(
        st.integers(min_value=-40, max_value=40),
        st.floats(min_value=0.1, max_value=10.0),
    )
    def test_shift_and_scale_invariance(self, shift, scale):
        w = gaussian_pulse(1, 1e-9, FS)
        padded = Waveform(FS, np.concatenate([np.zeros(50), w.samples, np.zeros(50)]), t0=w.t0)
        moved = Waveform(FS, np.roll(padded.samples, shift) * scale, t0=1e-6)
        a, b = spectral_metrics(padded), spectral_metrics(moved)
        assert b.f_low == pytest.approx(a.f_low, rel=1e-6, abs=1e3)
        assert b.f_high == pytest.approx(a.f_high, rel=1e-6)
        assert b.beta == pytest.approx(a.beta, rel=1e-6)


class TestClassify:
    @pytest.mark.parametrize(
        "bw, fc, expected",
        [
            (500e6, 10e9, "uwb"),
            (400e6, 1e9, "uwb"),
            (300e6, 6e9, "not_uwb"),
        ],
    )
    def test_examples(self, bw, fc, expected):
        m = SpectralMetrics(fc - bw / 2, fc + bw / 2, 0.0)
        assert classify_uwb(m) == expected

    @given(
        st.floats(min_value=1e6, max_value=20e9),
        st.floats(min_value=1e3, max_value=5e9),
    )
    def test_agrees_with_inequalities(self, fc, bw):
        m = SpectralMetrics(max(fc - bw / 2, 0.0), fc + bw / 2, 0.0)
        direct = m.bandwidth >= 500e6 or m.fractional_bandwidth > 0.2
        assert (classify_uwb(m) == "uwb") == direct


class TestFccMask:
    def test_indoor_levels(self):
        mask = FccMask.indoor()
        assert mask.limit_at(5e9) == pytest.approx(-41.3)
        assert mask.limit_at(1.2e9) == pytest.approx(-75.3)
        assert mask.limit_at(2.5e9) == pytest.approx(-51.3)
        assert mask.limit_at(12e9) == pytest.approx(-51.3)

    def in_band_pulse(self):
        # 5th derivative of a 0.5 ns pulse sits inside 3.1-10.6 GHz
        return gaussian_pulse(5, 0.5e-9, 100e9)

    def test_exact_limit_passes_with_zero_margin(self):
        w = self.in_band_pulse()
        rep = check_fcc_mask(w, 1e-3)
        at_limit = check_fcc_mask(w, rep.p_max)
        assert at_limit.passed
        assert at_limit.margin_db == pytest.approx(0.0, abs=1e-9)

    def test_plus_one_db_fails(self):
        w = self.in_band_pulse()
        p_max = check_fcc_mask(w, 1e-3).p_max
        rep = check_fcc_mask(w, p_max * 10 ** 0.1)
        assert not rep.passed
        assert rep.margin_db == pytest.approx(-1.0, abs=1e-9)

    def test_frame_energy_bound_is_linear_in_frame_interval(self):
        w = self.in_band_pulse()
        a = check_fcc_mask(w, 1e-3, frame_interval=100e-9)
        b = check_fcc_mask(w, 1e-3, frame_interval=50e-9)
        assert a.p_max == pytest.approx(b.p_max)
        assert b.frame_energy_bound == pytest.approx(a.frame_energy_bound / 2)

    def test_mask_must_cover_band(self):
        w = self.in_band_pulse()
        narrow = FccMask((3e9, 4e9), (-41.3,))
        with pytest.raises(MaskCoverageError):
            check_fcc_mask(w, 1e-3, narrow)

    def test_average_psd_level(self):
        # PSD in dBm/MHz equals 10 log10(P * ESD / E * 1e6 * 1e3)
        w = self.in_band_pulse()
        rep = check_fcc_mask(w, 1e-3)
        f, esd = energy_spectral_density(w)
        k = int(np.argmax(esd))
        expected = 10 * np.log10(1e-3 * esd[k] / w.energy * 1e6 / 1e-3)
        assert np.max(rep.psd_dbm_per_mhz) == pytest.approx(expected, abs=1e-9)
