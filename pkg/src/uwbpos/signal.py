"""UWB pulses, coded impulse-radio ranging signals and their spectral metrics.

Waveforms are real baseband (carrier-free) sample sequences on a uniform
grid. Energies are computed with the rectangle rule, ``sum(s**2) / fs``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from os import PathLike
from types import MappingProxyType
from typing import Mapping

import numpy as np
from numpy.polynomial.hermite_e import hermeval

from uwbpos.constants import PULSE_WIDTH_IN_SIGMAS, SPECTRUM_ZERO_PAD
from uwbpos.errors import MaskCoverageError, UndersampledError

SUPPORTED_ORDERS = (0, 1, 2, 5)

# Minimum number of samples per pulse width accepted by gaussian_pulse.
MIN_SAMPLES_PER_WIDTH = 20.0


@dataclass(frozen=True, eq=False)
class Waveform:
    """Uniformly sampled real signal.

    Attributes:
        sample_rate: Samples per second.
        samples: Amplitudes; stored as a read-only float array.
        t0: Time of the first sample in seconds.
        meta: Free-form read-only annotations (e.g. applied channel delays).
    """

    sample_rate: float
    samples: np.ndarray
    t0: float = 0.0
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        arr = np.array(self.samples, dtype=float).ravel()
        if arr.size == 0:
            raise ValueError("waveform must contain at least one sample")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "meta", MappingProxyType(dict(self.meta)))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.samples.size) / self.sample_rate

    @property
    def energy(self) -> float:
        return float(np.dot(self.samples, self.samples)) / self.sample_rate

    def scaled(self, factor: float) -> "Waveform":
        return Waveform(self.sample_rate, self.samples * factor, self.t0, self.meta)

    def shifted(self, delay: float) -> "Waveform":
        """Same samples, time axis moved later by ``delay`` seconds."""
        return Waveform(self.sample_rate, self.samples, self.t0 + delay, self.meta)

    def to_csv(self, path: str | PathLike) -> None:
        """Write a two-column ``time_s,amplitude`` CSV file."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time_s", "amplitude"])
            for t, a in zip(self.times, self.samples):
                writer.writerow([repr(float(t)), repr(float(a))])

    @classmethod
    def from_csv(cls, path: str | PathLike) -> "Waveform":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        t, a = data[:, 0], data[:, 1]
        if t.size < 2:
            raise ValueError("need at least two samples to recover the sample rate")
        dt = np.diff(t)
        fs = 1.0 / float(np.mean(dt))
        return cls(fs, a, float(t[0]))


@dataclass(frozen=True)
class PulseShape:
    """Gaussian-derivative pulse; ``width`` maps to sigma via ``width_in_sigmas``."""

    order: int = 2
    width: float = 1e-9
    width_in_sigmas: float = PULSE_WIDTH_IN_SIGMAS

    def __post_init__(self):
        if self.order not in SUPPORTED_ORDERS:
            raise ValueError(
                f"unsupported pulse order {self.order}; supported: {SUPPORTED_ORDERS}"
            )
        if not self.width > 0:
            raise ValueError("pulse width must be positive")
        if not self.width_in_sigmas > 0:
            raise ValueError("width_in_sigmas must be positive")

    @property
    def sigma(self) -> float:
        return self.width / self.width_in_sigmas

    def effective_bandwidth(self) -> float:
        """Closed-form effective bandwidth of the untruncated pulse.

        The order-n derivative has ``|S(f)|^2 ~ f^(2n) exp(-4 pi^2 sigma^2 f^2)``,
        whose normalized second moment is ``(2n + 1) / (8 pi^2 sigma^2)``.
        """
        return float(np.sqrt((2 * self.order + 1) / 8.0) / (np.pi * self.sigma))


@dataclass(frozen=True)
class RangingSignalSpec:
    """Impulse-radio ranging signal ``s(t) = sum_j a_j w(t - j T_f)``."""

    pulse: PulseShape
    frame_interval: float
    num_frames: int = 1
    code: tuple[int, ...] = (1,)

    def __post_init__(self):
        object.__setattr__(self, "code", tuple(int(a) for a in self.code))
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")
        if len(self.code) != self.num_frames:
            raise ValueError(
                f"code length {len(self.code)} != num_frames {self.num_frames}"
            )
        if any(a not in (-1, 0, 1) for a in self.code):
            raise ValueError("code entries must be -1, 0 or +1")
        if not self.frame_interval > self.pulse.width:
            raise ValueError("frame_interval must exceed the pulse width")

    @property
    def duration(self) -> float:
        return self.num_frames * self.frame_interval

    @property
    def code_weight(self) -> int:
        """Number of frames that actually carry a pulse."""
        return sum(1 for a in self.code if a != 0)


@dataclass(frozen=True)
class SpectralMetrics:
    f_low: float
    f_high: float
    beta: float = 0.0

    def __post_init__(self):
        if self.f_low > self.f_high:
            raise ValueError("f_low must not exceed f_high")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")

    @property
    def bandwidth(self) -> float:
        return self.f_high - self.f_low

    @property
    def center_frequency(self) -> float:
        return 0.5 * (self.f_high + self.f_low)

    @property
    def fractional_bandwidth(self) -> float:
        s = self.f_high + self.f_low
        if s == 0:
            return 0.0
        return 2.0 * (self.f_high - self.f_low) / s


def gaussian_pulse(
    order: int,
    width: float,
    sample_rate: float,
    width_in_sigmas: float = PULSE_WIDTH_IN_SIGMAS,
) -> Waveform:
    """Sampled ``order``-th derivative of ``exp(-t^2 / (2 sigma^2))``.

    The pulse is centred on t = 0 (a sample falls exactly there), spans
    ``[-0.75 width, +0.75 width]`` and is scaled so that ``max|w| == 1``.

    Raises:
        UndersampledError: if ``sample_rate < 20 / width``.
        ValueError: for orders outside ``SUPPORTED_ORDERS``.
    """
    shape = PulseShape(order, width, width_in_sigmas)
    if sample_rate * width < MIN_SAMPLES_PER_WIDTH * (1 - 1e-12):
        raise UndersampledError(
            f"sample_rate {sample_rate:g} Hz gives fewer than "
            f"{MIN_SAMPLES_PER_WIDTH:g} samples per {width:g} s pulse"
        )
    half = int(np.ceil(0.75 * width * sample_rate))
    t = np.arange(-half, half + 1) / sample_rate
    x = t / shape.sigma
    coeffs = np.zeros(order + 1)
    coeffs[order] = 1.0
    # d^n/dt^n exp(-t^2/2s^2) = (-1/s)^n He_n(t/s) exp(-t^2/2s^2)
    w = (-1.0) ** order * hermeval(x, coeffs) * np.exp(-0.5 * x * x)
    w /= np.max(np.abs(w))
    return Waveform(sample_rate, w, t0=float(t[0]))


def build_ranging_signal(spec: RangingSignalSpec, sample_rate: float) -> Waveform:
    """Coded pulse train; the first pulse is centred on t = 0.

    The record spans exactly ``num_frames`` frames. Frames with code 0 are
    left empty, so the energy equals ``code_weight * pulse_energy``.
    """
    pulse = gaussian_pulse(
        spec.pulse.order, spec.pulse.width, sample_rate, spec.pulse.width_in_sigmas
    )
    frame = int(round(spec.frame_interval * sample_rate))
    n_pulse = len(pulse)
    if frame < n_pulse:
        raise ValueError(
            f"frame interval of {frame} samples is shorter than the "
            f"{n_pulse}-sample pulse; pulses would overlap"
        )
    out = np.zeros(spec.num_frames * frame)
    for j, a in enumerate(spec.code):
        if a:
            out[j * frame : j * frame + n_pulse] = a * pulse.samples
    return Waveform(sample_rate, out, t0=pulse.t0)


def energy_spectral_density(
    w: Waveform, zero_pad: int = SPECTRUM_ZERO_PAD
) -> tuple[np.ndarray, np.ndarray]:
    """One-sided energy spectral density in J/Hz on ``[0, fs/2]``.

    Integrating the result over frequency returns ``w.energy``.
    """
    n = zero_pad * len(w)
    spec = np.fft.rfft(w.samples, n) * w.dt
    freqs = np.fft.rfftfreq(n, w.dt)
    esd = np.abs(spec) ** 2
    esd[1:] *= 2.0
    if n % 2 == 0:
        esd[-1] /= 2.0
    return freqs, esd


def effective_bandwidth(w: Waveform) -> float:
    """Effective (RMS) bandwidth from the time-domain derivative identity.

    ``beta^2 = int |s'|^2 dt / (4 pi^2 int |s|^2 dt)``, with ``s'`` from a
    five-point central difference and the two samples at each edge dropped.
    """
    s = w.samples
    if s.size < 5:
        raise ValueError("need at least 5 samples for the derivative stencil")
    ds = (-s[4:] + 8.0 * s[3:-1] - 8.0 * s[1:-3] + s[:-4]) * (w.sample_rate / 12.0)
    core = s[2:-2]
    e = float(np.dot(core, core))
    if e == 0.0:
        raise ValueError("zero-energy waveform has no effective bandwidth")
    return float(np.sqrt(np.dot(ds, ds) / e) / (2.0 * np.pi))


def _crossing(f0, f1, d0, d1, level):
    if d1 == d0:
        return f0
    return f0 + (level - d0) * (f1 - f0) / (d1 - d0)


def spectral_metrics(w: Waveform, zero_pad: int = SPECTRUM_ZERO_PAD) -> SpectralMetrics:
    """-10 dB band edges and effective bandwidth of a waveform.

    Band edges are the outermost frequencies where the energy spectral
    density is 10 dB below its maximum, linearly interpolated on the dB
    scale between DFT bins. A spectrum that is already within 10 dB of its
    peak at DC gets ``f_low = 0``.
    """
    if not np.any(w.samples):
        raise ValueError("zero-energy waveform has no spectrum")
    freqs, esd = energy_spectral_density(w, zero_pad)
    peak = esd.max()
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(esd / peak)
    above = np.flatnonzero(db >= -10.0)
    lo, hi = above[0], above[-1]
    if lo == 0:
        f_low = 0.0
    else:
        f_low = _crossing(freqs[lo - 1], freqs[lo], db[lo - 1], db[lo], -10.0)
    if hi == freqs.size - 1:
        f_high = float(freqs[hi])
    else:
        f_high = _crossing(freqs[hi], freqs[hi + 1], db[hi], db[hi + 1], -10.0)
    return SpectralMetrics(float(f_low), float(f_high), effective_bandwidth(w))


def classify_uwb(m: SpectralMetrics) -> str:
    """``"uwb"`` iff B >= 500 MHz or the fractional bandwidth exceeds 0.2."""
    if m.bandwidth >= 500e6 or m.fractional_bandwidth > 0.2:
        return "uwb"
    return "not_uwb"


@dataclass(frozen=True)
class FccMask:
    """Piecewise-constant EIRP limit in dBm/MHz.

    ``edges`` has one more entry than ``limits``; band k covers
    ``[edges[k], edges[k+1])``. The last edge may be ``inf``.
    """

    edges: tuple[float, ...]
    limits: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(float(e) for e in self.edges))
        object.__setattr__(self, "limits", tuple(float(v) for v in self.limits))
        if len(self.edges) != len(self.limits) + 1:
            raise ValueError("need len(edges) == len(limits) + 1")
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ValueError("mask edges must be strictly increasing")

    @classmethod
    def indoor(cls) -> "FccMask":
        """FCC indoor communications limit (in-band -41.3 dBm/MHz)."""
        return cls(
            edges=(0.0, 0.96e9, 1.61e9, 1.99e9, 3.1e9, 10.6e9, np.inf),
            limits=(-41.3, -75.3, -53.3, -51.3, -41.3, -51.3),
        )

    def covers(self, f_lo: float, f_hi: float) -> bool:
        return self.edges[0] <= f_lo and f_hi <= self.edges[-1]

    def limit_at(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        idx = np.searchsorted(self.edges, f, side="right") - 1
        out = np.full(f.shape, np.nan)
        ok = (idx >= 0) & (idx < len(self.limits))
        out[ok] = np.asarray(self.limits)[idx[ok]]
        return out


@dataclass(frozen=True)
class BandMargin:
    f_low: float
    f_high: float
    limit_dbm_per_mhz: float
    peak_dbm_per_mhz: float
    margin_db: float


@dataclass(frozen=True)
class ComplianceReport:
    passed: bool
    margin_db: float
    bands: tuple[BandMargin, ...]
    avg_power: float
    p_max: float
    frame_energy_bound: float
    freqs: np.ndarray = field(repr=False)
    psd_dbm_per_mhz: np.ndarray = field(repr=False)


def check_fcc_mask(
    w: Waveform,
    avg_power: float,
    mask: FccMask | None = None,
    frame_interval: float | None = None,
    zero_pad: int = SPECTRUM_ZERO_PAD,
) -> ComplianceReport:
    """Compare the average PSD of ``w`` at ``avg_power`` watts with a mask.

    The average PSD is the one-sided energy spectral density divided by the
    record duration, rescaled so that it integrates to ``avg_power``, and
    expressed per 1 MHz resolution bandwidth. ``p_max`` is the average power
    at which the tightest band is met exactly; ``frame_energy_bound`` is
    ``frame_interval * p_max`` (``frame_interval`` defaults to the record
    duration).

    Raises:
        MaskCoverageError: if the mask does not span the -10 dB band.
    """
    if not avg_power > 0:
        raise ValueError("avg_power must be positive")
    if not np.any(w.samples):
        raise ValueError("zero-energy waveform")
    mask = FccMask.indoor() if mask is None else mask
    metrics = spectral_metrics(w, zero_pad)
    if not mask.covers(metrics.f_low, metrics.f_high):
        raise MaskCoverageError(
            f"mask [{mask.edges[0]:g}, {mask.edges[-1]:g}] Hz does not cover the "
            f"occupied band [{metrics.f_low:g}, {metrics.f_high:g}] Hz"
        )
    freqs, esd = energy_spectral_density(w, zero_pad)
    # avg PSD = esd / T scaled by avg_power / (E / T)  ->  avg_power * esd / E
    psd_w_per_mhz = avg_power * esd / w.energy * 1e6
    with np.errstate(divide="ignore"):
        psd_dbm = 10.0 * np.log10(psd_w_per_mhz) + 30.0

    bands = []
    fs_half = freqs[-1]
    for k, limit in enumerate(mask.limits):
        lo, hi = mask.edges[k], mask.edges[k + 1]
        if lo > fs_half:
            break
        sel = (freqs >= lo) & (freqs < hi)
        if not np.any(sel):
            continue
        peak = float(np.max(psd_dbm[sel]))
        bands.append(BandMargin(lo, hi, limit, peak, limit - peak))
    margin = min(b.margin_db for b in bands)
    p_max = avg_power * 10.0 ** (margin / 10.0)
    t_f = w.duration if frame_interval is None else frame_interval
    return ComplianceReport(
        passed=margin >= -1e-9,
        margin_db=margin,
        bands=tuple(bands),
        avg_power=avg_power,
        p_max=p_max,
        frame_energy_bound=t_f * p_max,
        freqs=freqs,
        psd_dbm_per_mhz=psd_dbm,
    )

