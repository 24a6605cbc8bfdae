"""Statistical propagation: path loss, shadowing, multipath, NLOS bias, AWGN.

SNR convention used throughout the package::

    SNR = E_r / N0,    N0 = 2 * sigma_n^2 / fs

where ``E_r`` is the energy of the noiseless received signal and
``sigma_n^2`` is the per-sample variance of the white Gaussian noise.
With this convention the single-path TOA bound is
``1 / (2 sqrt(2) pi sqrt(SNR) beta)``.

Multipath is a simplified exponentially decaying tapped delay line, not
the full IEEE 802.15.4a model. Every random draw takes an explicit
``numpy.random.Generator``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from os import PathLike

import numpy as np

from uwbpos.signal import Waveform


@dataclass(frozen=True)
class MultipathConfig:
    """Tapped-delay-line statistics.

    Attributes:
        num_taps: L, number of paths (>= 1).
        tap_spacing: Mean delay between consecutive taps, seconds.
        decay: Power-delay decay constant gamma, seconds.
        jitter: Uniform delay jitter of taps k >= 1, as a fraction of
            ``tap_spacing`` (kept below 0.5 so delays stay increasing).
        p_weak_first: Probability that the first path is attenuated.
        weak_first_factor: Amplitude factor applied to a weak first path.
    """

    num_taps: int = 1
    tap_spacing: float = 5e-9
    decay: float = 20e-9
    jitter: float = 0.25
    p_weak_first: float = 0.0
    weak_first_factor: float = 0.3

    def __post_init__(self):
        if self.num_taps < 1:
            raise ValueError("num_taps must be >= 1")
        if self.num_taps > 1 and not self.tap_spacing > 0:
            raise ValueError("tap_spacing must be positive")
        if not self.decay > 0:
            raise ValueError("decay must be positive")
        if not 0 <= self.jitter < 0.5:
            raise ValueError("jitter must be in [0, 0.5)")
        if not 0 <= self.p_weak_first <= 1:
            raise ValueError("p_weak_first must be a probability")
        if not 0 <= self.weak_first_factor <= 1:
            raise ValueError("weak_first_factor must be in [0, 1]")


@dataclass(frozen=True)
class NlosConfig:
    """Exponential excess-delay law for blocked direct paths."""

    enabled: bool = False
    mean_bias: float = 0.0
    first_path_attenuation: float = 1.0

    def __post_init__(self):
        if self.mean_bias < 0:
            raise ValueError("mean_bias must be >= 0")
        if not 0 <= self.first_path_attenuation <= 1:
            raise ValueError("first_path_attenuation must be in [0, 1]")


@dataclass(frozen=True)
class ChannelParams:
    """Channel description.

    ``snr_db`` is the per-pulse SNR ``E_pulse / N0`` at the receiver, so a
    signal with ``w`` non-zero code chips sees a total SNR of ``w`` times it.
    ``None`` disables thermal noise. When ``snr_follows_path_loss`` is set
    ``snr_db`` applies at ``d0`` and falls off with :func:`mean_rss`.
    """

    path_loss_exponent: float = 2.0
    p0_db: float = -40.0
    d0: float = 1.0
    sigma_sh: float = 0.0
    snr_db: float | None = None
    snr_follows_path_loss: bool = False
    multipath: MultipathConfig = field(default_factory=MultipathConfig)
    nlos: NlosConfig = field(default_factory=NlosConfig)

    def __post_init__(self):
        if not self.path_loss_exponent > 0:
            raise ValueError("path_loss_exponent must be positive")
        if not self.d0 > 0:
            raise ValueError("d0 must be positive")
        if self.sigma_sh < 0:
            raise ValueError("sigma_sh must be >= 0")


@dataclass(frozen=True, eq=False)
class MultipathProfile:
    """Resolved channel realisation: tap delays (s) and real gains."""

    delays: np.ndarray
    gains: np.ndarray
    nlos_bias: float = 0.0

    def __post_init__(self):
        d = np.array(self.delays, dtype=float).ravel()
        g = np.array(self.gains, dtype=float).ravel()
        if d.size == 0:
            raise ValueError("profile needs at least one tap")
        if d.size != g.size:
            raise ValueError("delays and gains differ in length")
        if np.any(np.diff(d) <= 0):
            raise ValueError("tap delays must be strictly increasing")
        if not np.all(np.isfinite(g)):
            raise ValueError("tap gains must be finite")
        d.setflags(write=False)
        g.setflags(write=False)
        object.__setattr__(self, "delays", d)
        object.__setattr__(self, "gains", g)

    @classmethod
    def single(cls, delay: float, gain: float = 1.0) -> "MultipathProfile":
        return cls(np.array([delay]), np.array([gain]))

    @property
    def first_delay(self) -> float:
        return float(self.delays[0])

    @property
    def energy(self) -> float:
        return float(np.dot(self.gains, self.gains))

    def to_csv(self, path: str | PathLike) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["delay_s", "gain"])
            for d, g in zip(self.delays, self.gains):
                writer.writerow([repr(float(d)), repr(float(g))])


def mean_rss(p: ChannelParams, d: float) -> float:
    """Average received power in dB, ``P0 - 10 n log10(d / d0)``."""
    if not d > 0:
        raise ValueError("distance must be positive")
    return p.p0_db - 10.0 * p.path_loss_exponent * np.log10(d / p.d0)


def sample_rss(p: ChannelParams, d: float, rng: np.random.Generator) -> float:
    """One shadowed RSS draw in dB, Normal(mean_rss, sigma_sh^2)."""
    mu = mean_rss(p, d)
    if p.sigma_sh == 0:
        return float(mu)
    return float(rng.normal(mu, p.sigma_sh))


def rss_to_range(p: ChannelParams, rss_db: float) -> float:
    """Invert the path-loss law for distance."""
    return p.d0 * 10.0 ** ((p.p0_db - rss_db) / (10.0 * p.path_loss_exponent))


def draw_multipath_profile(
    cfg: MultipathConfig, true_delay: float, rng: np.random.Generator
) -> MultipathProfile:
    """Exponentially decaying tapped delay line starting at ``true_delay``.

    Tap k sits at ``true_delay + k * spacing`` plus uniform jitter (k >= 1).
    Its amplitude is ``exp(-k * spacing / decay)`` times a Rayleigh draw;
    taps k >= 1 get a random sign, the first tap is positive. With
    probability ``p_weak_first`` the first tap is scaled by
    ``weak_first_factor``. Gains are normalised to unit energy.
    """
    L = cfg.num_taps
    if L == 1:
        return MultipathProfile.single(true_delay, 1.0)
    k = np.arange(L)
    jitter = np.zeros(L)
    jitter[1:] = rng.uniform(-cfg.jitter, cfg.jitter, L - 1) * cfg.tap_spacing
    delays = true_delay + k * cfg.tap_spacing + jitter
    mags = np.exp(-k * cfg.tap_spacing / cfg.decay) * rng.rayleigh(1.0, L)
    signs = np.ones(L)
    signs[1:] = rng.choice([-1.0, 1.0], L - 1)
    if rng.random() < cfg.p_weak_first:
        mags[0] *= cfg.weak_first_factor
    gains = signs * mags
    gains /= np.sqrt(np.dot(gains, gains))
    return MultipathProfile(delays, gains)


def apply_nlos(
    profile: MultipathProfile, cfg: NlosConfig, rng: np.random.Generator
) -> MultipathProfile:
    """Delay every tap by ``b ~ Exp(mean_bias)`` and attenuate the first tap."""
    if not cfg.enabled:
        return profile
    bias = float(rng.exponential(cfg.mean_bias)) if cfg.mean_bias > 0 else 0.0
    gains = np.array(profile.gains)
    gains[0] *= cfg.first_path_attenuation
    return replace(
        profile,
        delays=profile.delays + bias,
        gains=gains,
        nlos_bias=profile.nlos_bias + bias,
    )


def noise_variance_for_snr(signal_energy: float, snr_db: float, sample_rate: float) -> float:
    """Per-sample noise variance giving ``E / N0 = 10^(snr_db/10)``."""
    n0 = signal_energy / 10.0 ** (snr_db / 10.0)
    return 0.5 * n0 * sample_rate


def propagate(
    s: Waveform,
    profile: MultipathProfile,
    snr_db: float | None,
    rng: np.random.Generator | None = None,
    *,
    t_start: float = 0.0,
    duration: float | None = None,
    noise_var: float | None = None,
) -> Waveform:
    """Received record ``r(t) = sum_k g_k s(t - tau_k) + n(t)``.

    The record starts at ``t_start`` and by default ends one source length
    after the last tap. Tap delays are rounded to the nearest sample; the
    rounded values and the remainders are kept in ``meta["applied_delays"]``
    and ``meta["delay_remainders"]`` (applied minus requested).

    Noise is white Gaussian. Its per-sample variance is ``noise_var`` when
    given, otherwise it follows the package SNR convention from the
    noiseless received energy and ``snr_db``. ``snr_db`` of ``None`` or
    ``inf`` (and no ``noise_var``) gives a noiseless record.
    """
    fs = s.sample_rate
    offsets = np.rint((profile.delays + s.t0 - t_start) * fs).astype(np.int64)
    if offsets[0] < 0:
        raise ValueError("first tap arrives before the record start")
    n_src = len(s)
    if duration is None:
        n_out = int(offsets[-1]) + n_src
    else:
        n_out = int(round(duration * fs))
    clean = np.zeros(n_out)
    for off, g in zip(offsets, profile.gains):
        if g == 0 or off >= n_out:
            continue
        end = min(n_out, off + n_src)
        clean[off:end] += g * s.samples[: end - off]

    applied = t_start + offsets / fs - s.t0
    meta = {
        "applied_delays": tuple(float(v) for v in applied),
        "delay_remainders": tuple(float(v) for v in applied - profile.delays),
        "nlos_bias": profile.nlos_bias,
    }

    if noise_var is None and snr_db is not None and np.isfinite(snr_db):
        e_r = float(np.dot(clean, clean)) / fs
        noise_var = noise_variance_for_snr(e_r, snr_db, fs)
    if noise_var:
        if rng is None:
            raise ValueError("a random generator is required for noisy records")
        clean = clean + rng.normal(0.0, np.sqrt(noise_var), n_out)
    meta["noise_var"] = float(noise_var or 0.0)
    return Waveform(fs, clean, t0=t_start, meta=meta)
