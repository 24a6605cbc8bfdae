"""First-step parameter estimation from received waveforms.

Delays follow the template convention: correlating ``r`` with ``template``
at lag ``m`` (template start aligned with ``r.samples[m]``) corresponds to a
TOA of ``r.t0 + m / fs - template.t0``. A template built by
:func:`uwbpos.signal.build_ranging_signal` is therefore timed by its first
pulse centre.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import signal as sps

from uwbpos.constants import (
    DEFAULT_FRACTION_OF_MAX,
    DEFAULT_NOISE_FLOOR_MULTIPLE,
    SPEED_OF_LIGHT,
)
from uwbpos.errors import InconsistentGeometryError, NoDetectionError
from uwbpos.signal import Waveform

# Relative tolerance used to treat correlation values as tied.
_TIE_RTOL = 1e-12
# Leading fraction of a search window used for the noise-floor estimate.
_NOISE_LEAD_FRACTION = 0.1
_MAD_TO_SIGMA = 1.4826


@dataclass(frozen=True)
class ThresholdPolicy:
    mode: str = "fraction_of_max"
    value: float = DEFAULT_FRACTION_OF_MAX

    def __post_init__(self):
        if self.mode not in ("fraction_of_max", "noise_floor_multiple"):
            raise ValueError(f"unknown threshold mode {self.mode!r}")
        if not self.value > 0:
            raise ValueError("threshold value must be positive")
        if self.mode == "fraction_of_max" and self.value > 1:
            raise ValueError("fraction_of_max threshold must be <= 1")

    @classmethod
    def noise_floor(cls, multiple: float = DEFAULT_NOISE_FLOOR_MULTIPLE):
        return cls("noise_floor_multiple", multiple)


@dataclass(frozen=True)
class ToaEstimate:
    """Result of a TOA search.

    Attributes:
        toa: Estimated delay, seconds (sub-sample refined).
        peak_statistic: Correlation value at the selected grid lag.
        method: ``"peak"``, ``"first_path"`` or ``"two_step"``.
        search_window: Delay interval that was searched, seconds.
        lag_index: Selected grid lag relative to ``r``.
        evaluations: Number of correlation lags evaluated.
        coarse_block: Energy-detector block index (two-step only).
        grid_toa: Delay of the selected grid lag before refinement.
    """

    toa: float
    peak_statistic: float
    method: str
    search_window: tuple[float, float]
    lag_index: int
    evaluations: int
    coarse_block: int | None = None
    grid_toa: float = 0.0


@dataclass(frozen=True)
class UlaConfig:
    num_elements: int = 4
    spacing: float = 0.05

    def __post_init__(self):
        if self.num_elements < 2:
            raise ValueError("a ULA needs at least two elements")
        if not self.spacing > 0:
            raise ValueError("element spacing must be positive")


class AoaEstimate(NamedTuple):
    angle: float
    residual: float


class _Correlation(NamedTuple):
    values: np.ndarray
    first_lag: int
    delay0: float  # delay of values[0]
    fs: float


def _lag_range(r: Waveform, template: Waveform, window) -> tuple[int, int]:
    n_valid = len(r) - len(template)
    if n_valid < 0:
        raise ValueError("template must not be longer than the received record")
    lo, hi = 0, n_valid
    if window is not None:
        base = r.t0 - template.t0
        lo = max(lo, int(np.ceil((window[0] - base) * r.sample_rate - 1e-9)))
        hi = min(hi, int(np.floor((window[1] - base) * r.sample_rate + 1e-9)))
    if hi < lo:
        raise ValueError("search window contains no valid lag")
    return lo, hi


def _correlate(r: Waveform, template: Waveform, window=None) -> _Correlation:
    if r.sample_rate != template.sample_rate:
        raise ValueError("record and template sample rates differ")
    if not np.any(template.samples):
        raise ValueError("zero-energy template")
    lo, hi = _lag_range(r, template, window)
    seg = r.samples[lo : hi + len(template)]
    c = sps.correlate(seg, template.samples, mode="valid")
    delay0 = r.t0 - template.t0 + lo / r.sample_rate
    return _Correlation(c, lo, delay0, r.sample_rate)


def _earliest_argmax(x: np.ndarray) -> int:
    top = x.max()
    return int(np.flatnonzero(x >= top - _TIE_RTOL * abs(top))[0])


def _parabolic_offset(y: np.ndarray, i: int) -> float:
    """Vertex offset (samples) of the parabola through y[i-1], y[i], y[i+1]."""
    if i <= 0 or i >= y.size - 1:
        return 0.0
    a, b, c = y[i - 1], y[i], y[i + 1]
    den = a - 2.0 * b + c
    if den >= 0:
        return 0.0
    return float(np.clip(0.5 * (a - c) / den, -0.5, 0.5))


def _window_of(corr: _Correlation) -> tuple[float, float]:
    return (corr.delay0, corr.delay0 + (corr.values.size - 1) / corr.fs)


def _estimate(corr: _Correlation, i: int, method: str, coarse=None) -> ToaEstimate:
    grid = corr.delay0 + i / corr.fs
    frac = _parabolic_offset(corr.values, i)
    return ToaEstimate(
        toa=grid + frac / corr.fs,
        peak_statistic=float(corr.values[i]),
        method=method,
        search_window=_window_of(corr),
        lag_index=corr.first_lag + i,
        evaluations=int(corr.values.size),
        coarse_block=coarse,
        grid_toa=grid,
    )


def pulse_support(template: Waveform) -> int:
    """Length in samples of the first contiguous non-zero run of a template."""
    nz = np.flatnonzero(template.samples)
    start = nz[0]
    gaps = np.flatnonzero(template.samples[start:] == 0)
    return int(gaps[0]) if gaps.size else int(template.samples.size - start)


def measured_rss(r: Waveform, T: float) -> tuple[float, float]:
    """Average power ``(1/T) int_0^T |r|^2 dt`` as (linear, dB)."""
    if not T > 0:
        raise ValueError("integration time must be positive")
    n = int(round(T * r.sample_rate))
    if n > len(r):
        raise ValueError("integration time exceeds the record length")
    x = r.samples[:n]
    p = float(np.dot(x, x)) / r.sample_rate / T
    with np.errstate(divide="ignore"):
        return p, float(10.0 * np.log10(p))


def toa_peak(
    r: Waveform, template: Waveform, search_window: tuple[float, float] | None = None
) -> ToaEstimate:
    """Delay of the correlation peak, refined by a 3-point parabola.

    Ties go to the earliest lag.
    """
    corr = _correlate(r, template, search_window)
    return _estimate(corr, _earliest_argmax(corr.values), "peak")


def _noise_sigma(values: np.ndarray) -> float:
    n = max(3, int(np.ceil(_NOISE_LEAD_FRACTION * values.size)))
    lead = values[:n]
    return _MAD_TO_SIGMA * float(np.median(np.abs(lead - np.median(lead))))


def _threshold(values: np.ndarray, policy: ThresholdPolicy) -> float:
    top = float(np.max(np.abs(values)))
    if policy.mode == "fraction_of_max":
        return policy.value * float(values.max())
    # a noiseless lead segment would give a zero floor
    return policy.value * max(_noise_sigma(values), 1e-9 * top)


def _crosses(x: np.ndarray, thr: float, policy: ThresholdPolicy) -> np.ndarray:
    # a fraction of the maximum is reached by the maximum itself, so fraction 1 still detects
    return x >= thr if policy.mode == "fraction_of_max" else x > thr


def toa_first_path(
    r: Waveform,
    template: Waveform,
    policy: ThresholdPolicy = ThresholdPolicy(),
    search_window: tuple[float, float] | None = None,
    refine_span: float | None = None,
) -> ToaEstimate:
    """Serial-search first-path TOA.

    Scans the correlation from the start of the window for the first value
    above the policy threshold (at or above it for ``fraction_of_max``), then takes the largest correlation within
    ``refine_span`` seconds after it (default: the template's first-pulse
    length) and refines it with a parabola.

    Raises:
        NoDetectionError: if the threshold is never exceeded.
    """
    corr = _correlate(r, template, search_window)
    c = corr.values
    thr = _threshold(c, policy)
    if c.max() <= 0:
        raise NoDetectionError("correlation never positive in the search window")
    hits = np.flatnonzero(_crosses(c, thr, policy))
    if hits.size == 0:
        raise NoDetectionError(f"threshold {thr:.3g} not exceeded")
    i = int(hits[0])
    if refine_span is None:
        span = pulse_support(template)
    else:
        span = max(0, int(round(refine_span * r.sample_rate)))
    j = i + _earliest_argmax(c[i : i + span + 1])
    return _estimate(corr, j, "first_path")


def block_energies(r: Waveform, block: float, start: float | None = None) -> np.ndarray:
    """Energy of ``r`` in consecutive blocks of ``block`` seconds."""
    n_block = int(round(block * r.sample_rate))
    if n_block < 1:
        raise ValueError("block shorter than one sample")
    i0 = 0 if start is None else max(0, int(round((start - r.t0) * r.sample_rate)))
    x = r.samples[i0:]
    n_full = x.size // n_block
    e = (x[: n_full * n_block] ** 2).reshape(n_full, n_block).sum(axis=1)
    if x.size > n_full * n_block:
        e = np.append(e, np.sum(x[n_full * n_block :] ** 2))
    return e / r.sample_rate


def toa_two_step(
    r: Waveform,
    template: Waveform,
    block: float,
    policy: ThresholdPolicy = ThresholdPolicy(),
    fine_policy: ThresholdPolicy | None = None,
    refine_span: float | None = None,
) -> ToaEstimate:
    """Energy-detector coarse search followed by a local first-path search.

    Stage 1 squares and integrates ``r`` over consecutive blocks and picks
    the earliest block whose energy exceeds the coarse threshold. The policy
    is read in amplitude terms so that one policy means the same thing in
    both stages. Block energies are measured as excess over the median
    block energy (the noise floor when most blocks hold only noise):
    ``fraction_of_max`` compares the excess with ``value**2`` times the
    largest excess; ``noise_floor_multiple`` compares it with ``value``
    robust (MAD) standard deviations of the block energies. Stage 2 runs :func:`toa_first_path`
    with ``fine_policy`` (default ``policy``) over the selected block
    widened by one block on each side.
    """
    fs = r.sample_rate
    n_block = int(round(block * fs))
    if n_block < pulse_support(template):
        raise ValueError("block must be at least one pulse long")
    e = block_energies(r, block)
    med = float(np.median(e))
    if policy.mode == "fraction_of_max":
        thr = med + policy.value**2 * (e.max() - med)
    else:
        thr = med + policy.value * _MAD_TO_SIGMA * float(np.median(np.abs(e - med)))
    hits = np.flatnonzero(_crosses(e, thr, policy))
    if hits.size == 0 or e.max() == 0:
        raise NoDetectionError("energy detector found no block above threshold")
    b = int(hits[0])
    lo = r.t0 + (b - 1) * n_block / fs
    hi = r.t0 + (b + 2) * n_block / fs
    fine = toa_first_path(
        r, template, fine_policy or policy, search_window=(lo, hi), refine_span=refine_span
    )
    return ToaEstimate(
        toa=fine.toa,
        peak_statistic=fine.peak_statistic,
        method="two_step",
        search_window=fine.search_window,
        lag_index=fine.lag_index,
        evaluations=fine.evaluations,
        coarse_block=b,
        grid_toa=fine.grid_toa,
    )


def tdoa_cross_correlate(r1: Waveform, r2: Waveform) -> float:
    """Delay maximising ``|int r1(t) r2(t + tau) dt|``, in seconds.

    With this form the result is ``toa(r2) - toa(r1)``: if ``r2`` is ``r1``
    delayed by ``D`` the estimate is ``+D``. Polarity is ignored.
    """
    if r1.sample_rate != r2.sample_rate:
        raise ValueError("records must share a sample rate")
    if not (np.any(r1.samples) and np.any(r2.samples)):
        raise ValueError("zero-energy input")
    z = np.abs(sps.correlate(r2.samples, r1.samples, mode="full"))
    lags = sps.correlation_lags(len(r2), len(r1), mode="full")
    i = _earliest_argmax(z)
    k = lags[i] + _parabolic_offset(z, i)
    return float(r2.t0 - r1.t0 + k / r1.sample_rate)


def tdoa_from_toas(t1: ToaEstimate | float, t2: ToaEstimate | float) -> float:
    """``toa1 - toa2``; any common clock offset cancels."""
    a = t1.toa if isinstance(t1, ToaEstimate) else float(t1)
    b = t2.toa if isinstance(t2, ToaEstimate) else float(t2)
    return a - b


def ula_element_delays(
    alpha: float, cfg: UlaConfig, base_delay: float = 0.0
) -> np.ndarray:
    """Plane-wave arrival times at the array elements."""
    k = np.arange(cfg.num_elements)
    return base_delay + k * cfg.spacing * np.sin(alpha) / SPEED_OF_LIGHT


def aoa_ula(
    element_delays: Sequence[float], cfg: UlaConfig, tol: float = 1e-6
) -> AoaEstimate:
    """Arrival angle from per-element delays of a ULA.

    Fits ``d_k = d_0 + k * l sin(alpha) / c`` by least squares. The residual
    is the RMS misfit in seconds.

    Raises:
        InconsistentGeometryError: if ``|c * slope / l|`` exceeds 1 + tol.
    """
    d = np.asarray(element_delays, dtype=float)
    if d.size != cfg.num_elements:
        raise ValueError(f"expected {cfg.num_elements} delays, got {d.size}")
    k = np.arange(d.size, dtype=float)
    A = np.column_stack([np.ones_like(k), k])
    coef, *_ = np.linalg.lstsq(A, d, rcond=None)
    resid = d - A @ coef
    s = SPEED_OF_LIGHT * coef[1] / cfg.spacing
    if abs(s) > 1.0 + tol:
        raise InconsistentGeometryError(
            f"delay slope implies sin(alpha) = {s:.6g}, outside [-1, 1]"
        )
    angle = float(np.arcsin(np.clip(s, -1.0, 1.0)))
    return AoaEstimate(angle, float(np.sqrt(np.mean(resid**2))))
