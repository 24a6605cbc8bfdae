"""Closed-form accuracy limits: RSS, AOA and TOA Cramer-Rao bounds, capacity.

SNR arguments are linear; use :func:`db_to_linear` at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from uwbpos.constants import SPEED_OF_LIGHT
from uwbpos.errors import EndfireError


def db_to_linear(x_db: float) -> float:
    return 10.0 ** (x_db / 10.0)


def linear_to_db(x: float) -> float:
    return float(10.0 * np.log10(x))


def crlb_rss(n: float, sigma_sh: float, d: float) -> float:
    """Lower bound on the std of an unbiased RSS range estimate, meters."""
    if not n > 0:
        raise ValueError("path-loss exponent must be positive")
    if not d > 0:
        raise ValueError("distance must be positive")
    if sigma_sh < 0:
        raise ValueError("sigma_sh must be >= 0")
    return float(np.log(10.0) * sigma_sh * d / (10.0 * n))


def crlb_aoa(
    snr: float, beta: float, n_elements: int, spacing: float, alpha: float
) -> float:
    """Lower bound on the AOA std (radians) for a uniform linear array.

    ``snr`` is the per-element SNR.

    Raises:
        EndfireError: when ``cos(alpha)`` vanishes.
    """
    if n_elements < 2:
        raise ValueError("need at least two array elements")
    if not (snr > 0 and beta > 0 and spacing > 0):
        raise ValueError("snr, beta and spacing must be positive")
    cos_a = np.cos(alpha)
    if abs(alpha) >= np.pi / 2 or abs(cos_a) < 1e-12:
        raise EndfireError(f"AOA bound unbounded at alpha={alpha!r} rad")
    denom = (
        np.sqrt(2.0)
        * np.pi
        * np.sqrt(snr)
        * beta
        * np.sqrt(n_elements * (n_elements**2 - 1))
        * spacing
        * cos_a
    )
    return float(np.sqrt(3.0) * SPEED_OF_LIGHT / denom)


def crlb_toa(snr: float, beta: float) -> float:
    """Single-path TOA bound in seconds, ``1 / (2 sqrt(2) pi sqrt(SNR) beta)``."""
    if not (snr > 0 and beta > 0):
        raise ValueError("snr and beta must be positive")
    return float(1.0 / (2.0 * np.sqrt(2.0) * np.pi * np.sqrt(snr) * beta))


def crlb_range(snr: float, beta: float) -> float:
    return SPEED_OF_LIGHT * crlb_toa(snr, beta)


def shannon_capacity(bandwidth: float, snr: float) -> float:
    """AWGN capacity in bits/s."""
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    if snr < 0:
        raise ValueError("snr must be >= 0")
    return float(bandwidth * np.log2(1.0 + snr))


@dataclass(frozen=True)
class SignalBudget:
    """Mask-limited ranging signal of ``num_frames`` frames.

    ``noise_psd`` is N0 in W/Hz under the package SNR convention.
    """

    frame_interval: float
    num_frames: int
    p_max: float
    noise_psd: float = 1.0

    def __post_init__(self):
        if not (self.frame_interval > 0 and self.p_max > 0 and self.noise_psd > 0):
            raise ValueError("frame_interval, p_max and noise_psd must be positive")
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")

    @property
    def duration(self) -> float:
        return self.num_frames * self.frame_interval

    @property
    def frame_energy(self) -> float:
        """Largest pulse energy per frame, ``T_f * P_max``."""
        return self.frame_interval * self.p_max


def ranging_snr(budget: SignalBudget) -> float:
    """Total SNR of the ranging signal, ``T * P_max / N0``."""
    return budget.duration * budget.p_max / budget.noise_psd
