"""Pulses, spectra and the accuracy bounds they imply.

Builds Gaussian-derivative pulses, measures their spectra, and turns the
effective bandwidth into range-accuracy bounds for TOA, AOA and RSS.
"""

import numpy as np

from uwbpos.bounds import crlb_aoa, crlb_range, crlb_rss, db_to_linear
from uwbpos.signal import check_fcc_mask, effective_bandwidth, gaussian_pulse, spectral_metrics

FS = 50e9

# %% Pulse order vs bandwidth
for order in (1, 2, 5):
    p = gaussian_pulse(order, 1e-9, FS)
    m = spectral_metrics(p)
    print(f"order {order}: beta {effective_bandwidth(p) / 1e9:.3f} GHz, "
          f"-10 dB band {m.f_low / 1e9:.2f}-{m.f_high / 1e9:.2f} GHz, "
          f"fractional {m.fractional_bandwidth:.2f}")

# %% How much average power does the indoor mask allow for a narrow order-5 pulse?
pulse = gaussian_pulse(5, 0.5e-9, FS)
report = check_fcc_mask(pulse, avg_power=1e-6, frame_interval=20e-9)
print(f"indoor mask at 1 uW: {'pass' if report.passed else 'fail'} "
      f"(margin {report.margin_db:.1f} dB, max average power {1e6 * report.p_max:.1f} uW)")

# %% Range bound vs SNR for the order-2, 1 ns pulse
beta = effective_bandwidth(gaussian_pulse(2, 1e-9, FS))
for snr_db in (0, 5, 10, 20):
    print(f"SNR {snr_db:>2} dB: TOA range bound {100 * crlb_range(db_to_linear(snr_db), beta):.2f} cm")

# %% The same link measured other ways
print(f"RSS bound at 10 m (n=4.58, 3.51 dB shadowing): {crlb_rss(4.58, 3.51, 10.0):.2f} m")
aoa = crlb_aoa(db_to_linear(10.0), beta, 4, 0.05, 0.0)
print(f"AOA bound, 4-element array, 5 cm spacing: {np.degrees(aoa):.2f} deg")
