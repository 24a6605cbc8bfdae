"""Peak vs first-path TOA estimation in a dense multipath channel.

When the direct path is weaker than a later reflection, the correlation
peak locks onto the reflection. Threshold-based first-path search and
the two-step energy detector recover the direct path.
"""

import numpy as np

from uwbpos.channel import MultipathConfig, MultipathProfile, draw_multipath_profile, propagate
from uwbpos.constants import SPEED_OF_LIGHT
from uwbpos.ranging import ThresholdPolicy, toa_first_path, toa_peak, toa_two_step
from uwbpos.signal import gaussian_pulse

FS = 50e9
pulse = gaussian_pulse(2, 1e-9, FS)
rng = np.random.default_rng(3)

# %% A constructed channel: weak direct path, strong echo 15 ns later
r = propagate(pulse, MultipathProfile([20e-9, 35e-9], [0.5, 1.0]), 25.0, rng, duration=60e-9)
policy = ThresholdPolicy("fraction_of_max", 0.3)
print(f"peak      {toa_peak(r, pulse).toa * 1e9:6.2f} ns")
print(f"first     {toa_first_path(r, pulse, policy).toa * 1e9:6.2f} ns")
print(f"two-step  {toa_two_step(r, pulse, 10e-9, policy).toa * 1e9:6.2f} ns  (truth 20.00 ns)")

# %% Random channels with an attenuated first path. The SNR is split across
# six taps, so at 20 dB noise crossings sometimes fire before the direct path.
cfg = MultipathConfig(num_taps=6, tap_spacing=4e-9, decay=15e-9, p_weak_first=0.5)
for snr_db in (20.0, 25.0):
    err = {"peak": [], "first": []}
    for _ in range(300):
        prof = draw_multipath_profile(cfg, 20e-9, rng)
        r = propagate(pulse, prof, snr_db, rng, duration=70e-9)
        truth = r.meta["applied_delays"][0]
        err["peak"].append(toa_peak(r, pulse).toa - truth)
        err["first"].append(toa_first_path(r, pulse, policy).toa - truth)
    for name, e in err.items():
        e = np.asarray(e) * SPEED_OF_LIGHT
        print(f"{snr_db:.0f} dB {name:>5}: median range error {100 * np.median(e):6.1f} cm, "
              f"90th percentile |error| {100 * np.quantile(np.abs(e), 0.9):6.1f} cm")
