"""Physical constants and library-wide defaults."""

SPEED_OF_LIGHT = 299792458.0  # m/s

# Gaussian pulse "width" expressed in units of the Gaussian sigma.
# Outside +/- 3.5 sigma the envelope is below 0.3 % of its peak.
PULSE_WIDTH_IN_SIGMAS = 7.0

DEFAULT_SAMPLE_RATE = 50e9  # Hz, for ~1 ns pulses

# Zero padding factor used for spectra in -10 dB bandwidth searches.
SPECTRUM_ZERO_PAD = 8

DEFAULT_FRACTION_OF_MAX = 0.4
DEFAULT_NOISE_FLOOR_MULTIPLE = 6.0
