"""Position solvers side by side on one noisy geometry.

Range, bearing and range-difference measurements of the same target are
fed to the closed-form fixes, the weighted NLS solver and the grid
posterior.
"""

import numpy as np

from uwbpos.positioning import (
    Anchor,
    Measurement,
    MeasurementKind,
    PriorGrid,
    grid_bayes,
    hyperbolic_fix,
    model_f,
    nls_solve,
    triangulate,
    trilaterate,
)

TOA, AOA, TDOA = MeasurementKind.TOA, MeasurementKind.AOA, MeasurementKind.TDOA
rng = np.random.default_rng(1)
anchors = [Anchor("a", (0, 0), True), Anchor("b", (12, 0)), Anchor("c", (0, 9)), Anchor("d", (12, 9))]
target = np.array([4.2, 6.1])
sig_r, sig_a = 0.15, np.radians(2.0)

ranges = [model_f(TOA, target, a) + rng.normal(0, sig_r) for a in anchors]
bearings = [model_f(AOA, target, a) + rng.normal(0, sig_a) for a in anchors]
tdoas = [model_f(TDOA, target, a, anchors[0]) + rng.normal(0, sig_r) for a in anchors[1:]]
toa = [Measurement(TOA, z, sig_r**2, a.id) for a, z in zip(anchors, ranges)]
aoa = [Measurement(AOA, float(np.angle(np.exp(1j * z))), sig_a**2, a.id)
       for a, z in zip(anchors, bearings)]


def show(name, p):
    print(f"{name:<22} ({p[0]:6.3f}, {p[1]:6.3f})  error {np.hypot(*(p - target)):.3f} m")


show("trilaterate", trilaterate(anchors, ranges).position)
show("triangulate", triangulate(anchors, bearings).position)
show("hyperbolic (TDOA)", hyperbolic_fix(anchors, tdoas, 2 * sig_r**2).position)
est = nls_solve(toa, anchors)
show("NLS, ranges", est.position)
print(f"{'':<22} 1-sigma ellipse axes {np.sqrt(np.linalg.eigvalsh(est.covariance)).round(3)} m")
show("NLS, ranges + angles", nls_solve(toa + aoa, anchors).position)
post = grid_bayes(toa, anchors, PriorGrid(0, 12, 0, 9, 0.05))
show("grid posterior MAP", post.map.position)
show("grid posterior mean", post.mmse)
