"""RSS fingerprinting with k nearest neighbours.

A noiseless RSS map is built on a grid, then shadowed RSS readings at
random spots are matched against it for several k.
"""

import numpy as np

from uwbpos.channel import ChannelParams, sample_rss
from uwbpos.harness import fingerprint_database, parse_scenario
from uwbpos.positioning import knn_estimate

scenario = parse_scenario({
    "anchors": [{"id": "a", "position": [0, 0]}, {"id": "b", "position": [15, 0]},
                {"id": "c", "position": [0, 10]}, {"id": "d", "position": [15, 10]}],
    "targets": [[5, 5]],
    "measurements": ["rss"],
    "channel": {"path_loss_exponent": 3.0, "sigma_sh": 2.0},
    "fingerprint": {"bounds": [0, 15, 0, 10], "spacing": 0.5},
})
db = fingerprint_database(scenario)
print(f"database: {len(db)} fingerprints, columns {db.columns}")

params = scenario.channel.params()
anchors = np.array([a.position for a in scenario.anchors])
rng = np.random.default_rng(0)
spots = rng.uniform([1, 1], [14, 9], (300, 2))
readings = np.array([[sample_rss(params, np.hypot(*(p - a)), rng) for a in anchors] for p in spots])

for k in (1, 3, 8):
    for weighting in ("uniform", "inverse_distance"):
        est = np.array([knn_estimate(db, m, k, weighting) for m in readings])
        err = np.hypot(*(est - spots).T)
        print(f"k={k} {weighting:<16} mean error {err.mean():.3f} m, "
              f"90th percentile {np.quantile(err, 0.9):.3f} m")
