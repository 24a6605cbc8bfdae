import json
import math

import numpy as np
import pytest
from conftest import aligned_anchors
from hypothesis import given
from hypothesis import strategies as st

from uwbpos.errors import ScenarioError
from uwbpos.harness import (
    Scenario,
    child_rng,
    error_cdf,
    fingerprint_database,
    load_scenario,
    parse_scenario,
    rmse,
    run_monte_carlo,
    with_overrides,
)

MINIMAL = {
    "anchors": [
        {"id": "a", "position": [0, 0]},
        {"id": "b", "position": [6, 0]},
        {"id": "c", "position": [0, 8]},
    ],
    "targets": [[3, 4]],
}


def aligned(**extra):
    data = {"anchors": aligned_anchors(), "targets": [[0.0, 0.0]]}
    data.update(extra)
    return parse_scenario(data)


class TestLoadScenario:
    def test_minimal_defaults(self, tmp_path):
        path = tmp_path / "s.json"
        path.write_text(json.dumps(MINIMAL))
        s = load_scenario(path)
        assert [a.id for a in s.anchors] == ["a", "b", "c"]
        assert s.trials == 1 and s.seed == 0
        assert s.measurements == ["toa"]
        assert s.positioning.method == "nls"
        assert s.signal.sample_rate == 50e9
        echoed = json.loads(s.to_json())
        assert echoed["channel"]["path_loss_exponent"] == 2.0
        assert parse_scenario(echoed) == s

    def test_missing_anchors(self, tmp_path):
        path = tmp_path / "s.json"
        path.write_text(json.dumps({"targets": [[0, 0]]}))
        with pytest.raises(ScenarioError, match="anchors") as exc:
            load_scenario(path)
        assert exc.value.field == "anchors"

    def test_unknown_estimator(self):
        with pytest.raises(ScenarioError) as exc:
            parse_scenario({**MINIMAL, "positioning": {"method": "magic"}})
        msg = str(exc.value)
        assert "positioning.method" in msg
        for tag in ("nls", "trilaterate", "triangulate", "hyperbolic", "grid_bayes", "knn"):
            assert tag in msg

    def test_bad_json(self, tmp_path):
        path = tmp_path / "s.json"
        path.write_text("{not json")
        with pytest.raises(ScenarioError, match="JSON"):
            load_scenario(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ScenarioError):
            load_scenario(tmp_path / "nope.json")

    @pytest.mark.parametrize(
        "patch, field",
        [
            ({"trials": 0}, "trials"),
            ({"seed": -1}, "seed"),
            ({"seed": 2**64}, "seed"),
            ({"extra_key": 1}, "extra_key"),
            ({"measurements": ["tdoa"]}, "anchors"),
            ({"ranging": {"method": "twostep"}}, "ranging.block"),
            ({"signal": {"num_frames": 2, "code": [1]}}, "signal.code"),
            ({"cdf_thresholds": [1.0, 0.5]}, "cdf_thresholds"),
            ({"positioning": {"method": "triangulate"}}, "positioning.method"),
        ],
    )
    def test_field_paths(self, patch, field):
        with pytest.raises(ScenarioError) as exc:
            parse_scenario({**MINIMAL, **patch})
        assert exc.value.field.startswith(field)

    def test_duplicate_anchor(self):
        bad = {**MINIMAL, "anchors": MINIMAL["anchors"] + [{"id": "a", "position": [1, 1]}]}
        with pytest.raises(ScenarioError, match="unique"):
            parse_scenario(bad)

    def test_overrides(self):
        s = parse_scenario(MINIMAL)
        t = with_overrides(s, seed=9, **{"channel.snr_db": 20.0})
        assert t.seed == 9 and t.channel.snr_db == 20.0
        assert s.seed == 0
        assert with_overrides(s, trials=None) == s


class TestRmse:
    def test_examples(self):
        assert rmse([0, 0, 0]) == 0.0
        assert rmse([3, 4]) == pytest.approx(math.sqrt(12.5))
        assert rmse([-2.5]) == 2.5

    def test_empty(self):
        with pytest.raises(ValueError):
            rmse([])

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=50))
    def test_bounds_mean(self, errs):
        r = rmse(errs)
        assert r >= abs(np.mean(errs)) - 1e-9
        assert (r == 0) == all(e == 0 for e in errs)


class TestErrorCdf:
    def test_examples(self):
        assert error_cdf([1, 2, 3], [0.5]) == [0.0]
        assert error_cdf([1, 2, 3], [10]) == [1.0]
        assert error_cdf([1, 2, 3], [2]) == [pytest.approx(2 / 3)]
        assert error_cdf([-1, 2, -3], [1, 3]) == [pytest.approx(1 / 3), 1.0]

    def test_invalid(self):
        with pytest.raises(ValueError):
            error_cdf([], [1])
        with pytest.raises(ValueError):
            error_cdf([1], [])
        with pytest.raises(ValueError):
            error_cdf([1], [2, 1])

    @given(
        st.lists(st.floats(-100, 100), min_size=1, max_size=40),
        st.lists(st.floats(0, 200), min_size=1, max_size=20),
    )
    def test_monotone_bounded(self, errs, thr):
        c = error_cdf(errs, sorted(thr))
        assert all(0.0 <= v <= 1.0 for v in c)
        assert all(b >= a for a, b in zip(c, c[1:]))


class TestChildRng:
    def test_reproducible_and_distinct(self):
        a = child_rng(5, 0, 0, 1).normal(size=4)
        b = child_rng(5, 0, 0, 1).normal(size=4)
        c = child_rng(5, 1, 0, 1).normal(size=4)
        d = child_rng(6, 0, 0, 1).normal(size=4)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
        assert not np.array_equal(a, d)


NOISELESS_CASES = [
    ({"measurements": ["toa"], "positioning": {"method": "nls"}}, 1e-6),
    ({"measurements": ["toa"], "positioning": {"method": "trilaterate"}}, 1e-6),
    ({"measurements": ["rss"], "positioning": {"method": "trilaterate"}}, 1e-6),
    ({"measurements": ["rss"], "positioning": {"method": "nls"}}, 1e-6),
    ({"measurements": ["aoa"], "positioning": {"method": "triangulate"}}, 1e-6),
    ({"measurements": ["aoa"], "positioning": {"method": "nls"}}, 1e-6),
    ({"measurements": ["toa", "aoa"], "positioning": {"method": "nls"}}, 1e-6),
    ({"measurements": ["tdoa"], "positioning": {"method": "hyperbolic"}}, 1e-6),
    ({"measurements": ["tdoa"], "positioning": {"method": "nls"}}, 1e-6),
    ({"measurements": ["toa"], "ranging": {"method": "first"}}, 1e-6),
    (
        {
            "measurements": ["toa"],
            "positioning": {
                "method": "grid_bayes",
                "grid": {"x_min": -0.525, "x_max": 0.525, "y_min": -0.525, "y_max": 0.525},
            },
        },
        1e-6,
    ),
    (
        {
            "measurements": ["rss"],
            "positioning": {"method": "knn"},
            "fingerprint": {"bounds": [-1, 1, -1, 1], "spacing": 0.5},
        },
        1e-6,
    ),
]


class TestMonteCarlo:
    @pytest.mark.parametrize("extra, tol", NOISELESS_CASES)
    def test_noiseless_exact(self, extra, tol):
        data = dict(extra)
        anchors = aligned_anchors()
        if "tdoa" in data["measurements"]:
            anchors[0]["is_tdoa_reference"] = True
        s = parse_scenario({"anchors": anchors, "targets": [[0.0, 0.0]], "trials": 2, **data})
        rep = run_monte_carlo(s)
        assert rep.failures == 0
        assert rep.positioning_count == 2
        assert rep.positioning_rmse <= tol
        if rep.ranging_rmse is not None:
            assert rep.ranging_rmse <= 1e-6

    def test_deterministic(self):
        s = aligned(trials=6, seed=42, channel={"snr_db": 15.0, "sigma_sh": 2.0},
                    measurements=["toa", "rss"])
        a, b = run_monte_carlo(s), run_monte_carlo(s)
        assert a.to_json() == b.to_json()
        assert a.ranging_csv() == b.ranging_csv()
        assert a.positions_csv() == b.positions_csv()
        c = run_monte_carlo(with_overrides(s, seed=43))
        assert c.ranging_csv() != a.ranging_csv()

    def test_trial_independent_of_count(self):
        s = aligned(trials=3, seed=1, channel={"snr_db": 15.0})
        short = run_monte_carlo(s).ranging_rows
        long = run_monte_carlo(with_overrides(s, trials=5)).ranging_rows
        assert long[: len(short)] == short

    def test_report_fields(self, tmp_path):
        s = aligned(trials=4, seed=3, channel={"snr_db": 20.0})
        rep = run_monte_carlo(s)
        summ = json.loads(rep.to_json())
        for key in ("ranging_rmse", "positioning_rmse", "crlb_range_m", "seed", "version",
                    "ranging_cdf", "positioning_cdf", "failures"):
            assert key in summ
        assert summ["seed"] == 3 and summ["trials"] == 4
        assert rep.ranging_rmse >= 0 and rep.positioning_rmse >= 0
        assert rep.crlb_range_m > 0
        rep.write(tmp_path)
        lines = (tmp_path / "ranging.csv").read_text().splitlines()
        assert lines[0] == "trial,target,anchor_id,los,true_toa_s,est_toa_s,error_m"
        assert len(lines) == 1 + 4 * 4
        assert (tmp_path / "positions.csv").read_text().count("\n") == 1 + 4
        assert json.loads((tmp_path / "summary.json").read_text()) == summ

    def test_nlos_separate_aggregates(self):
        s = aligned(
            trials=20,
            seed=2,
            channel={"nlos": {"enabled": True, "mean_bias": 3e-9, "anchors": ["a1"]}},
        )
        rep = run_monte_carlo(s, positioning=False)
        assert rep.ranging_count_nlos == 20 and rep.ranging_count_los == 60
        assert rep.ranging_rmse_los <= 1e-6
        assert rep.ranging_rmse_nlos > 0.1
        assert rep.positioning_rmse is None

    def test_ranging_failure_policies(self):
        base = aligned(
            trials=5,
            channel={"snr_db": 20.0},
            ranging={"method": "twostep", "block": 20e-9,
                     "threshold": {"mode": "noise_floor_multiple", "value": 1e9}},
        )
        drop = run_monte_carlo(base)
        assert drop.failures == 5 and drop.failure_rate == 1.0
        assert drop.exceeds_failure_threshold
        assert drop.positioning_count == 0 and drop.position_rows == ()
        assert drop.ranging_rows == ()
        assert drop.failure_reasons == {"ranging:NoDetectionError": 20}

        count = run_monte_carlo(with_overrides(base, failure_policy="count_as_failure"))
        assert count.failures == 5
        assert len(count.position_rows) == 5
        assert all(math.isinf(p.error_m) for p in count.position_rows)
        assert count.positioning_cdf == tuple(0.0 for _ in count.cdf_thresholds)
        assert count.positioning_rmse is None

    def test_positioning_failure(self):
        line = [{"id": f"a{i}", "position": [float(i), 0.0]} for i in range(3)]
        s = parse_scenario({"anchors": line, "targets": [[1.5, 0.0]], "trials": 3,
                            "positioning": {"method": "trilaterate"}})
        rep = run_monte_carlo(s)
        assert rep.failures == 3
        assert rep.failure_reasons == {"positioning:Degenerate": 3}
        assert len(rep.ranging_rows) == 9

    def test_under_threshold(self):
        rep = run_monte_carlo(aligned(trials=2))
        assert rep.failure_rate == 0.0 and not rep.exceeds_failure_threshold

    def test_multiple_targets(self):
        s = parse_scenario({"anchors": aligned_anchors(), "targets": [[0.0, 0.0], [0.0, 0.0]],
                            "trials": 2, "channel": {"snr_db": 20.0}})
        rep = run_monte_carlo(s)
        assert rep.fixes == 4 and rep.positioning_count == 4
        rows = rep.ranging_rows
        # independent streams per target
        assert rows[0].est_toa_s != rows[4].est_toa_s


class TestFingerprintDatabase:
    def test_grid_and_columns(self):
        s = parse_scenario({**MINIMAL, "fingerprint": {"spacing": 2.0, "kinds": ["rss", "toa"]},
                            "measurements": ["rss", "toa"]})
        ts = fingerprint_database(s)
        assert len(ts) == 4 * 5
        assert ts.columns[:3] == ("rss_a", "rss_b", "rss_c")
        assert ts.columns[3:] == ("toa_a", "toa_b", "toa_c")
        i = int(np.flatnonzero((ts.locations == [2.0, 4.0]).all(axis=1))[0])
        assert ts.measurements[i, 3] == pytest.approx(np.hypot(2, 4))


def test_scenario_is_hashable_and_stable():
    s = parse_scenario(MINIMAL)
    assert s.digest() == parse_scenario(json.loads(s.to_json())).digest()
    assert isinstance(s, Scenario)
