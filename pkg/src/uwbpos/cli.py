"""Command-line entry point: ``uwbpos <subcommand> ...``.

Exit codes: 0 success, 2 invalid input, 3 estimator failure rate above the
scenario's ``max_failure_rate``. Angles are given in degrees on the command
line; files use SI units (radians, meters, seconds).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

from uwbpos import __version__
from uwbpos.bounds import crlb_aoa, crlb_rss, crlb_toa, db_to_linear
from uwbpos.constants import SPEED_OF_LIGHT
from uwbpos.errors import UwbError
from uwbpos.harness import fingerprint_database, load_scenario, run_monte_carlo, with_overrides
from uwbpos.positioning import (
    Anchor,
    Measurement,
    MeasurementKind,
    TrainingSet,
    hyperbolic_fix,
    knn_estimate,
    nls_solve,
    triangulate,
    trilaterate,
)
from uwbpos.signal import PulseShape

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_FAILURES = 3


class _Invalid(Exception):
    pass


def _emit(rows: list[dict], fmt: str, out: Path | None, name: str) -> None:
    if fmt == "json":
        text = json.dumps(rows if len(rows) != 1 else rows[0], indent=2, sort_keys=True) + "\n"
    else:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in r.items()})
        text = buf.getvalue()
    if out is None:
        sys.stdout.write(text)
    else:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.{fmt}").write_text(text)


def _cmd_crlb(a) -> int:
    if a.bound == "rss":
        val = crlb_rss(a.n, a.sigma_sh, a.d)
        row = {"crlb_m": val, "n": a.n, "sigma_sh_db": a.sigma_sh, "d_m": a.d}
    else:
        if a.beta is not None:
            beta = a.beta
        else:
            beta = PulseShape(a.order, a.width).effective_bandwidth()
        snr = db_to_linear(a.snr_db)
        if a.bound == "toa":
            t = crlb_toa(snr, beta)
            row = {
                "crlb_s": t,
                "crlb_m": SPEED_OF_LIGHT * t,
                "snr_db": a.snr_db,
                "beta_hz": beta,
            }
        else:
            rad = crlb_aoa(snr, beta, a.elements, a.spacing, math.radians(a.alpha_deg))
            row = {
                "crlb_deg": math.degrees(rad),
                "crlb_rad": rad,
                "snr_db": a.snr_db,
                "beta_hz": beta,
                "elements": a.elements,
                "spacing_m": a.spacing,
                "alpha_deg": a.alpha_deg,
            }
    _emit([row], a.format, a.out, f"crlb_{a.bound}")
    return EXIT_OK


def _scenario(a):
    s = load_scenario(a.scenario)
    return with_overrides(s, seed=a.seed, trials=a.trials)


def _cmd_range(a) -> int:
    s = with_overrides(_scenario(a), **{"ranging.method": a.method})
    rep = run_monte_carlo(s, workers=a.workers, positioning=False)
    rows = [
        {
            "trial": r.trial,
            "anchor_id": r.anchor_id,
            "true_toa_s": r.true_toa_s,
            "est_toa_s": r.est_toa_s,
            "error_m": r.error_m,
        }
        for r in rep.ranging_rows
    ]
    if not rows:
        print("no successful ranging trials", file=sys.stderr)
        return EXIT_FAILURES
    _emit(rows, a.format, a.out, "ranging")
    return EXIT_FAILURES if rep.exceeds_failure_threshold else EXIT_OK


def _read_csv(path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as e:
        raise _Invalid(str(e)) from None


def read_anchors_csv(path) -> list[Anchor]:
    """Anchors from a CSV with columns id, x, y[, is_tdoa_reference]."""
    out = []
    for i, row in enumerate(_read_csv(path), start=2):
        try:
            ref = row.get("is_tdoa_reference", "") or "0"
            out.append(Anchor(row["id"], (float(row["x"]), float(row["y"])),
                              ref.strip().lower() in ("1", "true", "yes")))
        except (KeyError, ValueError, TypeError) as e:
            raise _Invalid(f"{path}: line {i}: {e}") from None
    return out


def read_measurements_csv(path) -> list[Measurement]:
    """Measurements from a CSV with columns kind, anchor_id, ref_anchor_id, value, variance."""
    out = []
    for i, row in enumerate(_read_csv(path), start=2):
        try:
            out.append(Measurement(
                row["kind"].strip().lower(),
                float(row["value"]),
                float(row["variance"]),
                row["anchor_id"],
                row.get("ref_anchor_id") or None,
            ))
        except (KeyError, ValueError, TypeError) as e:
            raise _Invalid(f"{path}: line {i}: {e}") from None
    return out


def _cmd_locate(a) -> int:
    anchors = read_anchors_csv(a.anchors)
    meas = read_measurements_csv(a.measurements)
    amap = {x.id: x for x in anchors}
    by_kind = lambda k: [m for m in meas if m.kind is k]
    if a.method == "nls":
        init = tuple(a.init) if a.init else "auto"
        est = nls_solve(meas, anchors, init=init)
    elif a.method == "trilaterate":
        rng = by_kind(MeasurementKind.TOA) or by_kind(MeasurementKind.RSS)
        est = trilaterate([amap[m.anchor_id] for m in rng], [m.value for m in rng])
    elif a.method == "triangulate":
        aoa = by_kind(MeasurementKind.AOA)
        est = triangulate([amap[m.anchor_id] for m in aoa], [m.value for m in aoa])
    else:
        est = hyperbolic_fix(anchors, by_kind(MeasurementKind.TDOA))
    row = {
        "x": float(est.position[0]),
        "y": float(est.position[1]),
        "status": est.status,
        "iterations": est.iterations,
        "residual": float(est.residual),
        "ambiguous": int(est.ambiguous),
    }
    _emit([row], a.format, a.out, "estimate")
    return EXIT_OK


def _cmd_fingerprint(a) -> int:
    if a.action == "build":
        if not a.scenario:
            raise _Invalid("fingerprint build needs --scenario")
        ts = fingerprint_database(load_scenario(a.scenario))
        if a.out is None:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow([*ts.columns, "x", "y"])
            for m, loc in zip(ts.measurements, ts.locations):
                w.writerow([repr(float(v)) for v in (*m, *loc)])
            sys.stdout.write(buf.getvalue())
        else:
            a.out.mkdir(parents=True, exist_ok=True)
            ts.to_csv(a.out / "training.csv")
        return EXIT_OK
    if not a.training:
        raise _Invalid("fingerprint query needs --training")
    ts = TrainingSet.from_csv(a.training)
    if a.query:
        queries = [[float(v) for v in a.query.split(",")]]
    elif a.queries:
        rows = _read_csv(a.queries)
        queries = [[float(r[c]) for c in ts.columns] for r in rows]
    else:
        raise _Invalid("fingerprint query needs --query or --queries")
    out = []
    for q in queries:
        p = knn_estimate(ts, q, a.k, a.weighting)
        out.append({"x": float(p[0]), "y": float(p[1])})
    _emit(out, a.format, a.out, "fingerprint")
    return EXIT_OK


def _cmd_montecarlo(a) -> int:
    s = _scenario(a)
    rep = run_monte_carlo(s, workers=a.workers)
    if a.out is not None:
        rep.write(a.out)
    if a.format == "json":
        sys.stdout.write(rep.to_json())
    else:
        summary = rep.summary()
        flat = {k: v for k, v in summary.items() if not isinstance(v, (list, dict))}
        _emit([flat], "csv", None, "summary")
    if rep.exceeds_failure_threshold:
        print(
            f"failure rate {rep.failure_rate:.3f} exceeds {s.max_failure_rate:.3f}",
            file=sys.stderr,
        )
        return EXIT_FAILURES
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uwbpos", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"uwbpos {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario=False):
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
        sp.add_argument("--out", type=Path, default=None, help="output directory")
        if scenario:
            sp.add_argument("--scenario", required=True, help="scenario JSON file")
            sp.add_argument("--seed", type=int, default=None)
            sp.add_argument("--trials", type=int, default=None)
            sp.add_argument("--workers", type=int, default=1)

    c = sub.add_parser("crlb", help="closed-form accuracy bounds")
    c.add_argument("bound", choices=("rss", "aoa", "toa"))
    c.add_argument("--n", type=float, default=2.0, help="path-loss exponent")
    c.add_argument("--sigma-sh", type=float, default=4.0, help="shadowing std, dB")
    c.add_argument("--d", type=float, default=10.0, help="distance, m")
    c.add_argument("--snr-db", type=float, default=10.0)
    c.add_argument("--beta", type=float, default=None, help="effective bandwidth, Hz")
    c.add_argument("--order", type=int, default=2, help="pulse order when --beta is absent")
    c.add_argument("--width", type=float, default=1e-9, help="pulse width, s")
    c.add_argument("--elements", type=int, default=4)
    c.add_argument("--spacing", type=float, default=0.05, help="element spacing, m")
    c.add_argument("--alpha-deg", type=float, default=0.0)
    common(c)
    c.set_defaults(func=_cmd_crlb)

    r = sub.add_parser("range", help="per-trial ranging errors for a scenario")
    r.add_argument("--method", choices=("peak", "first", "twostep"), required=True)
    common(r, scenario=True)
    r.set_defaults(func=_cmd_range)

    loc = sub.add_parser("locate", help="position fix from a measurement CSV")
    loc.add_argument("--measurements", required=True)
    loc.add_argument("--anchors", required=True)
    loc.add_argument(
        "--method", choices=("nls", "trilaterate", "triangulate", "hyperbolic"), default="nls"
    )
    loc.add_argument("--init", type=float, nargs=2, metavar=("X", "Y"), default=None)
    common(loc)
    loc.set_defaults(func=_cmd_locate)

    f = sub.add_parser("fingerprint", help="build or query a fingerprint database")
    f.add_argument("action", choices=("build", "query"))
    f.add_argument("--scenario", default=None)
    f.add_argument("--training", default=None, help="training CSV")
    f.add_argument("--query", default=None, help="comma-separated measurement vector (use --query=... for negative values)")
    f.add_argument("--queries", default=None, help="CSV of query vectors")
    f.add_argument("--k", type=int, default=1)
    f.add_argument("--weighting", choices=("uniform", "inverse_distance"), default="uniform")
    common(f)
    f.set_defaults(func=_cmd_fingerprint)

    m = sub.add_parser("montecarlo", help="run a full Monte-Carlo experiment")
    common(m, scenario=True)
    m.set_defaults(func=_cmd_montecarlo)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INVALID if e.code else EXIT_OK
    try:
        return args.func(args)
    except (_Invalid, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except UwbError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURES


if __name__ == "__main__":
    sys.exit(main())
