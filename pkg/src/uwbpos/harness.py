"""Scenario files and the end-to-end Monte-Carlo runner.

One trial synthesizes the ranging signal, sends it through a freshly drawn
channel to every anchor, estimates the position-related parameters, and
feeds them to the selected position solver. Each (trial, target, anchor)
triple draws from its own counter-based random stream, so results do not
depend on execution order or on the number of worker processes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import cached_property
from os import PathLike
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from uwbpos import __version__
from uwbpos.bounds import crlb_aoa, crlb_range, crlb_toa, db_to_linear
from uwbpos.channel import (
    ChannelParams,
    MultipathConfig,
    NlosConfig,
    apply_nlos,
    draw_multipath_profile,
    mean_rss,
    noise_variance_for_snr,
    propagate,
    rss_to_range,
    sample_rss,
)
from uwbpos.constants import SPEED_OF_LIGHT
from uwbpos.errors import ScenarioError, UwbError
from uwbpos.positioning import (
    DEGENERATE,
    Anchor,
    Measurement,
    MeasurementKind,
    PriorGrid,
    TrainingSet,
    grid_bayes,
    hyperbolic_fix,
    knn_estimate,
    nls_solve,
    triangulate,
    trilaterate,
    wrap_angle,
)
from uwbpos.ranging import (
    ThresholdPolicy,
    UlaConfig,
    aoa_ula,
    toa_first_path,
    toa_peak,
    toa_two_step,
    ula_element_delays,
)
from uwbpos.signal import PulseShape, RangingSignalSpec, build_ranging_signal

# Standard deviations assumed for noiseless measurements, where no bound applies.
NOMINAL_RANGE_STD = 1e-3
NOMINAL_ANGLE_STD = 1e-3
DEFAULT_CDF_THRESHOLDS = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0)

RANGING_METHODS = ("peak", "first", "twostep")
POSITIONING_METHODS = ("nls", "trilaterate", "triangulate", "hyperbolic", "grid_bayes", "knn")


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class AnchorModel(_Model):
    id: str
    position: tuple[float, float]
    is_tdoa_reference: bool = False


class PulseModel(_Model):
    order: Literal[0, 1, 2, 5] = 2
    width: float = Field(1e-9, gt=0)


class SignalModel(_Model):
    pulse: PulseModel = PulseModel()
    frame_interval: float = Field(20e-9, gt=0)
    num_frames: int = Field(1, ge=1)
    code: list[Literal[-1, 0, 1]] | None = None
    sample_rate: float = Field(50e9, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if self.code is not None and len(self.code) != self.num_frames:
            raise ValueError(
                f"signal.code: length {len(self.code)} != num_frames {self.num_frames}"
            )
        if not self.frame_interval > self.pulse.width:
            raise ValueError("signal.frame_interval: must exceed the pulse width")
        return self

    def spec(self) -> RangingSignalSpec:
        code = tuple(self.code) if self.code is not None else (1,) * self.num_frames
        return RangingSignalSpec(
            PulseShape(self.pulse.order, self.pulse.width),
            self.frame_interval,
            self.num_frames,
            code,
        )


class MultipathModel(_Model):
    num_taps: int = Field(1, ge=1)
    tap_spacing: float = Field(5e-9, gt=0)
    decay: float = Field(20e-9, gt=0)
    jitter: float = Field(0.25, ge=0, lt=0.5)
    p_weak_first: float = Field(0.0, ge=0, le=1)
    weak_first_factor: float = Field(0.3, ge=0, le=1)


class NlosModel(_Model):
    enabled: bool = False
    mean_bias: float = Field(0.0, ge=0)
    first_path_attenuation: float = Field(1.0, ge=0, le=1)
    anchors: list[str] | None = None


class ChannelModel(_Model):
    path_loss_exponent: float = Field(2.0, gt=0)
    p0_db: float = -40.0
    d0: float = Field(1.0, gt=0)
    sigma_sh: float = Field(0.0, ge=0)
    snr_db: float | None = None
    snr_follows_path_loss: bool = False
    multipath: MultipathModel = MultipathModel()
    nlos: NlosModel = NlosModel()

    def params(self) -> ChannelParams:
        mp = self.multipath
        nl = self.nlos
        return ChannelParams(
            self.path_loss_exponent,
            self.p0_db,
            self.d0,
            self.sigma_sh,
            self.snr_db,
            self.snr_follows_path_loss,
            MultipathConfig(
                mp.num_taps, mp.tap_spacing, mp.decay, mp.jitter,
                mp.p_weak_first, mp.weak_first_factor,
            ),
            NlosConfig(nl.enabled, nl.mean_bias, nl.first_path_attenuation),
        )


class ThresholdModel(_Model):
    mode: Literal["fraction_of_max", "noise_floor_multiple"] = "fraction_of_max"
    value: float | None = Field(None, gt=0)

    def policy(self) -> ThresholdPolicy:
        if self.value is None:
            return ThresholdPolicy() if self.mode == "fraction_of_max" else ThresholdPolicy.noise_floor()
        return ThresholdPolicy(self.mode, self.value)


class RangingModel(_Model):
    method: Literal["peak", "first", "twostep"] = "peak"
    threshold: ThresholdModel = ThresholdModel()
    block: float | None = Field(None, gt=0)
    record_duration: float | None = Field(None, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if self.method == "twostep" and self.block is None:
            raise ValueError("ranging.block: required by the twostep method")
        if self.threshold.mode == "fraction_of_max" and (self.threshold.value or 0) > 1:
            raise ValueError("ranging.threshold.value: fraction_of_max needs a value <= 1")
        return self


class GridModel(_Model):
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    resolution: float = Field(0.05, gt=0)
    output: Literal["map", "mmse"] = "map"


class PositioningModel(_Model):
    method: Literal["nls", "trilaterate", "triangulate", "hyperbolic", "grid_bayes", "knn"] = "nls"
    init: tuple[float, float] | None = None
    grid: GridModel | None = None


class ArrayModel(_Model):
    num_elements: int = Field(4, ge=2)
    spacing: float = Field(0.05, gt=0)
    orientations: dict[str, float] | None = None


class FingerprintModel(_Model):
    kinds: list[Literal["rss", "toa", "aoa"]] = ["rss"]
    spacing: float = Field(0.5, gt=0)
    bounds: tuple[float, float, float, float] | None = None
    k: int = Field(1, ge=1)
    weighting: Literal["uniform", "inverse_distance"] = "uniform"


class Scenario(_Model):
    """Validated scenario. All quantities SI; ``snr_db`` is per pulse."""

    anchors: list[AnchorModel] = Field(min_length=1)
    targets: list[tuple[float, float]] = Field(min_length=1)
    signal: SignalModel = SignalModel()
    channel: ChannelModel = ChannelModel()
    measurements: list[Literal["toa", "rss", "aoa", "tdoa"]] = Field(["toa"], min_length=1)
    ranging: RangingModel = RangingModel()
    positioning: PositioningModel = PositioningModel()
    array: ArrayModel = ArrayModel()
    fingerprint: FingerprintModel = FingerprintModel()
    emission_time: float = Field(0.0, ge=0)
    trials: int = Field(1, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    failure_policy: Literal["drop_trial", "count_as_failure"] = "drop_trial"
    max_failure_rate: float = Field(0.1, ge=0, le=1)
    cdf_thresholds: list[float] = list(DEFAULT_CDF_THRESHOLDS)

    @model_validator(mode="after")
    def _check(self):
        ids = [a.id for a in self.anchors]
        if len(set(ids)) != len(ids):
            raise ValueError("anchors: anchor ids must be unique")
        kinds = set(self.measurements)
        if len(kinds) != len(self.measurements):
            raise ValueError("measurements: duplicate measurement kind")
        n_ref = sum(a.is_tdoa_reference for a in self.anchors)
        if "tdoa" in kinds and n_ref != 1:
            raise ValueError("anchors: TDOA needs exactly one is_tdoa_reference anchor")
        if list(self.cdf_thresholds) != sorted(self.cdf_thresholds):
            raise ValueError("cdf_thresholds: must be sorted")
        method = self.positioning.method
        need = {
            "trilaterate": ({"toa", "rss"}, 3),
            "triangulate": ({"aoa"}, 2),
            "hyperbolic": ({"tdoa"}, 3),
        }
        if method in need:
            options, n_min = need[method]
            if not kinds & options:
                raise ValueError(
                    f"positioning.method: {method} needs one of {sorted(options)} in measurements"
                )
            if len(self.anchors) < n_min:
                raise ValueError(f"anchors: {method} needs at least {n_min} anchors")
        if method == "knn" and not set(self.fingerprint.kinds) <= kinds:
            raise ValueError("fingerprint.kinds: every fingerprint kind must be measured")
        if self.array.orientations:
            unknown = set(self.array.orientations) - set(ids)
            if unknown:
                raise ValueError(f"array.orientations: unknown anchor ids {sorted(unknown)}")
        if self.channel.nlos.anchors:
            unknown = set(self.channel.nlos.anchors) - set(ids)
            if unknown:
                raise ValueError(f"channel.nlos.anchors: unknown anchor ids {sorted(unknown)}")
        return self

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    def digest(self) -> str:
        canon = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()


def _scenario_error(e: ValidationError) -> ScenarioError:
    lines = []
    first_field = None
    for err in e.errors():
        path = ".".join(str(p) for p in err["loc"])
        msg = err["msg"]
        if msg.startswith("Value error, "):
            # model validators name their own full field path
            msg = msg[len("Value error, "):]
            head, sep, rest = msg.partition(": ")
            if sep and " " not in head:
                path, msg = head, rest
        first_field = first_field or path
        lines.append(f"{path}: {msg}" if path else msg)
    return ScenarioError("invalid scenario: " + "; ".join(lines), first_field)


def parse_scenario(data: dict) -> Scenario:
    """Validate a scenario given as a dict.

    Raises:
        ScenarioError: naming the offending field.
    """
    try:
        return Scenario.model_validate(data)
    except ValidationError as e:
        raise _scenario_error(e) from None


def load_scenario(path: str | PathLike) -> Scenario:
    """Read and validate a JSON scenario file."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ScenarioError(f"cannot read scenario: {e}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"scenario is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a JSON object")
    return parse_scenario(data)


def with_overrides(s: Scenario, **updates) -> Scenario:
    """Copy of ``s`` with top-level or dotted-path fields replaced and revalidated."""
    data = s.model_dump(mode="json")
    for key, value in updates.items():
        if value is None:
            continue
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return parse_scenario(data)


def child_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent counter-based stream for ``key`` under a root ``seed``."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def rmse(errors: Sequence[float]) -> float:
    """Root mean square of the errors."""
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise ValueError("rmse of an empty error list")
    m = float(np.max(np.abs(e)))
    if m == 0.0 or not math.isfinite(m):
        return m
    # scaled to avoid under/overflow in the squares
    return m * float(np.sqrt(np.mean((e / m) ** 2)))


def error_cdf(errors: Sequence[float], thresholds: Sequence[float]) -> list[float]:
    """Fraction of ``|errors|`` at or below each threshold."""
    e = np.abs(np.asarray(errors, dtype=float))
    t = np.asarray(thresholds, dtype=float)
    if e.size == 0 or t.size == 0:
        raise ValueError("error_cdf needs errors and thresholds")
    if np.any(np.diff(t) < 0):
        raise ValueError("thresholds must be sorted")
    e = np.sort(e)
    return [float(v) for v in np.searchsorted(e, t, side="right") / e.size]


@dataclass(frozen=True)
class RangingRow:
    trial: int
    target: int
    anchor_id: str
    los: bool
    true_toa_s: float
    est_toa_s: float
    error_m: float


@dataclass(frozen=True)
class PositionRow:
    trial: int
    target: int
    true_x: float
    true_y: float
    est_x: float
    est_y: float
    error_m: float


@dataclass(frozen=True)
class Failure:
    trial: int
    target: int
    stage: str
    reason: str


@dataclass
class _TrialResult:
    ranging: list[RangingRow] = field(default_factory=list)
    positions: list[PositionRow] = field(default_factory=list)
    failures: list[Failure] = field(default_factory=list)


class _Context:
    """Per-scenario quantities shared by all trials."""

    def __init__(self, s: Scenario):
        self.s = s
        self.channel = s.channel.params()
        self.anchors = [
            Anchor(a.id, a.position, a.is_tdoa_reference) for a in s.anchors
        ]
        self.targets = [np.asarray(t, dtype=float) for t in s.targets]
        self.kinds = set(s.measurements)
        self.spec = s.signal.spec()
        self.fs = s.signal.sample_rate
        self.beta = self.spec.pulse.effective_bandwidth()
        self.ula = UlaConfig(s.array.num_elements, s.array.spacing)
        self.needs_waveform = bool(self.kinds & {"toa", "tdoa"}) or (
            s.positioning.method == "knn" and "toa" in s.fingerprint.kinds
        )
        if self.needs_waveform:
            self.template = build_ranging_signal(self.spec, self.fs)
            self.pulse_energy = self.template.energy / max(1, self.spec.code_weight)
        self.policy = s.ranging.threshold.policy()
        self.record_duration = s.ranging.record_duration or self._default_record()
        self.orientation = self._orientations()
        nl = s.channel.nlos
        self.nlos_ids = (
            {a.id for a in self.anchors}
            if nl.enabled and nl.anchors is None
            else set(nl.anchors or ()) if nl.enabled else set()
        )

    def _default_record(self) -> float:
        s = self.s
        dmax = max(
            float(np.hypot(*(t - a.position))) for t in self.targets for a in self.anchors
        )
        mp = s.channel.multipath
        span = dmax / SPEED_OF_LIGHT + s.emission_time
        span += (mp.num_taps - 1) * mp.tap_spacing * (1 + mp.jitter)
        if s.channel.nlos.enabled:
            span += 10.0 * s.channel.nlos.mean_bias
        return span + self.spec.duration + 2.0 * self.spec.pulse.width + 10e-9

    def _orientations(self) -> dict[str, float]:
        given = self.s.array.orientations or {}
        centre = np.mean(self.targets, axis=0)
        out = {}
        for a in self.anchors:
            if a.id in given:
                out[a.id] = float(given[a.id])
            else:
                d = centre - np.asarray(a.position)
                out[a.id] = float(np.arctan2(d[1], d[0])) if np.any(d) else 0.0
        return out

    def snr_db(self, d: float) -> float | None:
        ch = self.channel
        if ch.snr_db is None:
            return None
        if ch.snr_follows_path_loss:
            return ch.snr_db + mean_rss(ch, max(d, 1e-9)) - ch.p0_db
        return ch.snr_db

    @cached_property
    def training_set(self) -> TrainingSet:
        fp = self.s.fingerprint
        if fp.bounds is not None:
            x0, x1, y0, y1 = fp.bounds
        else:
            P = np.array([a.position for a in self.anchors])
            x0, y0 = P.min(axis=0)
            x1, y1 = P.max(axis=0)
        xs = np.arange(x0, x1 + 0.5 * fp.spacing, fp.spacing)
        ys = np.arange(y0, y1 + 0.5 * fp.spacing, fp.spacing)
        locs = np.array([(x, y) for y in ys for x in xs])
        rows = [self.fingerprint_model(p) for p in locs]
        cols = tuple(f"{k}_{a.id}" for k in fp.kinds for a in self.anchors)
        return TrainingSet(np.array(rows), locs, cols)

    def fingerprint_model(self, p: np.ndarray) -> list[float]:
        out = []
        for kind in self.s.fingerprint.kinds:
            for a in self.anchors:
                d = float(np.hypot(*(p - a.position)))
                if kind == "rss":
                    out.append(mean_rss(self.channel, max(d, 1e-3)))
                elif kind == "toa":
                    out.append(d)
                else:
                    out.append(float(np.arctan2(p[1] - a.position[1], p[0] - a.position[0])))
        return out

    @cached_property
    def prior(self) -> PriorGrid:
        g = self.s.positioning.grid
        if g is not None:
            return PriorGrid(g.x_min, g.x_max, g.y_min, g.y_max, g.resolution)
        pts = np.vstack([[a.position for a in self.anchors], self.targets])
        lo = np.floor(pts.min(axis=0)) - 1.0
        hi = np.ceil(pts.max(axis=0)) + 1.0
        return PriorGrid(lo[0], hi[0], lo[1], hi[1], 0.05)


def fingerprint_database(s: Scenario) -> TrainingSet:
    """Noiseless fingerprint database on the scenario's fingerprint grid.

    Entries hold the mean RSS (dB), range (m) or bearing (rad) for each
    configured kind and anchor, in that nesting order.
    """
    return _context_for(s).training_set


def _estimate_toa(ctx: _Context, r) -> float:
    m = ctx.s.ranging.method
    if m == "peak":
        est = toa_peak(r, ctx.template)
    elif m == "first":
        est = toa_first_path(r, ctx.template, ctx.policy)
    else:
        est = toa_two_step(r, ctx.template, ctx.s.ranging.block, ctx.policy)
    return est.toa


def _observe_anchor(ctx: _Context, anchor: Anchor, target, rng) -> dict:
    """Simulate every configured observation of ``target`` at one anchor."""
    s = ctx.s
    d = float(np.hypot(*(target - anchor.position)))
    obs = {"distance": d, "los": anchor.id not in ctx.nlos_ids}
    if "rss" in ctx.kinds or (s.positioning.method == "knn" and "rss" in s.fingerprint.kinds):
        obs["rss_db"] = sample_rss(ctx.channel, max(d, 1e-3), rng)

    true_toa = d / SPEED_OF_LIGHT + s.emission_time
    snr = ctx.snr_db(d)
    obs["snr_db"] = snr
    if ctx.needs_waveform:
        profile = draw_multipath_profile(ctx.channel.multipath, true_toa, rng)
        if not obs["los"]:
            profile = apply_nlos(profile, ctx.channel.nlos, rng)
        noise_var = (
            noise_variance_for_snr(ctx.pulse_energy, snr, ctx.fs) if snr is not None else None
        )
        r = propagate(
            ctx.template, profile, None, rng,
            t_start=0.0, duration=ctx.record_duration, noise_var=noise_var,
        )
        obs["true_toa"] = r.meta["applied_delays"][0] - r.meta["nlos_bias"]
        obs["toa"] = _estimate_toa(ctx, r)
    if "aoa" in ctx.kinds or (s.positioning.method == "knn" and "aoa" in s.fingerprint.kinds):
        # Geometric element delays plus Gaussian delay noise at the TOA bound.
        bearing = float(np.arctan2(target[1] - anchor.position[1], target[0] - anchor.position[0]))
        alpha = float(wrap_angle(bearing - ctx.orientation[anchor.id]))
        delays = ula_element_delays(alpha, ctx.ula, true_toa)
        if snr is not None:
            std = crlb_toa(db_to_linear(snr) * ctx.spec.code_weight, ctx.beta)
            delays = delays + rng.normal(0.0, std, delays.size)
        est = aoa_ula(delays, ctx.ula)
        obs["alpha"] = alpha
        obs["aoa"] = float(wrap_angle(ctx.orientation[anchor.id] + est.angle))
    return obs


def _toa_variance(ctx: _Context, snr_db: float | None) -> float:
    if snr_db is None:
        return NOMINAL_RANGE_STD**2
    snr = db_to_linear(snr_db) * ctx.spec.code_weight
    return crlb_range(snr, ctx.beta) ** 2


def _measurements(ctx: _Context, obs: dict[str, dict]) -> list[Measurement]:
    out = []
    for a in ctx.anchors:
        o = obs[a.id]
        if "toa" in ctx.kinds:
            out.append(Measurement(
                MeasurementKind.TOA, SPEED_OF_LIGHT * o["toa"],
                _toa_variance(ctx, o["snr_db"]), a.id,
            ))
        if "rss" in ctx.kinds:
            d_hat = rss_to_range(ctx.channel, o["rss_db"])
            n = ctx.channel.path_loss_exponent
            std = math.log(10.0) * ctx.channel.sigma_sh * d_hat / (10.0 * n)
            out.append(Measurement(
                MeasurementKind.RSS, d_hat, max(std, NOMINAL_RANGE_STD) ** 2, a.id
            ))
        if "aoa" in ctx.kinds:
            if o["snr_db"] is None or abs(o["alpha"]) > 0.5 * np.pi - 1e-6:
                std = NOMINAL_ANGLE_STD
            else:
                snr = db_to_linear(o["snr_db"]) * ctx.spec.code_weight
                std = crlb_aoa(snr, ctx.beta, ctx.ula.num_elements, ctx.ula.spacing, o["alpha"])
            out.append(Measurement(MeasurementKind.AOA, o["aoa"], std**2, a.id))
    if "tdoa" in ctx.kinds:
        ref = next(a for a in ctx.anchors if a.is_tdoa_reference)
        o_ref = obs[ref.id]
        var_ref = _toa_variance(ctx, o_ref["snr_db"])
        for a in ctx.anchors:
            if a is ref:
                continue
            o = obs[a.id]
            out.append(Measurement(
                MeasurementKind.TDOA,
                SPEED_OF_LIGHT * (o["toa"] - o_ref["toa"]),
                _toa_variance(ctx, o["snr_db"]) + var_ref,
                a.id,
                ref.id,
            ))
    return out


def _locate(ctx: _Context, obs: dict[str, dict]) -> np.ndarray:
    s = ctx.s
    method = s.positioning.method
    if method == "knn":
        q = []
        for kind in s.fingerprint.kinds:
            for a in ctx.anchors:
                o = obs[a.id]
                q.append(
                    o["rss_db"] if kind == "rss"
                    else SPEED_OF_LIGHT * o["toa"] if kind == "toa"
                    else o["aoa"]
                )
        return knn_estimate(ctx.training_set, q, s.fingerprint.k, s.fingerprint.weighting)

    meas = _measurements(ctx, obs)
    if method == "nls":
        est = nls_solve(meas, ctx.anchors, init=s.positioning.init or "auto")
    elif method == "trilaterate":
        kind = MeasurementKind.TOA if "toa" in ctx.kinds else MeasurementKind.RSS
        ranges = [m.value for m in meas if m.kind is kind]
        est = trilaterate(ctx.anchors, ranges)
    elif method == "triangulate":
        est = triangulate(ctx.anchors, [m.value for m in meas if m.kind is MeasurementKind.AOA])
    elif method == "hyperbolic":
        est = hyperbolic_fix(ctx.anchors, [m for m in meas if m.kind is MeasurementKind.TDOA])
    else:
        post = grid_bayes(meas, ctx.anchors, ctx.prior)
        g = s.positioning.grid
        return post.mmse if g is not None and g.output == "mmse" else post.map.position
    if est.status == DEGENERATE:
        raise _Degenerate(f"degenerate geometry (condition {est.condition:.3g})")
    return est.position


class _Degenerate(UwbError):
    pass


def _failure_reason(e: Exception) -> str:
    name = type(e).__name__
    return name[1:] if name.startswith("_") else name


def _run_trial(ctx: _Context, trial: int, do_positioning: bool) -> _TrialResult:
    s = ctx.s
    res = _TrialResult()
    for j, target in enumerate(ctx.targets):
        obs = {}
        rows = []
        failed = False
        for i, a in enumerate(ctx.anchors):
            rng = child_rng(s.seed, trial, j, i + 1)
            try:
                o = _observe_anchor(ctx, a, target, rng)
            except UwbError as e:
                res.failures.append(Failure(trial, j, "ranging", _failure_reason(e)))
                failed = True
                continue
            obs[a.id] = o
            if "toa" in o:
                rows.append(RangingRow(
                    trial, j, a.id, o["los"], o["true_toa"], o["toa"],
                    SPEED_OF_LIGHT * (o["toa"] - o["true_toa"]),
                ))
        if failed and s.failure_policy == "drop_trial":
            continue
        res.ranging.extend(rows)
        if not do_positioning:
            continue
        if failed:
            res.positions.append(PositionRow(trial, j, *target, math.nan, math.nan, math.inf))
            continue
        try:
            p = _locate(ctx, obs)
        except UwbError as e:
            res.failures.append(Failure(trial, j, "positioning", _failure_reason(e)))
            if s.failure_policy == "count_as_failure":
                res.positions.append(PositionRow(trial, j, *target, math.nan, math.nan, math.inf))
            continue
        err = float(np.hypot(*(p - target)))
        res.positions.append(PositionRow(trial, j, *target, float(p[0]), float(p[1]), err))
    return res


_CONTEXT_CACHE: dict[str, _Context] = {}


def _context_for(s: Scenario) -> _Context:
    key = s.digest()
    ctx = _CONTEXT_CACHE.get(key)
    if ctx is None:
        _CONTEXT_CACHE.clear()
        ctx = _CONTEXT_CACHE[key] = _Context(s)
    return ctx


def _run_chunk(payload) -> list[_TrialResult]:
    scenario_json, trials, do_positioning = payload
    s = Scenario.model_validate_json(scenario_json)
    ctx = _context_for(s)
    return [_run_trial(ctx, t, do_positioning) for t in trials]


def _json_float(x: float | None):
    if x is None or not math.isfinite(x):
        return None
    return x


@dataclass(frozen=True)
class RmseReport:
    """Aggregated Monte-Carlo results.

    RMSE fields are ``None`` when no sample contributed. Failed fixes are
    excluded from every RMSE; under ``count_as_failure`` they enter the
    positioning CDF as errors larger than any threshold.
    """

    version: str
    scenario_digest: str
    seed: int
    trials: int
    fixes: int
    ranging_rmse: float | None
    ranging_rmse_los: float | None
    ranging_rmse_nlos: float | None
    ranging_mean_error: float | None
    ranging_count_los: int
    ranging_count_nlos: int
    positioning_rmse: float | None
    positioning_count: int
    crlb_range_m: float | None
    cdf_thresholds: tuple[float, ...]
    ranging_cdf: tuple[float, ...] | None
    positioning_cdf: tuple[float, ...] | None
    failures: int
    failure_rate: float
    failure_reasons: dict[str, int]
    max_failure_rate: float = 1.0
    ranging_rows: tuple[RangingRow, ...] = field(repr=False, default=())
    position_rows: tuple[PositionRow, ...] = field(repr=False, default=())

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("ranging_rows")
        d.pop("position_rows")
        for k, v in d.items():
            if isinstance(v, float):
                d[k] = _json_float(v)
            elif isinstance(v, tuple):
                d[k] = list(v)
        return d

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2) + "\n"

    def ranging_csv(self) -> str:
        return _rows_csv(
            ["trial", "target", "anchor_id", "los", "true_toa_s", "est_toa_s", "error_m"],
            self.ranging_rows,
        )

    def positions_csv(self) -> str:
        return _rows_csv(
            ["trial", "target", "true_x", "true_y", "est_x", "est_y", "error_m"],
            self.position_rows,
        )

    def write(self, out_dir: str | PathLike) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(self.to_json())
        (out / "ranging.csv").write_text(self.ranging_csv())
        (out / "positions.csv").write_text(self.positions_csv())

    @property
    def exceeds_failure_threshold(self) -> bool:
        return self.failure_rate > self.max_failure_rate


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def _rows_csv(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in asdict(r).values()])
    return buf.getvalue()


def _chunks(n: int, parts: int) -> list[list[int]]:
    size = max(1, math.ceil(n / parts))
    return [list(range(i, min(n, i + size))) for i in range(0, n, size)]


def run_monte_carlo(
    s: Scenario, workers: int = 1, positioning: bool = True
) -> RmseReport:
    """Run ``s.trials`` independent trials and aggregate errors.

    ``workers > 1`` spreads trials over processes; the report is identical
    to the serial one. ``positioning=False`` stops after ranging.
    """
    payload_json = s.model_dump_json()
    if workers <= 1 or s.trials == 1:
        ctx = _context_for(s)
        results = [_run_trial(ctx, t, positioning) for t in range(s.trials)]
    else:
        chunks = _chunks(s.trials, workers * 4)
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = ex.map(_run_chunk, [(payload_json, c, positioning) for c in chunks])
            results = [r for part in parts for r in part]
    return _aggregate(s, results, positioning)


def _aggregate(s: Scenario, results: list[_TrialResult], positioning: bool) -> RmseReport:
    ranging = [r for res in results for r in res.ranging]
    positions = [p for res in results for p in res.positions]
    failures = [f for res in results for f in res.failures]

    def _rmse_or_none(vals):
        return rmse(vals) if len(vals) else None

    err_all = [r.error_m for r in ranging]
    err_los = [r.error_m for r in ranging if r.los]
    err_nlos = [r.error_m for r in ranging if not r.los]
    pos_ok = [p.error_m for p in positions if math.isfinite(p.error_m)]
    pos_all = [p.error_m for p in positions]

    ctx = _context_for(s)
    crlb = None
    if ctx.needs_waveform and s.channel.snr_db is not None:
        snr = db_to_linear(s.channel.snr_db) * ctx.spec.code_weight
        crlb = crlb_range(snr, ctx.beta)

    fixes = s.trials * len(s.targets)
    failed_fixes = len({(f.trial, f.target) for f in failures})
    reasons: dict[str, int] = {}
    for f in failures:
        key = f"{f.stage}:{f.reason}"
        reasons[key] = reasons.get(key, 0) + 1
    thr = tuple(s.cdf_thresholds)
    return RmseReport(
        version=__version__,
        scenario_digest=s.digest(),
        seed=s.seed,
        trials=s.trials,
        fixes=fixes,
        ranging_rmse=_rmse_or_none(err_all),
        ranging_rmse_los=_rmse_or_none(err_los),
        ranging_rmse_nlos=_rmse_or_none(err_nlos),
        ranging_mean_error=float(np.mean(err_all)) if err_all else None,
        ranging_count_los=len(err_los),
        ranging_count_nlos=len(err_nlos),
        positioning_rmse=_rmse_or_none(pos_ok) if positioning else None,
        positioning_count=len(pos_ok),
        crlb_range_m=crlb,
        cdf_thresholds=thr,
        ranging_cdf=tuple(error_cdf(err_all, thr)) if err_all and thr else None,
        positioning_cdf=tuple(error_cdf(pos_all, thr)) if pos_all and thr else None,
        failures=failed_fixes,
        failure_rate=failed_fixes / fixes,
        failure_reasons=dict(sorted(reasons.items())),
        ranging_rows=tuple(ranging),
        position_rows=tuple(positions),
        max_failure_rate=s.max_failure_rate,
    )
