"""Second-step position estimation in 2-D.

Measurement model: ``z_i = f_i(x, y) + noise``, with

- TOA / RSS range: distance to anchor i (meters)
- AOA: ``atan2(y - y_i, x - x_i)`` (radians)
- TDOA range: distance to anchor i minus distance to the reference anchor

Time quantities are converted to meters with the speed of light before they
reach this module.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from os import PathLike
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.special import logsumexp

from uwbpos.errors import (
    DegenerateGeometryError,
    DivergedError,
    UnderdeterminedError,
)

CONVERGED = "converged"
MAX_ITER = "max_iter"
DEGENERATE = "degenerate"

# Normal matrices (or linear systems) above this condition number are singular.
_MAX_CONDITION = 1e12

TDOA_WEIGHT_NOTE = "tdoa: diagonal weights, correlation through the reference ignored"


class MeasurementKind(str, Enum):
    TOA = "toa"
    RSS = "rss"
    AOA = "aoa"
    TDOA = "tdoa"

    @property
    def is_range(self) -> bool:
        return self in (MeasurementKind.TOA, MeasurementKind.RSS)


_KIND_CODE = {
    MeasurementKind.TOA: 0,
    MeasurementKind.RSS: 0,
    MeasurementKind.AOA: 1,
    MeasurementKind.TDOA: 2,
}


@dataclass(frozen=True)
class Anchor:
    id: str
    position: tuple[float, float]
    is_tdoa_reference: bool = False

    def __post_init__(self):
        object.__setattr__(self, "id", str(self.id))
        x, y = self.position
        object.__setattr__(self, "position", (float(x), float(y)))


@dataclass(frozen=True)
class Measurement:
    """One position-related parameter estimate.

    ``value`` is in meters for range kinds and TDOA, radians for AOA.
    """

    kind: MeasurementKind
    value: float
    variance: float
    anchor_id: str
    ref_anchor_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", MeasurementKind(self.kind))
        object.__setattr__(self, "anchor_id", str(self.anchor_id))
        if self.ref_anchor_id is not None:
            object.__setattr__(self, "ref_anchor_id", str(self.ref_anchor_id))
        if not self.variance > 0:
            raise ValueError("measurement variance must be positive")
        if self.kind is MeasurementKind.AOA and not -np.pi < self.value <= np.pi:
            raise ValueError("AOA value must lie in (-pi, pi]")


@dataclass(frozen=True, eq=False)
class PositionEstimate:
    """Solver output.

    ``residual`` is the weighted sum of squared residuals at ``position``;
    ``covariance`` is the inverse Gauss-Newton normal matrix when available.
    """

    position: np.ndarray
    status: str = CONVERGED
    iterations: int = 0
    residual: float = 0.0
    covariance: np.ndarray | None = None
    condition: float = float("nan")
    candidates: tuple = ()
    ambiguous: bool = False
    notes: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.status != DEGENERATE


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)


def anchor_map(anchors: Sequence[Anchor]) -> dict[str, Anchor]:
    amap = {}
    for a in anchors:
        if a.id in amap:
            raise ValueError(f"duplicate anchor id {a.id!r}")
        amap[a.id] = a
    return amap


def reference_anchor(anchors: Sequence[Anchor]) -> Anchor:
    refs = [a for a in anchors if a.is_tdoa_reference]
    if len(refs) != 1:
        raise ValueError(f"expected exactly one TDOA reference anchor, found {len(refs)}")
    return refs[0]


def model_f(
    kind: MeasurementKind | str,
    target: Sequence[float],
    anchor: Anchor,
    reference: Anchor | None = None,
) -> float:
    """Noiseless value of one measurement for a target position."""
    kind = MeasurementKind(kind)
    p = np.asarray(target, dtype=float)
    d = p - np.asarray(anchor.position)
    if kind.is_range:
        return float(np.hypot(*d))
    if kind is MeasurementKind.AOA:
        if not np.any(d):
            raise ValueError("angle undefined when the target sits on the anchor")
        return float(np.arctan2(d[1], d[0]))
    if reference is None:
        raise ValueError("TDOA needs a reference anchor")
    return float(np.hypot(*d) - np.hypot(*(p - np.asarray(reference.position))))


class _Problem:
    """Measurements stacked into arrays for vectorised evaluation."""

    def __init__(self, measurements: Sequence[Measurement], anchors: Sequence[Anchor]):
        if len(measurements) == 0:
            raise UnderdeterminedError("no measurements")
        amap = anchor_map(anchors)
        ref_default = None
        if any(m.kind is MeasurementKind.TDOA for m in measurements):
            flagged = [a for a in anchors if a.is_tdoa_reference]
            ref_default = flagged[0] if len(flagged) == 1 else None
        n = len(measurements)
        self.code = np.empty(n, dtype=int)
        self.anchor = np.empty((n, 2))
        self.ref = np.full((n, 2), np.nan)
        self.z = np.empty(n)
        self.sigma = np.empty(n)
        for i, m in enumerate(measurements):
            if m.anchor_id not in amap:
                raise ValueError(f"unknown anchor id {m.anchor_id!r}")
            self.code[i] = _KIND_CODE[m.kind]
            self.anchor[i] = amap[m.anchor_id].position
            if m.kind is MeasurementKind.TDOA:
                if m.ref_anchor_id is not None:
                    if m.ref_anchor_id not in amap:
                        raise ValueError(f"unknown reference id {m.ref_anchor_id!r}")
                    ref = amap[m.ref_anchor_id]
                elif ref_default is not None:
                    ref = ref_default
                else:
                    raise ValueError("TDOA measurement without a reference anchor")
                self.ref[i] = ref.position
            self.z[i] = m.value
            self.sigma[i] = np.sqrt(m.variance)
        self.is_aoa = self.code == 1
        self.is_tdoa = self.code == 2
        self.has_tdoa = bool(self.is_tdoa.any())
        used = np.vstack([self.anchor, self.ref[self.is_tdoa]])
        self.centroid = used.mean(axis=0)

    def predict(self, pts: np.ndarray) -> np.ndarray:
        """f for points of shape (..., 2); returns (..., N)."""
        pts = np.asarray(pts, dtype=float)[..., None, :]
        d = pts - self.anchor
        rng = np.hypot(d[..., 0], d[..., 1])
        out = rng.copy()
        if self.is_aoa.any():
            ang = np.arctan2(d[..., 1], d[..., 0])
            out = np.where(self.is_aoa, ang, out)
        if self.has_tdoa:
            dr = pts - np.where(np.isnan(self.ref), 0.0, self.ref)
            out = np.where(self.is_tdoa, rng - np.hypot(dr[..., 0], dr[..., 1]), out)
        return out

    def residuals(self, pts) -> np.ndarray:
        r = self.z - self.predict(pts)
        if self.is_aoa.any():
            r = np.where(self.is_aoa, wrap_angle(r), r)
        return r

    def objective(self, pts) -> np.ndarray:
        return np.sum((self.residuals(pts) / self.sigma) ** 2, axis=-1)

    def jacobian(self, p: np.ndarray) -> np.ndarray:
        d = p - self.anchor
        rho2 = np.sum(d * d, axis=1)
        rho = np.sqrt(rho2)
        safe = np.where(rho > 0, rho, 1.0)
        J = d / safe[:, None]
        J[rho == 0] = 0.0
        if self.is_aoa.any():
            s2 = np.where(rho2 > 0, rho2, 1.0)
            ja = np.column_stack([-d[:, 1] / s2, d[:, 0] / s2])
            J = np.where(self.is_aoa[:, None], ja, J)
        if self.has_tdoa:
            dr = p - np.where(np.isnan(self.ref), 0.0, self.ref)
            rr = np.hypot(dr[:, 0], dr[:, 1])
            jr = dr / np.where(rr > 0, rr, 1.0)[:, None]
            J = np.where(self.is_tdoa[:, None], J - jr, J)
        return J


def _solve(problem: _Problem, x0, max_iter: int, step_tol: float) -> PositionEstimate:
    x = np.asarray(x0, dtype=float).copy()
    f = float(problem.objective(x))
    if not np.isfinite(f):
        raise DivergedError("non-finite residual at the initial point")
    lam = 0.0
    status = MAX_ITER
    it = 0
    for it in range(1, max_iter + 1):
        Jw = problem.jacobian(x) / problem.sigma[:, None]
        rw = problem.residuals(x) / problem.sigma
        H = Jw.T @ Jw
        g = Jw.T @ rw
        if np.linalg.cond(H) > _MAX_CONDITION:
            return PositionEstimate(
                x, DEGENERATE, it, f, None, float(np.linalg.cond(H))
            )
        scale = float(np.trace(H)) / 2.0
        while True:
            step = np.linalg.solve(H + lam * scale * np.eye(2), g)
            f_new = float(problem.objective(x + step))
            if not np.isfinite(f_new):
                raise DivergedError("non-finite residual during iteration")
            if f_new <= f:
                break
            lam = 1e-3 if lam == 0.0 else lam * 10.0
            if lam > 1e12:
                step = np.zeros(2)
                f_new = f
                break
        x = x + step
        f = f_new
        lam = lam / 10.0 if lam > 1e-6 else 0.0
        if np.linalg.norm(step) < step_tol:
            status = CONVERGED
            break

    Jw = problem.jacobian(x) / problem.sigma[:, None]
    H = Jw.T @ Jw
    cond = float(np.linalg.cond(H))
    cov = np.linalg.inv(H) if cond < _MAX_CONDITION else None
    if cov is None:
        status = DEGENERATE
    notes = (TDOA_WEIGHT_NOTE,) if problem.has_tdoa else ()
    return PositionEstimate(x, status, it, f, cov, cond, notes=notes)


def nls_solve(
    measurements: Sequence[Measurement],
    anchors: Sequence[Anchor],
    init: Sequence[float] | str | None = "auto",
    max_iter: int = 100,
    step_tol: float = 1e-9,
) -> PositionEstimate:
    """Weighted non-linear least squares, ``min sum (z_i - f_i)^2 / var_i``.

    Gauss-Newton iterations fall back to Levenberg damping whenever a step
    would increase the objective, so the objective never increases. AOA
    residuals are wrapped to (-pi, pi]. ``init="auto"`` starts from the
    centroid of the anchors involved; with three or more range measurements
    it also starts from the linearized closed-form fix and keeps the run
    with the lower objective.

    Raises:
        UnderdeterminedError: with fewer than two measurements.
        DivergedError: on a non-finite residual.
    """
    if len(measurements) < 2:
        raise UnderdeterminedError("need at least two measurements for a 2-D fix")
    problem = _Problem(measurements, anchors)
    if init is not None and not isinstance(init, str):
        return _solve(problem, init, max_iter, step_tol)
    best = _solve(problem, problem.centroid, max_iter, step_tol)
    lin = _linearized_range_fix(problem)
    if lin is not None:
        alt = _solve(problem, lin, max_iter, step_tol)
        if alt.status != DEGENERATE and (best.status == DEGENERATE or alt.residual < best.residual):
            best = alt
    return best


def _linearized_range_fix(problem: _Problem) -> np.ndarray | None:
    """Closed-form start from the range measurements, or None if unavailable."""
    rng = ~(problem.is_aoa | problem.is_tdoa)
    P, z = problem.anchor[rng], problem.z[rng]
    if len(P) < 3:
        return None
    w = 1.0 / problem.sigma[rng][1:]
    A = 2.0 * (P[1:] - P[0]) * w[:, None]
    b = (z[0] ** 2 - z[1:] ** 2 + np.sum(P[1:] ** 2, axis=1) - np.sum(P[0] ** 2)) * w
    if not np.linalg.cond(A) < 1e10:
        return None
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    return x if np.all(np.isfinite(x)) else None


def trilaterate(anchors: Sequence[Anchor], ranges: Sequence[float]) -> PositionEstimate:
    """Closed-form range fix plus one Gauss-Newton polish step.

    Subtracting the first circle equation from the others gives a linear
    system solved by least squares. Collinear anchors yield a degenerate
    estimate (NaN position) carrying the condition number.
    """
    if len(anchors) < 3:
        raise UnderdeterminedError("trilateration needs at least three anchors")
    if len(ranges) != len(anchors):
        raise ValueError("one range per anchor expected")
    P = np.array([a.position for a in anchors])
    r = np.asarray(ranges, dtype=float)
    A = 2.0 * (P[1:] - P[0])
    b = r[0] ** 2 - r[1:] ** 2 + np.sum(P[1:] ** 2, axis=1) - np.sum(P[0] ** 2)
    cond = float(np.linalg.cond(A))
    if not cond < 1e10:
        return PositionEstimate(np.full(2, np.nan), DEGENERATE, 0, np.inf, None, cond)
    x, *_ = np.linalg.lstsq(A, b, rcond=None)

    meas = [Measurement(MeasurementKind.TOA, ri, 1.0, a.id) for a, ri in zip(anchors, r)]
    problem = _Problem(meas, anchors)
    f0 = float(problem.objective(x))
    J = problem.jacobian(x)
    step, *_ = np.linalg.lstsq(J, problem.residuals(x), rcond=None)
    f1 = float(problem.objective(x + step))
    if f1 <= f0:
        x, f0 = x + step, f1
    H = J.T @ J
    cov = np.linalg.inv(H) if np.linalg.cond(H) < _MAX_CONDITION else None
    return PositionEstimate(x, CONVERGED, 1, f0, cov, cond)


def triangulate(anchors: Sequence[Anchor], angles: Sequence[float]) -> PositionEstimate:
    """Least-squares intersection of bearing lines.

    Each anchor with bearing theta defines the line through the anchor with
    direction (cos theta, sin theta). Parallel lines are degenerate.
    """
    if len(anchors) < 2:
        raise UnderdeterminedError("triangulation needs at least two bearings")
    if len(angles) != len(anchors):
        raise ValueError("one bearing per anchor expected")
    P = np.array([a.position for a in anchors])
    th = np.asarray(angles, dtype=float)
    N = np.column_stack([-np.sin(th), np.cos(th)])
    b = np.sum(N * P, axis=1)
    cond = float(np.linalg.cond(N))
    if not cond < 1e10:
        return PositionEstimate(np.full(2, np.nan), DEGENERATE, 0, np.inf, None, cond)
    x, *_ = np.linalg.lstsq(N, b, rcond=None)
    res = float(np.sum((N @ x - b) ** 2))
    return PositionEstimate(x, CONVERGED, 0, res, np.linalg.inv(N.T @ N), cond)


def tdoa_measurements(
    anchors: Sequence[Anchor],
    tdoa_ranges: Mapping[str, float] | Sequence[float],
    variances: Mapping[str, float] | Sequence[float] | float = 1.0,
) -> list[Measurement]:
    """TDOA range measurements relative to the flagged reference anchor.

    A plain sequence of values is matched to the non-reference anchors in
    order.
    """
    ref = reference_anchor(anchors)
    others = [a for a in anchors if a is not ref]
    if isinstance(tdoa_ranges, Mapping):
        ids = [str(k) for k in tdoa_ranges]
        values = [float(v) for v in tdoa_ranges.values()]
    else:
        if len(tdoa_ranges) != len(others):
            raise ValueError("one TDOA per non-reference anchor expected")
        ids = [a.id for a in others]
        values = [float(v) for v in tdoa_ranges]
    if isinstance(variances, Mapping):
        var = [float(variances[i]) for i in ids]
    elif np.ndim(variances) == 0:
        var = [float(variances)] * len(ids)
    else:
        var = [float(v) for v in variances]
    return [
        Measurement(MeasurementKind.TDOA, v, s2, i, ref.id)
        for i, v, s2 in zip(ids, values, var)
    ]


def hyperbolic_fix(
    anchors: Sequence[Anchor],
    tdoa_ranges: Mapping[str, float] | Sequence[float] | Sequence[Measurement],
    variances: Mapping[str, float] | Sequence[float] | float = 1.0,
    distinct_tol: float = 1e-4,
    comparable_chi2: float = 1.0,
) -> PositionEstimate:
    """TDOA fix by multi-start NLS.

    Starts from the anchor centroid and four quadrant offsets around it.
    Distinct local minima whose weighted residual is within
    ``comparable_chi2`` of the best are returned as ``candidates`` and set
    ``ambiguous``.
    """
    if len(tdoa_ranges) and isinstance(next(iter(tdoa_ranges)), Measurement):
        meas = list(tdoa_ranges)
    else:
        meas = tdoa_measurements(anchors, tdoa_ranges, variances)
    if len(meas) < 2:
        raise UnderdeterminedError("need at least two TDOAs (three anchors)")
    problem = _Problem(meas, anchors)
    P = np.array([a.position for a in anchors])
    c = problem.centroid
    spread = float(np.max(np.hypot(*(P - c).T))) or 1.0
    seeds = [c] + [c + spread * np.array(q) for q in ((1, 1), (-1, 1), (-1, -1), (1, -1))]

    results = []
    for s in seeds:
        est = _solve(problem, s, 100, 1e-9)
        if est.status != DEGENERATE and np.all(np.isfinite(est.position)):
            results.append(est)
    if not results:
        raise DegenerateGeometryError("no seed produced a usable TDOA fix")
    best = min(results, key=lambda e: e.residual)
    tol = distinct_tol * max(1.0, spread)
    distinct = []
    for est in sorted(results, key=lambda e: e.residual):
        if est.residual > best.residual + comparable_chi2:
            continue
        if all(np.linalg.norm(est.position - d.position) > tol for d in distinct):
            distinct.append(est)
    return PositionEstimate(
        best.position,
        best.status,
        best.iterations,
        best.residual,
        best.covariance,
        best.condition,
        candidates=tuple(d.position for d in distinct),
        ambiguous=len(distinct) > 1,
        notes=(TDOA_WEIGHT_NOTE,),
    )


@dataclass(frozen=True, eq=False)
class PriorGrid:
    """Rectangular grid of cells with prior mass; rows index y, columns x."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    resolution: float
    mass: np.ndarray | None = None

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("empty grid domain")
        shape = self.shape
        if self.mass is None:
            m = np.full(shape, 1.0 / (shape[0] * shape[1]))
        else:
            m = np.array(self.mass, dtype=float)
            if m.shape != shape:
                raise ValueError(f"prior mass shape {m.shape} != grid shape {shape}")
            if np.any(m < 0):
                raise ValueError("prior mass must be non-negative")
            if not abs(m.sum() - 1.0) < 1e-9:
                raise ValueError("prior mass must sum to 1")
        m.setflags(write=False)
        object.__setattr__(self, "mass", m)

    @property
    def shape(self) -> tuple[int, int]:
        nx = int(round((self.x_max - self.x_min) / self.resolution))
        ny = int(round((self.y_max - self.y_min) / self.resolution))
        return ny, nx

    @property
    def x_centers(self) -> np.ndarray:
        return self.x_min + (np.arange(self.shape[1]) + 0.5) * self.resolution

    @property
    def y_centers(self) -> np.ndarray:
        return self.y_min + (np.arange(self.shape[0]) + 0.5) * self.resolution

    def cell_of(self, point: Sequence[float]) -> tuple[int, int]:
        ix = int(np.floor((point[0] - self.x_min) / self.resolution))
        iy = int(np.floor((point[1] - self.y_min) / self.resolution))
        return iy, ix


@dataclass(frozen=True, eq=False)
class GridPosterior:
    map: PositionEstimate
    mmse: np.ndarray
    posterior: np.ndarray
    multimodal: bool


def grid_bayes(
    measurements: Sequence[Measurement],
    anchors: Sequence[Anchor],
    prior: PriorGrid,
) -> GridPosterior:
    """Posterior over a grid under independent Gaussian measurement noise.

    Works in the log domain. MAP is the first maximising cell in row-major
    order; MMSE is the posterior mean of the cell centres. ``multimodal``
    flags more than one separated local maximum holding at least 10 % of
    the peak posterior.
    """
    problem = _Problem(measurements, anchors)
    xc, yc = prior.x_centers, prior.y_centers
    X, Y = np.meshgrid(xc, yc)
    pts = np.stack([X, Y], axis=-1)
    loglik = -0.5 * problem.objective(pts)
    with np.errstate(divide="ignore"):
        logpost = loglik + np.log(prior.mass)
    norm = logsumexp(logpost)
    if not np.isfinite(norm):
        raise DivergedError("posterior vanished everywhere; check prior support")
    post = np.exp(logpost - norm)
    k = int(np.argmax(logpost))
    iy, ix = np.unravel_index(k, post.shape)
    map_pos = np.array([xc[ix], yc[iy]])
    mmse = np.array([np.sum(post * X), np.sum(post * Y)])

    peaks = (post == ndimage.maximum_filter(post, size=3)) & (post >= 0.1 * post.max())
    _, n_peaks = ndimage.label(peaks, structure=np.ones((3, 3)))
    est = PositionEstimate(
        map_pos,
        CONVERGED,
        0,
        float(problem.objective(map_pos)),
        notes=(TDOA_WEIGHT_NOTE,) if problem.has_tdoa else (),
    )
    return GridPosterior(est, mmse, post, n_peaks > 1)


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """Fingerprint database: measurement vectors and their locations."""

    measurements: np.ndarray
    locations: np.ndarray
    columns: tuple[str, ...] = field(default=())

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.measurements, dtype=float))
        loc = np.atleast_2d(np.asarray(self.locations, dtype=float))
        if m.shape[0] == 0:
            raise ValueError("training set is empty")
        if loc.shape != (m.shape[0], 2):
            raise ValueError("need one (x, y) location per measurement vector")
        m.setflags(write=False)
        loc.setflags(write=False)
        object.__setattr__(self, "measurements", m)
        object.__setattr__(self, "locations", loc)
        if not self.columns:
            object.__setattr__(self, "columns", tuple(f"m{i}" for i in range(m.shape[1])))

    def __len__(self) -> int:
        return self.measurements.shape[0]

    @property
    def dim(self) -> int:
        return self.measurements.shape[1]

    def to_csv(self, path: str | PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([*self.columns, "x", "y"])
            for m, loc in zip(self.measurements, self.locations):
                w.writerow([repr(float(v)) for v in (*m, *loc)])

    @classmethod
    def from_csv(cls, path: str | PathLike) -> "TrainingSet":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if header[-2:] != ["x", "y"]:
            raise ValueError("training CSV must end with x,y columns")
        data = np.array([[float(v) for v in row] for row in body], dtype=float)
        if data.size == 0:
            raise ValueError("training set is empty")
        return cls(data[:, :-2], data[:, -2:], tuple(header[:-2]))


def knn_estimate(
    ts: TrainingSet,
    m: Sequence[float],
    k: int = 1,
    weighting: str = "uniform",
    eps: float = 1e-9,
) -> np.ndarray:
    """Weighted average of the locations of the k nearest fingerprints.

    Neighbours are ranked by Euclidean distance in measurement space, ties
    by training index. ``weighting`` is ``"uniform"`` or
    ``"inverse_distance"`` (weights proportional to ``1 / (eps + dist)``).
    """
    q = np.asarray(m, dtype=float).ravel()
    if q.size != ts.dim:
        raise ValueError(f"query has {q.size} entries, training vectors have {ts.dim}")
    if not 1 <= k <= len(ts):
        raise ValueError(f"k must lie in [1, {len(ts)}]")
    dist = np.linalg.norm(ts.measurements - q, axis=1)
    idx = np.argsort(dist, kind="stable")[:k]
    if weighting == "uniform":
        w = np.full(k, 1.0 / k)
    elif weighting == "inverse_distance":
        w = 1.0 / (eps + dist[idx])
        w /= w.sum()
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    return w @ ts.locations[idx]
