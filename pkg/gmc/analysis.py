# --- Estimators and statistical tests for chaos ensembles ---
# Description: closed-form spectra (structure exponent, tau, singularity
#              spectrum, KPZ maps), moment and scaling fits, thick points,
#              KPZ box counting, tails, exact scale invariance, star scale
#              invariance, Kahane comparison, cutoff equivalence, degeneracy,
#              maxima of the field and beta-energies.
# -----------------------------------------------------------------

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import dblquad, quad
from scipy.signal import fftconvolve
from scipy.stats import ks_2samp, linregress, norm

from gmc.chaos import (
    ChaosMeasure,
    ball_mass_field,
    build_subcritical,
    sample_rooted_point,
)
from gmc.errors import ParameterError, PreconditionError
from gmc.fields import FieldRealization, GridDomain, RefinementLadder, RefinementSampler
from gmc.kernels import (
    JitterPolicy,
    KernelFamily,
    KernelSpec,
    exact_log_cutoff,
    factor_covariance,
    star_band_decomposition,
    star_cutoff_kernel,
)
from gmc.utils import derive_rng, run_replicas

logger = logging.getLogger(__name__)

ONE_SIDED_99 = float(norm.ppf(0.99))
ISOTHERMAL_ITERATIONS = 40


# ---- Closed Forms ----

def structure_exponent(q: float, gamma: float, d: int) -> float:
    """xi(q) = (d + gamma^2/2) q - gamma^2 q^2 / 2."""
    return (d + gamma ** 2 / 2.0) * q - gamma ** 2 * q ** 2 / 2.0


def tau_spectrum(gamma: float, d: int, q: float) -> float:
    """Three-branch L^q spectrum with linear branches beyond |q| = sqrt(2d)/gamma."""
    if gamma == 0:
        return d * (q - 1.0)
    edge = math.sqrt(2 * d) / gamma
    if q <= -edge:
        return (math.sqrt(d) + gamma / math.sqrt(2)) ** 2 * q
    if q >= edge:
        return (math.sqrt(d) - gamma / math.sqrt(2)) ** 2 * q
    return structure_exponent(q, gamma, d) - d


def singularity_support(gamma: float, d: int) -> Tuple[float, float]:
    return (math.sqrt(d) - gamma / math.sqrt(2)) ** 2, (math.sqrt(d) + gamma / math.sqrt(2)) ** 2


def singularity_spectrum(gamma: float, d: int, delta: float) -> float:
    """dim E_delta = d - (d/gamma + gamma/2 - delta/gamma)^2 / 2 on its support, zero elsewhere."""
    if gamma == 0:
        return float(d) if delta == d else 0.0
    lo, hi = singularity_support(gamma, d)
    if delta < lo or delta > hi:
        return 0.0
    return max(d - 0.5 * (d / gamma + gamma / 2.0 - delta / gamma) ** 2, 0.0)


def kpz_x_from_delta(delta: float, gamma: float) -> float:
    """x = (gamma^2/4) Delta^2 + (1 - gamma^2/4) Delta."""
    return gamma ** 2 / 4.0 * delta ** 2 + (1.0 - gamma ** 2 / 4.0) * delta


def kpz_delta_from_x(x: float, gamma: float) -> float:
    """Nonnegative root of the KPZ quadratic, in the cancellation-free form."""
    b = 1.0 - gamma ** 2 / 4.0
    return 2.0 * x / (b + math.sqrt(b * b + gamma ** 2 * x))


def kpz_hausdorff_euclidean(dim_quantum: float, gamma: float, dimension: int = 2) -> float:
    """dim_Leb = (1 + gamma^2/(2n)) dim_M - gamma^2/(2n) dim_M^2."""
    a = gamma ** 2 / (2.0 * dimension)
    return (1.0 + a) * dim_quantum - a * dim_quantum ** 2


def kpz_hausdorff_quantum(dim_euclidean: float, gamma: float, dimension: int = 2) -> float:
    """Inverse of kpz_hausdorff_euclidean on [0, 1]."""
    a = gamma ** 2 / (2.0 * dimension)
    return 2.0 * dim_euclidean / ((1.0 + a) + math.sqrt((1.0 + a) ** 2 - 4.0 * a * dim_euclidean))


def central_charge_couplings(c: float) -> Tuple[float, float]:
    """(gamma, gamma_bar) = ((sqrt(25 - c) -/+ sqrt(1 - c)) / sqrt 6); their product is 4."""
    if c > 1:
        raise ParameterError("central charge must be at most 1")
    root_a, root_b = math.sqrt(25.0 - c), math.sqrt(1.0 - c)
    return (root_a - root_b) / math.sqrt(6.0), (root_a + root_b) / math.sqrt(6.0)


def local_exponent_target(q: float, gamma: float, d: int) -> float:
    """d + (1/2 - q) gamma^2."""
    return d + (0.5 - q) * gamma ** 2


# ---- Shared Helpers ----

def central_mask(grid, margin_fraction: float = 0.25) -> np.ndarray:
    """Cells whose centre lies at least margin_fraction * extent from the boundary on every axis."""
    points = grid.points()
    extents = np.asarray(grid.extents)
    lo, hi = margin_fraction * extents, (1.0 - margin_fraction) * extents
    inside = np.all((points >= lo - 1e-12) & (points <= hi + 1e-12), axis=1)
    return inside.reshape(grid.shape)


def _ols_slopes(log_x: np.ndarray, log_y: np.ndarray) -> np.ndarray:
    """Slopes of log_y[..., k] against log_x[k] along the last axis."""
    centred = log_x - log_x.mean()
    return ((log_y - log_y.mean(axis=-1, keepdims=True)) @ centred) / float(centred @ centred)


def _quadrant_masses(measure: ChaosMeasure) -> np.ndarray:
    masses = np.asarray(measure.cell_masses)
    halves = [np.array_split(np.arange(s), 2) for s in masses.shape]
    out = []
    for rows in halves[0]:
        if masses.ndim == 1:
            out.append(masses[rows].sum())
            continue
        for cols in halves[1]:
            out.append(masses[np.ix_(rows, cols)].sum())
    return np.asarray(out)


# ---- Moments ----

@dataclass(frozen=True)
class MomentTable:
    p_values: Tuple[float, ...]
    moments: Tuple[float, ...]
    stderr: Tuple[float, ...]
    regimes: Tuple[str, ...]
    n_samples: int
    seed: int

    def rows(self) -> List[Tuple[float, float, float, str]]:
        return list(zip(self.p_values, self.moments, self.stderr, self.regimes))


def estimate_moments(
    masses: Sequence[float],
    p_list: Sequence[float],
    gamma: Optional[float] = None,
    d: Optional[int] = None,
    n_boot: int = 200,
    seed: int = 0,
) -> MomentTable:
    """Empirical p-th moments with bootstrap standard errors; p >= 2d/gamma^2 rows are marked divergent."""
    values = np.asarray(masses, dtype=float)
    if values.size < 100:
        raise PreconditionError(f"moment estimation needs at least 100 samples, got {values.size}")
    if any(p < 0 for p in p_list) and np.any(values <= 0):
        raise PreconditionError("negative moments requested on an ensemble with nonpositive masses")
    threshold = math.inf if not gamma or d is None else 2.0 * d / gamma ** 2
    rng = np.random.default_rng(seed)
    resample = rng.integers(0, values.size, size=(n_boot, values.size))
    moments, errors, regimes = [], [], []
    for p in p_list:
        powered = values ** p
        moments.append(float(powered.mean()))
        errors.append(float(powered[resample].mean(axis=1).std(ddof=1)))
        regime = "divergent regime" if p >= threshold else "finite"
        if regime != "finite":
            logger.warning(f"Moment p={p:g} is beyond the finiteness threshold {threshold:g}")
        regimes.append(regime)
    return MomentTable(tuple(float(p) for p in p_list), tuple(moments), tuple(errors), tuple(regimes), values.size, seed)


# ---- Structure Exponent ----

@dataclass(frozen=True)
class MomentScalingFit:
    q_values: Tuple[float, ...]
    radii: Tuple[float, ...]
    moments: np.ndarray = field(repr=False)
    moment_stderr: np.ndarray = field(repr=False)
    xi_hat: Tuple[float, ...] = ()
    xi_stderr: Tuple[float, ...] = ()
    r2: Tuple[float, ...] = ()
    xi_theory: Tuple[float, ...] = ()
    n_replicas: int = 0

    def rows(self) -> List[Tuple[float, float, float, float, float]]:
        return list(zip(self.q_values, self.xi_hat, self.xi_theory, self.xi_stderr, self.r2))

    def within(self, tolerance: float) -> bool:
        checked = [(a, b) for a, b in zip(self.xi_hat, self.xi_theory) if math.isfinite(a)]
        return bool(checked) and all(abs(a - b) <= tolerance for a, b in checked)


def _uniform_spacing(grid) -> float:
    spacings = getattr(grid, "spacings", (grid.spacing,))
    if not np.allclose(spacings, spacings[0]):
        raise PreconditionError("ball statistics need square cells")
    return float(spacings[0])


def usable_radii(grid, radii: Sequence[float]) -> Tuple[float, ...]:
    """Radii within [8h, domain/4], largest first; at least four are required."""
    h = _uniform_spacing(grid)
    upper = min(grid.extents) / 4.0
    usable = tuple(sorted({float(r) for r in radii if 8.0 * h - 1e-12 <= r <= upper + 1e-12}, reverse=True))
    if len(usable) < 4:
        raise PreconditionError(f"need at least 4 radii within [8h, domain/4], got {len(usable)}")
    return usable


def _centre_mask(grid, center_policy: str) -> np.ndarray:
    if center_policy == "central":
        return central_mask(grid)
    if center_policy == "centre":
        mask = np.zeros(grid.shape, dtype=bool)
        mask[tuple(s // 2 for s in grid.shape)] = True
        return mask
    raise ParameterError(f"unknown center policy {center_policy!r}")


def ball_moments(
    measure: ChaosMeasure, q_list: Sequence[float], radii: Sequence[float], center_policy: str = "central"
) -> np.ndarray:
    """Mean of M(B(x, r))^q over the centres of one measure; shape (len(q_list), len(radii))."""
    h = _uniform_spacing(measure.grid)
    mask = _centre_mask(measure.grid, center_policy)
    q_values = np.asarray(q_list, dtype=float)
    out = np.zeros((q_values.size, len(radii)))
    for j, r in enumerate(radii):
        balls = ball_mass_field(measure.cell_masses, h, r)[mask]
        out[:, j] = np.mean(balls[None, :] ** q_values[:, None], axis=1)
    return out


def fit_ball_moments(
    per_replica: np.ndarray, q_list: Sequence[float], radii: Sequence[float], gamma: float, d: int
) -> MomentScalingFit:
    """Log-log OLS per q of replica-averaged ball moments; q >= 2d/gamma^2 rows are not fitted."""
    per_replica = np.asarray(per_replica, dtype=float)
    n = per_replica.shape[0]
    moments = per_replica.mean(axis=0)
    stderr = per_replica.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(moments)
    threshold = math.inf if gamma == 0 else 2.0 * d / gamma ** 2
    log_r = np.log(radii)
    xi_hat, xi_err, r2 = [], [], []
    for k, q in enumerate(q_list):
        if q >= threshold:
            logger.warning(f"q={q:g} is beyond the moment threshold {threshold:g}; row not fitted")
            xi_hat.append(float("nan"))
            xi_err.append(float("nan"))
            r2.append(float("nan"))
            continue
        fit = linregress(log_r, np.log(moments[k]))
        xi_hat.append(float(fit.slope))
        xi_err.append(float(fit.stderr))
        r2.append(float(fit.rvalue ** 2))
    theory = tuple(structure_exponent(q, gamma, d) for q in q_list)
    return MomentScalingFit(
        tuple(float(q) for q in q_list), tuple(float(r) for r in radii), moments, stderr, tuple(xi_hat),
        tuple(xi_err), tuple(r2), theory, n,
    )


def fit_structure_exponent(
    measures: Sequence[ChaosMeasure],
    q_list: Sequence[float],
    radii: Sequence[float],
    center_policy: str = "central",
) -> MomentScalingFit:
    """
    Log-log OLS of E[M(B(x, r))^q] against r for centres at least domain/4 from the boundary.
    Radii outside [8h, domain/4] are dropped.
    """
    if not measures:
        raise PreconditionError("empty ensemble")
    grid = measures[0].grid
    usable = usable_radii(grid, radii)
    per_replica = np.stack([ball_moments(m, q_list, usable, center_policy) for m in measures])
    return fit_ball_moments(per_replica, q_list, usable, measures[0].gamma, grid.dimension)


# ---- Local Exponents and Thick Points ----

@dataclass(frozen=True)
class LocalExponentField:
    points: Tuple[Tuple[int, ...], ...]
    slopes: np.ndarray = field(repr=False)
    radii: Tuple[float, ...] = ()
    target: Optional[float] = None
    tolerance: float = 0.15

    @property
    def mean_slope(self) -> float:
        return float(np.mean(self.slopes))

    @property
    def classification(self) -> np.ndarray:
        if self.target is None:
            return np.zeros(len(self.points), dtype=bool)
        return np.abs(self.slopes - self.target) <= self.tolerance

    def rows(self) -> List[Tuple]:
        target = float("nan") if self.target is None else self.target
        return [(*p, float(s), target) for p, s in zip(self.points, self.slopes)]


def local_exponent(
    measure: ChaosMeasure,
    points: Sequence[Tuple[int, ...]],
    radii: Sequence[float],
    q: Optional[float] = None,
) -> LocalExponentField:
    """Per-point slope of ln M(B(x, r)) against ln r; target d + (1/2 - q) gamma^2 when q is given."""
    h = _uniform_spacing(measure.grid)
    radii = tuple(sorted(float(r) for r in radii))
    if len(radii) < 2:
        raise PreconditionError("local exponent needs at least two radii")
    index = tuple(np.asarray(points).T)
    logs = np.stack([np.log(ball_mass_field(measure.cell_masses, h, r)[index]) for r in radii], axis=-1)
    slopes = _ols_slopes(np.log(radii), logs)
    target = None if q is None else local_exponent_target(q, measure.gamma, measure.grid.dimension)
    return LocalExponentField(tuple(tuple(int(i) for i in p) for p in points), slopes, radii, target)


@dataclass(frozen=True)
class RootedExponentReport:
    q: float
    gamma: float
    mean_slope: float
    stderr: float
    target: float
    lebesgue_mean_slope: float
    lebesgue_target: float
    n_rooted: int
    passed: bool

    def rows(self) -> List[Tuple]:
        return [
            ("rooted", self.q, self.mean_slope, self.stderr, self.target),
            ("lebesgue", 0.0, self.lebesgue_mean_slope, float("nan"), self.lebesgue_target),
        ]


def _restricted(measure: ChaosMeasure, mask: np.ndarray) -> ChaosMeasure:
    return ChaosMeasure(
        grid=measure.grid, gamma=measure.gamma, regime=measure.regime,
        cell_masses=np.where(mask, measure.cell_masses, 0.0), cutoff=measure.cutoff, weights=measure.weights,
        source=measure.source,
    )


class RootedSample(NamedTuple):
    slope: float
    lebesgue_slope: float
    weight: float


def rooted_sample(
    realization: FieldRealization, gamma: float, q: float, radii: Sequence[float], rng: np.random.Generator
) -> RootedSample:
    """
    One point rooted in M_{q gamma} restricted to the central region, the slope of
    ln M_gamma(B(x*, r)) against ln r there, and a uniformly rooted companion slope.
    """
    mask = central_mask(realization.grid)
    central_cells = np.argwhere(mask)
    measure = build_subcritical(realization, gamma)
    rooting = _restricted(build_subcritical(realization, q * gamma), mask)
    root = sample_rooted_point(rooting, rng)
    uniform = tuple(central_cells[rng.integers(len(central_cells))])
    slopes = local_exponent(measure, [root.cell, uniform], radii).slopes
    return RootedSample(float(slopes[0]), float(slopes[1]), rooting.total_mass)


def summarize_rooted(
    samples: Sequence[RootedSample], gamma: float, q: float, d: int, tolerance: float = 0.15
) -> RootedExponentReport:
    """Mass-weighted mean of the rooted slopes, which realizes the rooted law across replicas."""
    slopes = np.array([s.slope for s in samples])
    weights = np.array([s.weight for s in samples])
    mean = float(np.average(slopes, weights=weights))
    n_eff = weights.sum() ** 2 / np.sum(weights ** 2)
    spread = math.sqrt(float(np.average((slopes - mean) ** 2, weights=weights)))
    target = local_exponent_target(q, gamma, d)
    return RootedExponentReport(
        q, gamma, mean, spread / math.sqrt(n_eff), target, float(np.mean([s.lebesgue_slope for s in samples])),
        d + gamma ** 2 / 2.0, len(samples), abs(mean - target) <= tolerance,
    )


def rooted_local_exponents(
    fields: Sequence[FieldRealization],
    gamma: float,
    q: float,
    radii: Sequence[float],
    rng: np.random.Generator,
    tolerance: float = 0.15,
) -> RootedExponentReport:
    """Rooted local exponents of M_gamma at M_{q gamma}-typical points, against d + (1/2 - q) gamma^2."""
    samples = [rooted_sample(realization, gamma, q, radii, rng) for realization in fields]
    return summarize_rooted(samples, gamma, q, fields[0].grid.dimension, tolerance)


@dataclass(frozen=True)
class ThickPointReport:
    gamma: float
    q: float
    drift_ratio: float
    drift_ratio_stderr: float
    drift_slope: float
    log_ratio: float
    centred_log_ratio: float
    increment_variance: Tuple[float, ...]
    analytic_increment_variance: Tuple[float, ...]
    n_rooted: int
    tolerance: float

    @property
    def target(self) -> float:
        return self.q * self.gamma

    @property
    def drift_ok(self) -> bool:
        return abs(self.drift_ratio - self.target) <= self.tolerance

    @property
    def growth_ok(self) -> bool:
        """X_eps(x*) must grow like q gamma ln(1/eps), both along the ladder and at the finest level."""
        return (
            abs(self.drift_slope - self.target) <= self.tolerance
            and abs(self.centred_log_ratio - self.target) <= self.tolerance
        )

    @property
    def passed(self) -> bool:
        return self.drift_ok and self.growth_ok

    def rows(self) -> List[Tuple]:
        return [
            (k, emp, ana) for k, (emp, ana) in enumerate(zip(self.increment_variance, self.analytic_increment_variance), 1)
        ]


class ThickPath(NamedTuple):
    values: np.ndarray
    variances: np.ndarray
    cutoffs: Tuple[float, ...]
    weight: float


def thick_point_path(ladder: RefinementLadder, gamma: float, q: float, rng: np.random.Generator) -> ThickPath:
    """X_eps(x*) and Var X_eps(x*) along the ladder, x* rooted in M_{q gamma} of the finest level."""
    if not ladder.independent_increments:
        raise PreconditionError("thick-point drift needs an independent-increment construction")
    finest = ladder.finest
    rooting = _restricted(build_subcritical(finest, q * gamma), central_mask(finest.grid))
    root = sample_rooted_point(rooting, rng)
    values = np.array([level.values[root.cell] for level in ladder.levels])
    variances = np.array([level.variance[root.cell] for level in ladder.levels])
    return ThickPath(values, variances, ladder.cutoffs, rooting.total_mass)


def summarize_thick_points(
    paths: Sequence[ThickPath], gamma: float, q: float, tolerance: float = 0.1
) -> ThickPointReport:
    """
    drift_ratio estimates E_Q[X_eps(x*)/Var X_eps(x*)] = q gamma at the finest level.
    drift_slope regresses the mean path on ln(1/eps) over the finer half of the ladder, where
    Var X_eps grows like ln(1/eps). log_ratio is the mean of X_eps(x*)/ln(1/eps); centred_log_ratio
    first removes q gamma times the O(1) offset Var X_eps(x*) - ln(1/eps) of the construction.
    Replicas are weighted by their rooting mass.
    """
    w = np.array([p.weight for p in paths])
    w = w / w.sum()
    values = np.array([p.values for p in paths])
    variances = np.array([p.variances for p in paths])
    ratios = values[:, -1] / variances[:, -1]
    drift = float(w @ ratios)
    n_eff = 1.0 / float(np.sum(w ** 2))
    stderr = math.sqrt(float(w @ (ratios - drift) ** 2) / n_eff)
    log_cutoffs = np.log(1.0 / np.asarray(paths[0].cutoffs))
    fine = slice(log_cutoffs.size // 2, None)
    if log_cutoffs[fine].size > 1:
        slope = float(linregress(log_cutoffs[fine], (w @ values)[fine]).slope)
    else:
        slope = float("nan")
    increments = np.diff(values, axis=1)
    empirical = tuple(float(v) for v in w @ (increments - w @ increments) ** 2)
    analytic = tuple(float(v) for v in np.mean(np.diff(variances, axis=1), axis=0))
    log_ratio = float(w @ (values[:, -1] / log_cutoffs[-1]))
    offsets = variances[:, -1] - log_cutoffs[-1]
    centred = float(w @ ((values[:, -1] - q * gamma * offsets) / log_cutoffs[-1]))
    return ThickPointReport(
        gamma, q, drift, stderr, slope, log_ratio, centred, empirical, analytic, len(paths), tolerance
    )


def thick_point_drift(
    ladders: Sequence[RefinementLadder],
    gamma: float,
    q: float,
    rng: np.random.Generator,
    tolerance: float = 0.1,
) -> ThickPointReport:
    """Follows X_eps(x*) along each ladder at a point rooted in M_{q gamma}."""
    return summarize_thick_points([thick_point_path(ladder, gamma, q, rng) for ladder in ladders], gamma, q, tolerance)


# ---- KPZ ----

@dataclass(frozen=True)
class FractalSet:
    """Deterministic compact set: a horizontal segment or an axis-aligned square."""

    kind: str
    start: Tuple[float, float]
    end: Tuple[float, float]

    def distance(self, points: np.ndarray) -> np.ndarray:
        lo = np.minimum(self.start, self.end)
        hi = np.maximum(self.start, self.end)
        if self.kind not in ("segment", "square"):
            raise ParameterError(f"unknown fractal kind {self.kind!r}")
        gap = np.maximum(np.maximum(lo - points, points - hi), 0.0)
        return np.linalg.norm(gap, axis=1)

    @property
    def euclidean_exponent(self) -> float:
        """Euclidean scaling exponent x = codimension / 2."""
        if self.kind == "square":
            return 0.0
        degenerate = sum(1 for a, b in zip(self.start, self.end) if a == b)
        return degenerate / 2.0

    def check_margin(self, grid, margin_fraction: float = 0.25) -> None:
        extents = np.asarray(grid.extents)
        for corner in (self.start, self.end):
            c = np.asarray(corner)
            if np.any(c < margin_fraction * extents - 1e-12) or np.any(c > (1 - margin_fraction) * extents + 1e-12):
                raise PreconditionError("fractal set intersects the boundary margin")


@dataclass(frozen=True)
class KPZReport:
    fractal: FractalSet
    gamma: float
    x_hat: float
    delta_hat: float
    delta_pred: float
    residual: float
    x_theory: float
    n_replicas: int

    def rows(self) -> List[Tuple[float, float, float, float]]:
        return [(self.x_hat, self.delta_hat, self.delta_pred, self.residual)]


def _ball_mass_at(masses: np.ndarray, points: np.ndarray, centre: np.ndarray, radius: float) -> float:
    inside = np.sum((points - centre) ** 2, axis=1) <= radius ** 2 * (1.0 + 1e-12)
    return float(masses.ravel()[inside].sum())


def isothermal_radius(
    measure: ChaosMeasure, centre, delta: float, r_lo: Optional[float] = None, r_hi: Optional[float] = None
) -> float:
    """sup{r : M(B(z, r)) <= delta} by bisection on [h, domain/4] (40 iterations)."""
    grid = measure.grid
    points = grid.points()
    r_lo = grid.spacing if r_lo is None else r_lo
    r_hi = min(grid.extents) / 4.0 if r_hi is None else r_hi
    centre = np.asarray(centre, dtype=float)
    if _ball_mass_at(measure.cell_masses, points, centre, r_hi) <= delta:
        return r_hi
    if _ball_mass_at(measure.cell_masses, points, centre, r_lo) > delta:
        return r_lo
    for _ in range(ISOTHERMAL_ITERATIONS):
        mid = 0.5 * (r_lo + r_hi)
        if _ball_mass_at(measure.cell_masses, points, centre, mid) <= delta:
            r_lo = mid
        else:
            r_hi = mid
    return r_lo


def _isothermal_radii(masses: np.ndarray, h: float, cells: np.ndarray, deltas: Sequence[float], r_max: float) -> np.ndarray:
    """
    sup{r : M(B(z, r)) <= delta} for every cell z and every delta, on the discrete measure.
    Offsets within r_max are sorted once and cumulated per centre; zero mass outside the grid.
    """
    reach = int(math.floor(r_max / h))
    axis = np.arange(-reach, reach + 1)
    offsets = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
    dist = np.linalg.norm(offsets, axis=1) * h
    keep = dist <= r_max + 1e-12
    order = np.argsort(dist[keep], kind="stable")
    offsets, dist = offsets[keep][order], dist[keep][order]
    group_end = np.r_[np.nonzero(np.diff(dist) > 1e-12)[0], dist.size - 1]
    padded = np.pad(masses, reach)
    radii = np.empty((len(cells), len(deltas)))
    for i, cell in enumerate(cells):
        window = padded[cell[0] + reach + offsets[:, 0], cell[1] + reach + offsets[:, 1]]
        cumulative = np.cumsum(window)[group_end]
        for j, delta in enumerate(deltas):
            first = np.searchsorted(cumulative, delta, side="right")
            radii[i, j] = dist[group_end[first]] if first < group_end.size else r_max
    return radii


def _check_kpz_grid(grid, fractal: FractalSet) -> float:
    if grid.dimension != 2:
        raise PreconditionError("KPZ box counting is two-dimensional")
    fractal.check_margin(grid)
    return _uniform_spacing(grid)


def euclidean_exponent_fit(grid, fractal: FractalSet, eps_ladder: Sequence[float]) -> float:
    """Slope of ln lambda(B_eps(K)) against ln eps^2."""
    h = _check_kpz_grid(grid, fractal)
    distance = fractal.distance(grid.points())
    areas = [float(np.count_nonzero(distance <= eps + 1e-12)) * h * h for eps in eps_ladder]
    return float(linregress(np.log(np.asarray(eps_ladder) ** 2), np.log(areas)).slope)


def quantum_neighbourhood_masses(
    measure: ChaosMeasure, fractal: FractalSet, delta_ladder: Sequence[float]
) -> np.ndarray:
    """M(B^delta(K)) per delta, B^delta(K) the union of isothermal balls of mass delta centred on K."""
    grid = measure.grid
    h = _check_kpz_grid(grid, fractal)
    points = grid.points()
    masses = np.asarray(measure.cell_masses)
    on_set = np.argwhere(fractal.distance(points).reshape(grid.shape) <= h / 2.0 + 1e-12)
    set_points = points.reshape(grid.shape + (2,))[tuple(on_set.T)]
    radii = _isothermal_radii(masses, h, on_set, delta_ladder, min(grid.extents) / 4.0)
    out = np.zeros(len(delta_ladder))
    for j in range(len(delta_ladder)):
        covered = np.zeros(points.shape[0], dtype=bool)
        for centre, radius in zip(set_points, radii[:, j]):
            covered |= np.sum((points - centre) ** 2, axis=1) <= radius ** 2 * (1.0 + 1e-12)
        out[j] = float(masses.ravel()[covered].sum())
    return out


def kpz_report(
    fractal: FractalSet, gamma: float, x_hat: float, delta_ladder: Sequence[float], mean_masses: np.ndarray,
    n_replicas: int,
) -> KPZReport:
    """Delta_hat from the slope of ln E M(B^delta(K)) against ln delta, compared with the KPZ root of x_hat."""
    delta_hat = float(linregress(np.log(delta_ladder), np.log(mean_masses)).slope)
    return KPZReport(
        fractal, gamma, x_hat, delta_hat, kpz_delta_from_x(x_hat, gamma), x_hat - kpz_x_from_delta(delta_hat, gamma),
        fractal.euclidean_exponent, n_replicas,
    )


def kpz_box_counting(
    measures: Sequence[ChaosMeasure],
    fractal: FractalSet,
    eps_ladder: Sequence[float],
    delta_ladder: Sequence[float],
) -> KPZReport:
    """Euclidean and quantum scaling exponents of a deterministic set K from box counting."""
    x_hat = euclidean_exponent_fit(measures[0].grid, fractal, eps_ladder)
    quantum = np.mean([quantum_neighbourhood_masses(m, fractal, delta_ladder) for m in measures], axis=0)
    return kpz_report(fractal, measures[0].gamma, x_hat, delta_ladder, quantum, len(measures))


# ---- Tails ----

@dataclass(frozen=True)
class TailFit:
    gamma: float
    exponent: float
    ci_low: float
    ci_high: float
    target: float
    k: int
    n_samples: int
    seed: int

    @property
    def relative_error(self) -> float:
        return abs(self.exponent - self.target) / self.target

    def rows(self) -> List[Tuple]:
        return [(self.gamma, self.exponent, self.ci_low, self.ci_high, self.target, self.k, self.n_samples)]


def hill_estimator(samples: np.ndarray, k: int) -> float:
    ordered = np.sort(samples)[::-1]
    return 1.0 / float(np.mean(np.log(ordered[:k]) - math.log(ordered[k])))


def tail_exponent_fit(
    masses: Sequence[float], gamma: float, tail_fraction: float = 0.05, n_boot: int = 500, seed: int = 0,
    min_tail: int = 50,
) -> TailFit:
    """Hill estimator on the upper tail_fraction order statistics, with a bootstrap CI, against 2/gamma^2."""
    values = np.asarray(masses, dtype=float)
    k = int(math.floor(tail_fraction * values.size))
    if k < min_tail:
        raise PreconditionError(f"tail sample of {k} order statistics is too small (need {min_tail})")
    if values.size < 10_000:
        logger.warning(f"Tail fit on {values.size} samples; at least 10^4 are recommended")
    estimate = hill_estimator(values, k)
    rng = np.random.default_rng(seed)
    boot = [hill_estimator(values[rng.integers(0, values.size, values.size)], k) for _ in range(n_boot)]
    low, high = np.percentile(boot, [2.5, 97.5])
    return TailFit(gamma, estimate, float(low), float(high), 2.0 / gamma ** 2, k, values.size, seed)


# ---- Second-Moment Oracles ----

def second_moment_oracle(spec: KernelSpec, side: float, gamma: float, eps: float) -> float:
    """
    int int_{A x A} exp(gamma^2 K_eps(x, y)) dx dy for a cube A of the given side,
    K_eps the exact-log or star cutoff kernel.
    """
    if spec.family == KernelFamily.EXACT_LOG:
        profile = lambda r: float(exact_log_cutoff(spec, r, eps))
        breaks = [eps, spec.T]
    elif spec.family == KernelFamily.STAR_SCALE:
        profile = lambda r: float(star_cutoff_kernel(spec, r, eps))
        breaks = [spec.T]
    else:
        raise ParameterError("second-moment oracle covers exact-log and star kernels")
    g2 = gamma ** 2
    if spec.dimension == 1:
        points = [b for b in breaks if 0 < b < side]
        value, _ = quad(lambda r: 2.0 * (side - r) * math.exp(g2 * profile(r)), 0.0, side, points=points or None, limit=400)
        return value
    if spec.dimension == 2:
        value, _ = dblquad(
            lambda v, u: 4.0 * (side - u) * (side - v) * math.exp(g2 * profile(math.hypot(u, v))),
            0.0, side, 0.0, side, epsabs=1e-9, epsrel=1e-7,
        )
        return value
    raise ParameterError("second-moment oracle covers d = 1, 2")


def discrete_second_moment(covariance: np.ndarray, weights: np.ndarray, gamma: float) -> float:
    """sum_ij w_i w_j exp(gamma^2 C_ij): the exact second moment of a one-point-quadrature chaos."""
    w = np.asarray(weights, dtype=float).ravel()
    return float(w @ np.exp(gamma ** 2 * np.asarray(covariance)) @ w)


# ---- Exact Scale Invariance ----

@dataclass(frozen=True)
class ScaleInvarianceReport:
    lambda_: float
    q_values: Tuple[float, ...]
    ratios: Tuple[float, ...]
    ci_low: Tuple[float, ...]
    ci_high: Tuple[float, ...]
    oracle_ratio: Optional[float]
    n_replicas: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(abs(r - 1.0) <= self.tolerance for r in self.ratios)

    @property
    def max_deviation(self) -> float:
        return max(abs(r - 1.0) for r in self.ratios)

    def rows(self) -> List[Tuple]:
        return list(zip(self.q_values, self.ratios, self.ci_low, self.ci_high))


def _box_mass(measure: ChaosMeasure, corner_cells: Tuple[int, ...], side_cells: int) -> float:
    index = tuple(slice(c, c + side_cells) for c in corner_cells)
    return float(np.sum(measure.cell_masses[index]))


def scale_invariance_test(
    measures: Sequence[ChaosMeasure],
    lambda_: float,
    q_list: Sequence[float],
    box_side: float,
    kernel: Optional[KernelSpec] = None,
    corner: Optional[Sequence[float]] = None,
    tolerance: float = 0.1,
    n_boot: int = 400,
    seed: int = 0,
) -> ScaleInvarianceReport:
    """
    E[M(lambda A)^q] / (lambda^{xi(q)} E[M(A)^q]) for a cube A and its image lambda A,
    both anchored at the same corner.
    """
    if not 0.0 < lambda_ <= 1.0:
        raise ParameterError("lambda must lie in (0, 1]")
    grid = measures[0].grid
    d = grid.dimension
    gamma = measures[0].gamma
    if kernel is not None and box_side * math.sqrt(d) > kernel.T / 2.0 + 1e-12:
        raise PreconditionError("box must lie within B(corner, T/2)")
    for q in q_list:
        if gamma > 0 and q >= 2.0 * d / gamma ** 2:
            raise PreconditionError(f"q={q:g} is beyond the moment threshold")
    h = _uniform_spacing(grid)
    corner = corner if corner is not None else tuple(a / 4.0 for a in grid.extents)
    corner_cells = tuple(int(round(c / h)) for c in corner)
    big, small = int(round(box_side / h)), int(round(lambda_ * box_side / h))
    if small < 1 or any(c + big > s for c, s in zip(corner_cells, grid.shape)):
        raise PreconditionError("boxes do not fit the grid")
    big_masses = np.array([_box_mass(m, corner_cells, big) for m in measures])
    small_masses = np.array([_box_mass(m, corner_cells, small) for m in measures])
    rng = np.random.default_rng(seed)
    resample = rng.integers(0, len(measures), size=(n_boot, len(measures)))
    ratios, lows, highs = [], [], []
    for q in q_list:
        scale = lambda_ ** structure_exponent(q, gamma, d)
        ratio_fn = lambda idx: np.mean(small_masses[idx] ** q, axis=-1) / (scale * np.mean(big_masses[idx] ** q, axis=-1))
        ratios.append(float(ratio_fn(np.arange(len(measures)))))
        boot = ratio_fn(resample)
        lo, hi = np.percentile(boot, [0.5, 99.5])
        lows.append(float(lo))
        highs.append(float(hi))
    oracle = None
    if kernel is not None and kernel.family in (KernelFamily.EXACT_LOG, KernelFamily.STAR_SCALE) and d <= 2:
        eps = measures[0].cutoff
        oracle = second_moment_oracle(kernel, lambda_ * box_side, gamma, eps) / (
            lambda_ ** structure_exponent(2.0, gamma, d) * second_moment_oracle(kernel, box_side, gamma, eps)
        )
    return ScaleInvarianceReport(
        lambda_, tuple(float(q) for q in q_list), tuple(ratios), tuple(lows), tuple(highs), oracle, len(measures),
        tolerance,
    )


# ---- Star Scale Invariance ----

@dataclass(frozen=True)
class StarScaleReport:
    band_variances: Tuple[float, ...]
    expected_band_variances: Tuple[float, ...]
    band_means: Tuple[float, ...]
    band_stderr: Tuple[float, ...]
    two_scale_ks_pvalue: float
    n_replicas: int
    master_seed: int

    @property
    def passed(self) -> bool:
        variances_ok = all(abs(a - b) <= 1e-9 for a, b in zip(self.band_variances, self.expected_band_variances))
        means_ok = all(abs(m - 1.0) <= 3.0 * s + 1e-12 for m, s in zip(self.band_means, self.band_stderr))
        return variances_ok and means_ok and self.two_scale_ks_pvalue > 0.01


def star_scale_test(
    spec: KernelSpec, grid: GridDomain, eps: float, gamma: float, n_replicas: int, master_seed: int = 0
) -> StarScaleReport:
    """
    Checks the cascade structure of a star kernel: band variances at x = 0 equal ln(1/ratio),
    lognormal band weights have mean one, and chaos from bands [1, 1/eps] + [1/eps, 1/eps^2]
    matches chaos from [1, 1/eps^2] in law.
    """
    if spec.family != KernelFamily.STAR_SCALE:
        raise PreconditionError("star scale test needs a star-scale kernel")
    two_band = star_band_decomposition(spec, (eps, eps ** 2))
    one_band = star_band_decomposition(spec, (eps ** 2,))
    variances = tuple(float(two_band.level(k, 0.0)) for k in (1, 2))
    expected = (math.log(1.0 / eps), math.log(1.0 / eps))
    ladder_sampler = RefinementSampler(two_band, grid)
    direct_sampler = RefinementSampler(one_band, grid)
    band_weights = np.zeros((n_replicas, 2))
    two_scale, direct = np.zeros(n_replicas), np.zeros(n_replicas)
    for replica in range(n_replicas):
        ladder = ladder_sampler.sample_ladder(master_seed, replica)
        for k, (increment, level_var) in enumerate(zip(ladder.increments(), ladder_sampler.level_variances)):
            band_weights[replica, k] = np.mean(np.exp(gamma * increment - 0.5 * gamma ** 2 * level_var))
        two_scale[replica] = build_subcritical(ladder.finest, gamma).total_mass
        direct[replica] = build_subcritical(direct_sampler.sample_ladder(master_seed + 1, replica).finest, gamma).total_mass
    means = tuple(float(v) for v in band_weights.mean(axis=0))
    errors = tuple(float(v) for v in band_weights.std(axis=0, ddof=1) / math.sqrt(n_replicas))
    return StarScaleReport(
        variances, expected, means, errors, float(ks_2samp(two_scale, direct).pvalue), n_replicas, master_seed
    )


# ---- Kahane Comparison ----

CONVEX_FUNCTIONS: Dict[str, Tuple[Callable[[np.ndarray], np.ndarray], bool]] = {
    "square": (np.square, True),
    "exp_neg": (lambda x: np.exp(-x), True),
    "neg_exp": (lambda x: -np.exp(-x), False),
}


@dataclass(frozen=True)
class KahaneReport:
    functions: Tuple[str, ...]
    mean_a: Tuple[float, ...]
    mean_b: Tuple[float, ...]
    z_scores: Tuple[float, ...]
    ordering_holds: Tuple[bool, ...]
    exact_square: Tuple[float, float]
    square_z: Tuple[float, float]
    n_replicas: int
    master_seed: int

    @property
    def passed(self) -> bool:
        return all(self.ordering_holds) and all(abs(z) <= 3.0 for z in self.square_z)


def kahane_comparison_test(
    cov_a: np.ndarray,
    cov_b: np.ndarray,
    weights: np.ndarray,
    n_replicas: int,
    functions: Sequence[str] = ("square", "exp_neg", "neg_exp"),
    master_seed: int = 0,
    tolerance: float = 1e-9,
) -> KahaneReport:
    """
    E[F(sum p_i e^{A_i - Var A_i/2})] <= E[F(sum p_i e^{B_i - Var B_i/2})] for convex F when A <= B
    entrywise, reversed for concave F; one-sided test at 99%. F(x) = x^2 is also checked against
    the exact value sum_ij p_i p_j e^{K_ij} on both sides.
    """
    violation = float(np.max(cov_a - cov_b))
    if violation > tolerance:
        raise PreconditionError(f"kernel ordering violated by {violation:.3e}")
    p = np.asarray(weights, dtype=float).ravel()
    factor_a, _ = factor_covariance(np.asarray(cov_a, dtype=float), JitterPolicy(), label="kahane A")
    factor_b, _ = factor_covariance(np.asarray(cov_b, dtype=float), JitterPolicy(), label="kahane B")
    realized_a, realized_b = factor_a @ factor_a.T, factor_b @ factor_b.T
    var_a, var_b = np.diag(realized_a), np.diag(realized_b)
    sums_a, sums_b = np.zeros(n_replicas), np.zeros(n_replicas)
    for replica in range(n_replicas):
        za = derive_rng(master_seed, replica, 0).standard_normal(p.size)
        zb = derive_rng(master_seed, replica, 1).standard_normal(p.size)
        sums_a[replica] = p @ np.exp(factor_a @ za - var_a / 2.0)
        sums_b[replica] = p @ np.exp(factor_b @ zb - var_b / 2.0)
    means_a, means_b, zs, holds = [], [], [], []
    for name in functions:
        fn, convex = CONVEX_FUNCTIONS[name]
        fa, fb = fn(sums_a), fn(sums_b)
        diff = fb.mean() - fa.mean()
        scale = math.sqrt(fa.var(ddof=1) / n_replicas + fb.var(ddof=1) / n_replicas) or 1e-300
        z = diff / scale if convex else -diff / scale
        means_a.append(float(fa.mean()))
        means_b.append(float(fb.mean()))
        zs.append(float(z))
        holds.append(z > -ONE_SIDED_99)
    exact = (discrete_second_moment(realized_a, p, 1.0), discrete_second_moment(realized_b, p, 1.0))
    square_z = tuple(
        float((np.mean(s ** 2) - e) / (np.std(s ** 2, ddof=1) / math.sqrt(n_replicas)))
        for s, e in zip((sums_a, sums_b), exact)
    )
    return KahaneReport(
        tuple(functions), tuple(means_a), tuple(means_b), tuple(zs), tuple(holds), exact, square_z, n_replicas,
        master_seed,
    )


# ---- Cutoff Equivalence ----

@dataclass(frozen=True)
class EquivalenceReport:
    total_ks_pvalue: float
    quadrant_ks_pvalues: Tuple[float, ...]
    mean_ratios: Tuple[float, ...]
    second_moment_ratios: Tuple[float, ...]
    n_replicas: int
    master_seed: int
    tolerance: float = 0.1

    @property
    def passed(self) -> bool:
        ks_ok = self.total_ks_pvalue > 0.01 and all(p > 0.01 for p in self.quadrant_ks_pvalues)
        ratios = self.mean_ratios + self.second_moment_ratios
        return ks_ok and all(abs(r - 1.0) <= self.tolerance for r in ratios)


def construction_kernel(construction) -> Tuple:
    """Identity of the kernel a construction targets: (family, mass, extents)."""
    base = getattr(construction, "base", construction)
    domain = getattr(base, "domain", None)
    if domain is None:
        decomposition = getattr(base, "decomposition", None)
        spec = decomposition.spec if decomposition is not None else None
        return (spec.family.value if spec else type(base).__name__, 0.0, None)
    mass = domain.mass if domain.family == KernelFamily.MASSIVE_GREEN else 0.0
    return ("Green", mass, tuple(domain.domain_extents))


def _totals_and_quadrants(task) -> Tuple[float, np.ndarray]:
    construction, master_seed, replica, gamma = task
    realization = construction.sample(master_seed, replica)
    measure = build_subcritical(realization, gamma)
    return measure.total_mass, _quadrant_masses(measure)


def approximation_equivalence_test(
    construction_a,
    construction_b,
    gamma: float,
    n_replicas: int,
    master_seed: int = 0,
    workers: int = 1,
    allow_kernel_mismatch: bool = False,
    tolerance: float = 0.1,
) -> EquivalenceReport:
    """
    Compares total-mass laws (two-sample KS) and per-quadrant means and second moments of chaos
    built from two cutoff constructions of the same kernel, sampled on independent seed streams.
    """
    if construction_kernel(construction_a) != construction_kernel(construction_b) and not allow_kernel_mismatch:
        raise PreconditionError("constructions target different kernels")
    results = []
    for offset, construction in enumerate((construction_a, construction_b)):
        tasks = [(construction, master_seed + offset, replica, gamma) for replica in range(n_replicas)]
        results.append(run_replicas(_totals_and_quadrants, tasks, workers))
    totals = [np.array([r[0] for r in res]) for res in results]
    quadrants = [np.array([r[1] for r in res]) for res in results]
    quadrant_p = tuple(float(ks_2samp(quadrants[0][:, k], quadrants[1][:, k]).pvalue) for k in range(quadrants[0].shape[1]))
    mean_ratios = tuple(float(v) for v in quadrants[0].mean(axis=0) / quadrants[1].mean(axis=0))
    second = tuple(float(v) for v in (quadrants[0] ** 2).mean(axis=0) / (quadrants[1] ** 2).mean(axis=0))
    return EquivalenceReport(
        float(ks_2samp(totals[0], totals[1]).pvalue), quadrant_p, mean_ratios, second, n_replicas, master_seed, tolerance
    )


# ---- Degeneracy ----

@dataclass(frozen=True)
class DegeneracyReport:
    gammas: Tuple[float, ...]
    cutoffs: Tuple[float, ...]
    medians: np.ndarray = field(repr=False)
    degenerate: Tuple[bool, ...] = ()
    decay: Tuple[float, ...] = ()
    n_replicas: int = 0

    def spread(self, gamma_index: int) -> float:
        """max/min median across the ladder."""
        row = self.medians[gamma_index]
        return float(np.max(row) / np.min(row))

    def rows(self) -> List[Tuple[float, float, float]]:
        return [
            (g, eps, float(self.medians[i, j])) for i, g in enumerate(self.gammas) for j, eps in enumerate(self.cutoffs)
        ]


def ladder_total_masses(ladder: RefinementLadder, gamma_list: Sequence[float]) -> np.ndarray:
    """Total mass per (gamma, level) of one ladder."""
    return np.array([[build_subcritical(level, g).total_mass for level in ladder.levels] for g in gamma_list])


def summarize_degeneracy(
    totals: np.ndarray, gamma_list: Sequence[float], cutoffs: Sequence[float], decay_factor: float = 10.0
) -> DegeneracyReport:
    """
    totals has shape (replicas, gammas, levels). A gamma is flagged degenerate when its median
    total mass decays by at least decay_factor with a monotone trend.
    """
    medians = np.median(np.asarray(totals), axis=0)
    decay = tuple(float(medians[i, 0] / medians[i, -1]) for i in range(len(gamma_list)))
    monotone = [bool(np.all(np.diff(medians[i]) <= 0)) for i in range(len(gamma_list))]
    degenerate = tuple(d >= decay_factor and m for d, m in zip(decay, monotone))
    return DegeneracyReport(tuple(gamma_list), tuple(cutoffs), medians, degenerate, decay, int(np.shape(totals)[0]))


def degeneracy_scan(
    ladders: Sequence[RefinementLadder], gamma_list: Sequence[float], decay_factor: float = 10.0
) -> DegeneracyReport:
    """Median total mass per (gamma, eps) along an ensemble of ladders."""
    totals = np.stack([ladder_total_masses(ladder, gamma_list) for ladder in ladders])
    return summarize_degeneracy(totals, gamma_list, ladders[0].cutoffs, decay_factor)


# ---- Maxima ----

@dataclass(frozen=True)
class MaxReport:
    cutoffs: Tuple[float, ...]
    variance_constants: Tuple[float, ...]
    mean_first_order: Tuple[float, ...]
    recentered_medians: Tuple[float, ...]
    inter_level_ks: Tuple[float, ...]
    dimension: int
    n_replicas: int

    @property
    def first_order_target(self) -> float:
        return math.sqrt(2 * self.dimension)

    @property
    def first_order_ok(self) -> bool:
        return 0.9 * self.first_order_target <= self.mean_first_order[-1] <= 1.1 * self.first_order_target

    @property
    def tightness_drift(self) -> float:
        if len(self.recentered_medians) < 2:
            return 0.0
        return abs(self.recentered_medians[-1] - self.recentered_medians[-2])

    @property
    def passed(self) -> bool:
        return self.first_order_ok and self.tightness_drift < 0.5

    def rows(self) -> List[Tuple]:
        ks = (float("nan"),) + self.inter_level_ks
        return list(zip(self.cutoffs, self.variance_constants, self.mean_first_order, self.recentered_medians, ks))


def recentered_max(sup: np.ndarray, c_n: float, d: int) -> np.ndarray:
    """sup X_n - sqrt(2d) c_n + 3/(2 sqrt(2d)) ln c_n."""
    root = math.sqrt(2 * d)
    return sup - root * c_n + 3.0 / (2.0 * root) * math.log(c_n)


def ladder_maxima(ladder: RefinementLadder) -> Tuple[np.ndarray, np.ndarray, Tuple[float, ...]]:
    """(sup X_n, mean variance c_n, cutoff) for every finite level of one ladder."""
    levels = [lv for lv in ladder.levels if math.isfinite(lv.cutoff) and lv.variance is not None]
    sups = np.array([float(np.max(lv.values)) for lv in levels])
    constants = np.array([float(np.mean(lv.variance)) for lv in levels])
    return sups, constants, tuple(lv.cutoff for lv in levels)


def summarize_maxima(
    sups: np.ndarray, constants: np.ndarray, cutoffs: Sequence[float], dimension: int
) -> MaxReport:
    """sups has shape (replicas, levels); constants holds c_n per level."""
    sups = np.asarray(sups, dtype=float)
    first, medians, samples = [], [], []
    for k, c_n in enumerate(constants):
        column = sups[:, k]
        recentered = recentered_max(column, c_n, dimension) if c_n > 0 else column
        first.append(float(np.mean(column / c_n)) if c_n > 0 else float("nan"))
        medians.append(float(np.median(recentered)))
        samples.append(recentered)
    ks = tuple(float(ks_2samp(a, b).statistic) for a, b in zip(samples, samples[1:]))
    return MaxReport(
        tuple(cutoffs), tuple(float(c) for c in constants), tuple(first), tuple(medians), ks, dimension, sups.shape[0]
    )


def max_field_statistics(ladders: Sequence[RefinementLadder]) -> MaxReport:
    """Per-level maxima: first-order ratio sup/c_n and the recentered maximum with inter-level KS distances."""
    per_ladder = [ladder_maxima(ladder) for ladder in ladders]
    sups = np.stack([p[0] for p in per_ladder])
    return summarize_maxima(sups, per_ladder[0][1], per_ladder[0][2], ladders[0].finest.grid.dimension)


# ---- Beta Energy ----

@dataclass(frozen=True)
class BetaEnergy:
    beta: float
    off_diagonal: float
    diagonal: float

    @property
    def total(self) -> float:
        return self.off_diagonal + self.diagonal


def _cell_self_energy(beta: float, h: float, d: int) -> float:
    """(1/h^{2d}) int int_{cell x cell} |x - y|^{-beta} dx dy."""
    if d == 1:
        return 2.0 / ((1.0 - beta) * (2.0 - beta)) * h ** (-beta)
    if d == 2:
        value, _ = dblquad(
            lambda v, u: 4.0 * (1.0 - u) * (1.0 - v) * (math.hypot(u, v) ** (-beta) if (u or v) else 0.0),
            0.0, 1.0, 0.0, 1.0, epsabs=1e-10,
        )
        return value * h ** (-beta)
    raise ParameterError("beta energy covers d = 1, 2")


def beta_energy(measure: ChaosMeasure, beta: float) -> BetaEnergy:
    """
    Riemann double sum of |x - y|^{-beta} M(dx) M(dy) over distinct cells; the resolution-limited
    diagonal is estimated separately from the uniform-cell self energy.
    """
    if beta < 0:
        raise ParameterError("beta must be nonnegative")
    d = measure.grid.dimension
    if beta >= d:
        raise ParameterError("cell self energy diverges for beta >= d")
    h = _uniform_spacing(measure.grid)
    masses = np.asarray(measure.cell_masses, dtype=float)
    axes = [np.arange(-(s - 1), s) * h for s in masses.shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    radius = np.sqrt(sum(a ** 2 for a in mesh))
    with np.errstate(divide="ignore"):
        kernel = np.where(radius > 0, radius ** (-beta), 0.0)
    potential = fftconvolve(masses, kernel, mode="same")
    off = float(np.sum(masses * potential))
    diagonal = float(np.sum(masses ** 2)) * _cell_self_energy(beta, h, d)
    return BetaEnergy(beta, off, diagonal)
