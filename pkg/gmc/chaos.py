# --- Multiplicative chaos measures ---
# Description: subcritical, critical (derivative / Seneta-Heyde), frozen and
#              atomic chaos on grids, discrete Liouville measures on the square
#              lattice, the Hopf-Cole Burgers functional, rooted sampling and
#              the multifractal random walk.
# -----------------------------------------------------------------

import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import quad
from scipy.ndimage import map_coordinates
from scipy.signal import fftconvolve
from scipy.special import logsumexp

from gmc.errors import ParameterError, PreconditionError
from gmc.fields import FieldRealization, Geometry, GridDomain
from gmc.kernels import SquareLattice

logger = logging.getLogger(__name__)

DEFICIT_TARGET = 1e-3
MAX_EXPECTED_ATOMS = 2_000_000
SUBCELL_TOLERANCE = 0.01


class Regime(str, Enum):
    SUBCRITICAL = "Subcritical"
    CRITICAL_DERIVATIVE = "CriticalDerivative"
    CRITICAL_SENETA_HEYDE = "CriticalSenetaHeyde"
    VANISHING = "Vanishing"
    FROZEN_RENORMALIZED = "FrozenRenormalized"


def _read_only(array) -> np.ndarray:
    copy = np.array(array, dtype=float)
    copy.setflags(write=False)
    return copy


@dataclass(frozen=True)
class ChaosMeasure:
    """Per-cell masses of a chaos measure on a grid."""

    grid: Geometry
    gamma: float
    regime: Regime
    cell_masses: np.ndarray = field(repr=False)
    cutoff: float
    weights: np.ndarray = field(repr=False)
    source: Optional[FieldRealization] = field(default=None, repr=False)

    def __post_init__(self):
        masses = _read_only(self.cell_masses)
        if not np.all(np.isfinite(masses)):
            raise PreconditionError("chaos masses must be finite")
        object.__setattr__(self, "cell_masses", masses)
        object.__setattr__(self, "weights", _read_only(self.weights))

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.cell_masses))

    @property
    def negative_fraction(self) -> float:
        """Share of the absolute mass carried by negative cells."""
        absolute = float(np.sum(np.abs(self.cell_masses)))
        if absolute == 0.0:
            return 0.0
        return float(-np.sum(self.cell_masses[self.cell_masses < 0])) / absolute

    @property
    def negative_cells(self) -> int:
        return int(np.count_nonzero(self.cell_masses < 0))


@dataclass(frozen=True)
class AtomicMeasure:
    """Atoms (cell, location, weight) from a truncated alpha-stable scatter."""

    grid: Geometry
    cell_index: np.ndarray = field(repr=False)
    locations: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    alpha: float
    z_min: float
    provenance: str
    base_mass: float
    deficit_bound: float
    gamma_bar: Optional[float] = None

    @property
    def n_atoms(self) -> int:
        return int(self.weights.size)

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.weights))

    def cell_masses(self) -> np.ndarray:
        n_cells = int(np.prod(self.grid.shape))
        return np.bincount(self.cell_index, weights=self.weights, minlength=n_cells).reshape(self.grid.shape)


# ---- Geometry Helpers ----

def _spacings(grid: Geometry) -> np.ndarray:
    if isinstance(grid, SquareLattice):
        return np.array([grid.spacing, grid.spacing])
    return np.asarray(grid.spacings)


def _cell_lower_corners(grid: Geometry) -> np.ndarray:
    return grid.points() - _spacings(grid) / 2.0


def _require_variance(field_: FieldRealization) -> np.ndarray:
    if field_.variance is None:
        raise PreconditionError("field carries no variance profile")
    return field_.variance


def _reject_circle_average(field_: FieldRealization) -> None:
    if field_.construction.startswith("circle-average"):
        raise PreconditionError(
            "critical constructions accept star-scale or white-noise cutoffs only, not circle averages"
        )


def _log_inverse_cutoff(cutoff: float) -> float:
    if not 0.0 < cutoff < 1.0:
        raise PreconditionError(f"Seneta-Heyde norming needs a cutoff in (0, 1), got {cutoff}")
    return math.log(1.0 / cutoff)


# ---- Subcritical and Critical Measures ----

def build_subcritical(field: FieldRealization, gamma: float, weights: Optional[np.ndarray] = None) -> ChaosMeasure:
    """Cell mass = w exp(gamma X - gamma^2/2 Var); tagged Vanishing when gamma^2 >= 2d."""
    if gamma < 0:
        raise ParameterError("gamma must be nonnegative")
    variance = _require_variance(field)
    cell_weights = field.grid.cell_volumes() if weights is None else np.asarray(weights, dtype=float)
    masses = cell_weights * np.exp(gamma * field.values - 0.5 * gamma ** 2 * variance)
    d = field.grid.dimension
    regime = Regime.SUBCRITICAL
    if gamma ** 2 >= 2 * d:
        regime = Regime.VANISHING
        logger.warning(f"gamma={gamma:g} is not subcritical in d={d}; measure tagged Vanishing")
    if weights is None and logger.isEnabledFor(logging.DEBUG) and isinstance(field.grid, GridDomain):
        check = subcell_quadrature_check(field, gamma)
        log = logger.debug if check.passed else logger.warning
        log(f"Sub-cell quadrature at gamma={gamma:g}: relative difference {check.relative_difference:.2e}")
    return ChaosMeasure(
        grid=field.grid, gamma=gamma, regime=regime, cell_masses=masses, cutoff=field.cutoff,
        weights=cell_weights, source=field,
    )


def build_derivative(field: FieldRealization) -> ChaosMeasure:
    """Derivative martingale at gamma = sqrt(2d): w (gamma Var - X) exp(gamma X - d Var)."""
    _reject_circle_average(field)
    variance = _require_variance(field)
    d = field.grid.dimension
    gamma = math.sqrt(2 * d)
    cell_weights = field.grid.cell_volumes()
    masses = cell_weights * (gamma * variance - field.values) * np.exp(gamma * field.values - d * variance)
    measure = ChaosMeasure(
        grid=field.grid, gamma=gamma, regime=Regime.CRITICAL_DERIVATIVE, cell_masses=masses,
        cutoff=field.cutoff, weights=cell_weights, source=field,
    )
    if measure.negative_cells:
        logger.debug(f"Derivative martingale has {measure.negative_cells} negative cells at eps={field.cutoff:g}")
    return measure


def build_seneta_heyde(field: FieldRealization) -> ChaosMeasure:
    """sqrt(ln 1/eps) times the gamma = sqrt(2d) martingale."""
    _reject_circle_average(field)
    variance = _require_variance(field)
    d = field.grid.dimension
    gamma = math.sqrt(2 * d)
    cell_weights = field.grid.cell_volumes()
    norming = math.sqrt(_log_inverse_cutoff(field.cutoff))
    masses = norming * cell_weights * np.exp(gamma * field.values - d * variance)
    return ChaosMeasure(
        grid=field.grid, gamma=gamma, regime=Regime.CRITICAL_SENETA_HEYDE, cell_masses=masses,
        cutoff=field.cutoff, weights=cell_weights, source=field,
    )


def build_frozen_renormalized(field: FieldRealization, gamma: float) -> ChaosMeasure:
    """
    Supercritical measure renormalized by c^{3 gamma/(2 sqrt(2d))} exp(c (gamma/sqrt 2 - sqrt d)^2),
    c the mean field variance. No limit is asserted for this sequence.
    """
    d = field.grid.dimension
    if gamma ** 2 <= 2 * d:
        raise ParameterError(f"frozen renormalization needs gamma^2 > 2d, got gamma={gamma:g}")
    variance = _require_variance(field)
    weights = field.grid.cell_volumes()
    c_n = float(np.average(variance, weights=weights))
    log_factor = 3.0 * gamma / (2.0 * math.sqrt(2 * d)) * math.log(c_n) + c_n * (gamma / math.sqrt(2) - math.sqrt(d)) ** 2
    masses = weights * np.exp(gamma * field.values - 0.5 * gamma ** 2 * variance + log_factor)
    return ChaosMeasure(
        grid=field.grid, gamma=gamma, regime=Regime.FROZEN_RENORMALIZED, cell_masses=masses,
        cutoff=field.cutoff, weights=weights, source=field,
    )


# ---- Sub-cell Quadrature Check ----

@dataclass(frozen=True)
class SubcellCheck:
    one_point_mass: float
    sub_cell_mass: float
    tolerance: float

    @property
    def relative_difference(self) -> float:
        return abs(self.sub_cell_mass - self.one_point_mass) / self.one_point_mass

    @property
    def passed(self) -> bool:
        return self.relative_difference <= self.tolerance


def _sub_cell_offsets(dimension: int) -> np.ndarray:
    """Offsets, in cell units, of four points per cell: 4 along the line, 2 x 2 in the plane."""
    per_axis = 4 if dimension == 1 else 2
    return (np.arange(per_axis) + 0.5) / per_axis - 0.5


def subcell_quadrature_check(field: FieldRealization, gamma: float, tolerance: float = SUBCELL_TOLERANCE) -> SubcellCheck:
    """
    Total subcritical mass with one point per cell against sub-cell points, where X and Var are
    interpolated linearly between neighbouring cell centres.
    """
    if not isinstance(field.grid, GridDomain):
        raise PreconditionError("sub-cell check needs a cell-centred grid")
    values = np.asarray(field.values, dtype=float)
    variance = np.broadcast_to(np.asarray(_require_variance(field), dtype=float), values.shape)
    weights = field.grid.cell_volumes()
    one_point = float(np.sum(weights * np.exp(gamma * values - 0.5 * gamma ** 2 * variance)))

    d = values.ndim
    offsets = _sub_cell_offsets(d)
    centres = np.indices(values.shape, dtype=float).reshape(d, -1)
    total = 0.0
    for shift in itertools.product(offsets, repeat=d):
        coords = centres + np.asarray(shift)[:, None]
        x = map_coordinates(values, coords, order=1, mode="nearest")
        v = map_coordinates(np.ascontiguousarray(variance), coords, order=1, mode="nearest")
        total += float(np.sum(weights.ravel() * np.exp(gamma * x - 0.5 * gamma ** 2 * v)))
    sub_cell = total / offsets.size ** d
    return SubcellCheck(one_point, sub_cell, tolerance)


# ---- Atomic Measures ----

def default_z_min(alpha: float, base_mass: float, max_atoms: int = MAX_EXPECTED_ATOMS) -> float:
    """
    Threshold with deficit bound base_mass z^{1-alpha}/(1-alpha) <= 1e-3 base_mass,
    raised when needed so the expected atom count base_mass z^{-alpha}/alpha stays below max_atoms.
    """
    target = (DEFICIT_TARGET * (1.0 - alpha)) ** (1.0 / (1.0 - alpha))
    if base_mass <= 0:
        return target
    count_floor = (alpha * max_atoms / base_mass) ** (-1.0 / alpha)
    return max(target, count_floor)


def truncation_deficit(base_mass: float, alpha: float, z_min: float) -> float:
    """Expected mass of the discarded atoms below z_min."""
    return base_mass * z_min ** (1.0 - alpha) / (1.0 - alpha)


def truncated_laplace_exponent(q: float, alpha: float, z_min: float) -> float:
    """int_{z_min}^inf (1 - e^{-qz}) z^{-1-alpha} dz; the conditional exponent per unit of base mass."""
    _check_alpha(alpha)
    if q < 0 or z_min <= 0:
        raise ParameterError("Laplace exponent needs q >= 0 and z_min > 0")
    head, _ = quad(lambda z: -math.expm1(-q * z) * z ** (-1.0 - alpha), z_min, 1.0, limit=200)
    tail, _ = quad(lambda z: -math.expm1(-q * z) * z ** (-1.0 - alpha), 1.0, math.inf, limit=200)
    return head + tail


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")


def sample_stable_scatter(
    grid: Geometry, cell_masses: np.ndarray, alpha: float, z_min: float, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Poisson atoms of intensity m_i z^{-1-alpha} dz above z_min per cell: counts Poisson(m_i z_min^{-alpha}/alpha),
    weights z_min U^{-1/alpha}, locations uniform in the cell. Returns (cell_index, locations, weights).
    """
    _check_alpha(alpha)
    if z_min <= 0:
        raise ParameterError("z_min must be positive")
    masses = np.asarray(cell_masses, dtype=float).ravel()
    counts = rng.poisson(masses * z_min ** (-alpha) / alpha)
    cell_index = np.repeat(np.arange(masses.size), counts)
    n_atoms = cell_index.size
    weights = z_min * (1.0 - rng.random(n_atoms)) ** (-1.0 / alpha)
    corners = _cell_lower_corners(grid)[cell_index]
    locations = corners + rng.random((n_atoms, grid.dimension)) * _spacings(grid)
    return cell_index, locations, weights


def build_atomic_subordinated(
    base: ChaosMeasure, alpha: float, z_min: Optional[float] = None, rng: Optional[np.random.Generator] = None
) -> AtomicMeasure:
    """Throws a truncated stable point process over the landscape of a base measure."""
    _check_alpha(alpha)
    if rng is None:
        raise ParameterError("atomic sampling needs a random generator")
    masses = np.asarray(base.cell_masses)
    if np.any(masses < 0):
        logger.warning(f"Clipping {int(np.count_nonzero(masses < 0))} negative base cells to zero")
        masses = np.maximum(masses, 0.0)
    base_mass = float(masses.sum())
    z_min = default_z_min(alpha, base_mass) if z_min is None else z_min
    deficit = truncation_deficit(base_mass, alpha, z_min)
    if base_mass > 0 and deficit > DEFICIT_TARGET * base_mass * (1.0 + 1e-9):
        logger.warning(f"Truncation deficit {deficit:.3e} exceeds target for base mass {base_mass:.3e}")
    cell_index, locations, weights = sample_stable_scatter(base.grid, masses, alpha, z_min, rng)
    return AtomicMeasure(
        grid=base.grid, cell_index=cell_index, locations=locations, weights=weights, alpha=alpha, z_min=z_min,
        provenance=f"subordinated({base.regime.value}, gamma={base.gamma:g})", base_mass=base_mass,
        deficit_bound=deficit,
    )


def build_atomic_direct(
    field: FieldRealization,
    gamma_bar: float,
    alpha: float,
    rng: Optional[np.random.Generator] = None,
    z_min: Optional[float] = None,
    scatter: Optional[AtomicMeasure] = None,
) -> AtomicMeasure:
    """
    e^{gamma_bar X - alpha gamma_bar^2 Var/2} n_alpha(dx) with n_alpha sampled once on the grid
    (or reused through `scatter`). gamma_bar = 0 gives the bare stable scatter.
    Works on GridDomain and SquareLattice fields alike.
    """
    _check_alpha(alpha)
    d = field.grid.dimension
    if gamma_bar != 0.0 and gamma_bar ** 2 <= 2 * d:
        raise ParameterError(f"direct atomic chaos needs gamma_bar^2 > 2d, got gamma_bar={gamma_bar:g}")
    variance = _require_variance(field)
    exponent = gamma_bar * field.values.ravel() - 0.5 * alpha * gamma_bar ** 2 * variance.ravel()
    landscape = np.exp(exponent)
    volumes = np.asarray(field.grid.cell_volumes(), dtype=float).ravel()
    if scatter is None:
        if rng is None:
            raise ParameterError("atomic sampling needs a random generator or a scatter")
        base_mass = float(volumes.sum())
        z_min = weighted_z_min(alpha, volumes, landscape) if z_min is None else z_min
        cell_index, locations, weights = sample_stable_scatter(field.grid, volumes, alpha, z_min, rng)
    else:
        if scatter.alpha != alpha:
            raise ParameterError("reused scatter has a different alpha")
        cell_index, locations, weights = scatter.cell_index, scatter.locations, scatter.weights
        base_mass, z_min = scatter.base_mass, scatter.z_min
    deficit = float(volumes @ landscape) * z_min ** (1.0 - alpha) / (1.0 - alpha)
    return AtomicMeasure(
        grid=field.grid, cell_index=cell_index, locations=locations, weights=weights * landscape[cell_index],
        alpha=alpha, z_min=z_min, provenance=f"direct({field.construction})", base_mass=base_mass,
        deficit_bound=deficit, gamma_bar=gamma_bar,
    )


def weighted_z_min(
    alpha: float, volumes: np.ndarray, landscape: np.ndarray, max_atoms: int = MAX_EXPECTED_ATOMS
) -> float:
    """
    Threshold on the raw stable atoms of the direct route: the realized deficit
    sum w_i f_i z^{1-alpha}/(1-alpha) stays below 1e-3 of sum w_i f_i^alpha, the
    mass of the matching subordinated landscape; floored by the atom budget.
    """
    weighted = float(volumes @ landscape)
    matched = float(volumes @ landscape ** alpha)
    if weighted <= 0 or matched <= 0:
        return default_z_min(alpha, float(volumes.sum()), max_atoms)
    target = (DEFICIT_TARGET * (1.0 - alpha) * matched / weighted) ** (1.0 / (1.0 - alpha))
    count_floor = (alpha * max_atoms / float(volumes.sum())) ** (-1.0 / alpha)
    return max(target, count_floor)


def dual_parameters(gamma: float, dimension: int) -> Tuple[float, float]:
    """(gamma_bar, alpha) = (2d/gamma, gamma^2/(2d)); alpha gamma_bar^2 = 2d and alpha gamma_bar = gamma."""
    if not 0.0 < gamma ** 2 < 2 * dimension:
        raise ParameterError("dual parameters need a subcritical gamma > 0")
    return 2.0 * dimension / gamma, gamma ** 2 / (2.0 * dimension)


# ---- Discrete Liouville Measure ----

def build_discrete_liouville(dgff: FieldRealization, gamma: float, critical: bool = False) -> ChaosMeasure:
    """Vertex masses h^2 exp(gamma X - gamma^2/2 Var); the critical flag forces gamma = 2 with sqrt(ln 1/eps_n)."""
    if not isinstance(dgff.grid, SquareLattice):
        raise PreconditionError("discrete Liouville measure needs a square-lattice field")
    if gamma < 0:
        raise ParameterError("gamma must be nonnegative")
    if critical and gamma != 2.0:
        logger.warning(f"Critical flag forces gamma=2 (got {gamma:g})")
        gamma = 2.0
    variance = _require_variance(dgff)
    weights = dgff.grid.cell_volumes()
    masses = weights * np.exp(gamma * dgff.values - 0.5 * gamma ** 2 * variance)
    regime = Regime.SUBCRITICAL
    if critical:
        masses = masses * math.sqrt(_log_inverse_cutoff(dgff.grid.spacing))
        regime = Regime.CRITICAL_SENETA_HEYDE
    elif gamma >= 2.0:
        regime = Regime.VANISHING
        logger.warning(f"gamma={gamma:g} without the critical flag; measure tagged Vanishing")
    return ChaosMeasure(
        grid=dgff.grid, gamma=gamma, regime=regime, cell_masses=masses, cutoff=dgff.grid.spacing,
        weights=weights, source=dgff,
    )


# ---- Hopf-Cole Burgers Functional ----

def _log_partition(y: np.ndarray, h: float, potential: np.ndarray, nu: float, t: float, x: np.ndarray) -> np.ndarray:
    exponents = -((y[None, :] - x[:, None]) ** 2) / (4.0 * nu * t) - potential[None, :] / (2.0 * nu)
    return logsumexp(exponents, axis=1) + math.log(h) - 0.5 * math.log(4.0 * math.pi * nu * t)


def hopf_cole_burgers(
    potential_field: FieldRealization, nu: float, t: float, x_eval: Sequence[float]
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Z(t, x) = int exp(-|y - x|^2/(4 nu t) - V(y)/(2 nu)) dy / sqrt(4 pi nu t) by a Riemann sum over the grid,
    and the velocity v = -2 nu d/dx ln Z by centred differences. Returns (Z, v).
    """
    if nu <= 0 or t <= 0:
        raise ParameterError("Hopf-Cole needs nu > 0 and t > 0")
    grid = potential_field.grid
    if grid is None or grid.dimension != 1:
        raise PreconditionError("Hopf-Cole functional is defined for one-dimensional potentials")
    y = grid.points()[:, 0]
    h = float(grid.spacing)
    x = np.asarray(x_eval, dtype=float)
    potential = potential_field.values.ravel()
    log_z = _log_partition(y, h, potential, nu, t, x)
    step = h / 2.0
    slope = (_log_partition(y, h, potential, nu, t, x + step) - _log_partition(y, h, potential, nu, t, x - step)) / (
        2.0 * step
    )
    return np.exp(log_z), -2.0 * nu * slope


# ---- Rooted Sampling and Ball Masses ----

class RootedPoint(NamedTuple):
    cell: Tuple[int, ...]
    point: np.ndarray


def sample_rooted_point(measure: ChaosMeasure, rng: np.random.Generator) -> RootedPoint:
    """Cell drawn proportionally to its mass, then a uniform point inside it."""
    masses = np.asarray(measure.cell_masses).ravel()
    if np.any(masses < 0):
        raise PreconditionError("rooted sampling needs a nonnegative measure")
    total = masses.sum()
    if total <= 0:
        raise PreconditionError("rooted sampling needs positive total mass")
    flat = int(rng.choice(masses.size, p=masses / total))
    corner = _cell_lower_corners(measure.grid)[flat]
    point = corner + rng.random(measure.grid.dimension) * _spacings(measure.grid)
    return RootedPoint(cell=tuple(int(i) for i in np.unravel_index(flat, measure.grid.shape)), point=point)


def ball_mass_field(masses: np.ndarray, spacing: float, radius: float) -> np.ndarray:
    """M(B(z, r)) at every cell centre z, counting cells whose centre lies within r."""
    masses = np.asarray(masses, dtype=float)
    reach = int(math.floor(radius / spacing + 1e-9))
    offsets = np.arange(-reach, reach + 1) * spacing
    mesh = np.meshgrid(*([offsets] * masses.ndim), indexing="ij")
    disk = (sum(axis ** 2 for axis in mesh) <= radius ** 2 * (1.0 + 1e-12)).astype(float)
    out = fftconvolve(masses, disk, mode="same")
    if np.all(masses >= 0):
        out = np.maximum(out, 0.0)
    return out


# ---- Multifractal Random Walk ----

def multifractal_random_walk(measure: ChaosMeasure, rng: np.random.Generator) -> np.ndarray:
    """B(M[0, t]) at the right edge of every cell of a one-dimensional measure."""
    if measure.grid.dimension != 1:
        raise PreconditionError("multifractal random walk needs a one-dimensional measure")
    masses = np.asarray(measure.cell_masses).ravel()
    if np.any(masses < 0):
        raise PreconditionError("multifractal random walk needs a nonnegative measure")
    return np.cumsum(np.sqrt(masses) * rng.standard_normal(masses.size))


# ---- Records ----

def measure_record(measure, replica: int) -> Dict[str, Any]:
    """One NDJSON line describing a measure."""
    if isinstance(measure, AtomicMeasure):
        return {
            "replica": replica, "regime": "Atomic", "gamma": measure.gamma_bar, "alpha": measure.alpha,
            "eps": None, "total_mass": measure.total_mass, "atoms": measure.n_atoms,
        }
    record = {
        "replica": replica, "regime": measure.regime.value, "gamma": measure.gamma, "eps": measure.cutoff,
        "total_mass": measure.total_mass,
    }
    if measure.regime == Regime.CRITICAL_DERIVATIVE:
        record["negative_fraction"] = measure.negative_fraction
    return record


def cell_rows(measure: ChaosMeasure) -> List[List[float]]:
    """Rows (index, centre coordinates..., mass) for the per-cell CSV."""
    centres = measure.grid.points()
    masses = np.asarray(measure.cell_masses).ravel()
    return [[i, *centres[i].tolist(), float(masses[i])] for i in range(masses.size)]
