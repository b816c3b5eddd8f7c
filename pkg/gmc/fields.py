# --- Cutoff Gaussian fields on grids ---
# Description: grid geometry, dense Cholesky sampling, sigma-positive refinement
#              ladders, modal GFF samplers (white-noise bands and eigen route),
#              circle averages, the discrete GFF, smoothness diagnostics and the
#              GMCF binary field dump.
# -----------------------------------------------------------------

import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.optimize import brentq
from scipy.stats import linregress

from gmc.errors import GridSizeError, ParameterError, PreconditionError
from gmc.kernels import (
    DENSE_CAP,
    GREEN_FAMILIES,
    CovarianceMatrix,
    JitterPolicy,
    KernelFamily,
    KernelSpec,
    SigmaPositiveDecomposition,
    SquareLattice,
    _sine_basis,
    assemble_covariance_matrix,
    dgff_green_matrix,
    factor_covariance,
    green_mode_weights,
)
from gmc.utils import derive_rng

logger = logging.getLogger(__name__)

REFINEMENT_CAP = 2 ** 20
CIRCLE_ANGLES = 64
GMCF_MAGIC = b"GMCF"
GMCF_VERSION = 1


# ---- Grid Geometry ----

@dataclass(frozen=True)
class GridDomain:
    """Cell-centred grid on [0, a_1] x ... x [0, a_d] with n cells per axis."""

    extents: Tuple[float, ...]
    points_per_axis: int

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(float(a) for a in self.extents))
        n = self.points_per_axis
        if n < 1 or n & (n - 1):
            raise GridSizeError(f"points_per_axis must be a power of two, got {n}")
        if any(a <= 0 for a in self.extents):
            raise GridSizeError("grid extents must be positive")
        if self.n_points > REFINEMENT_CAP:
            raise GridSizeError(f"grid of {self.n_points} points exceeds the cap {REFINEMENT_CAP}")

    @classmethod
    def unit(cls, dimension: int, points_per_axis: int) -> "GridDomain":
        return cls(extents=(1.0,) * dimension, points_per_axis=points_per_axis)

    @property
    def dimension(self) -> int:
        return len(self.extents)

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.points_per_axis,) * self.dimension

    @property
    def n_points(self) -> int:
        return self.points_per_axis ** self.dimension

    @property
    def spacings(self) -> Tuple[float, ...]:
        return tuple(a / self.points_per_axis for a in self.extents)

    @property
    def spacing(self) -> float:
        return max(self.spacings)

    def axis_coordinates(self, axis: int) -> np.ndarray:
        return (np.arange(self.points_per_axis) + 0.5) * self.spacings[axis]

    def points(self) -> np.ndarray:
        axes = np.meshgrid(*[self.axis_coordinates(i) for i in range(self.dimension)], indexing="ij")
        return np.stack([a.ravel() for a in axes], axis=1)

    def cell_volumes(self) -> np.ndarray:
        return np.full(self.shape, float(np.prod(self.spacings)))

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))


Geometry = Union[GridDomain, SquareLattice]


@dataclass(frozen=True)
class CutoffLadder:
    """Decreasing cutoffs eps_0 > eps_1 > ... > eps_K, dyadic by default."""

    cutoffs: Tuple[float, ...]

    def __post_init__(self):
        ladder = tuple(float(c) for c in self.cutoffs)
        if not ladder:
            raise ParameterError("cutoff ladder is empty")
        if any(c <= 0 for c in ladder) or any(b >= a for a, b in zip(ladder, ladder[1:])):
            raise ParameterError("cutoffs must be positive and strictly decreasing")
        object.__setattr__(self, "cutoffs", ladder)

    @classmethod
    def dyadic(cls, coarsest: float, n_levels: int, ratio: float = 0.5) -> "CutoffLadder":
        return cls(tuple(coarsest * ratio ** k for k in range(n_levels)))

    @property
    def finest(self) -> float:
        return self.cutoffs[-1]

    def __len__(self) -> int:
        return len(self.cutoffs)

    def check_grid(self, grid: Geometry) -> None:
        if self.finest < 2.0 * grid.spacing - 1e-12:
            raise GridSizeError(f"finest cutoff {self.finest:g} is below twice the grid spacing {grid.spacing:g}")

    def variance_constants(self, decomposition: SigmaPositiveDecomposition) -> np.ndarray:
        """c_k = E[X_{eps_k}^2] for a stationary decomposition."""
        return np.array([float(decomposition.cumulative(0.0, eps)) for eps in self.cutoffs])


# ---- Field Realizations ----

def _read_only(array) -> np.ndarray:
    copy = np.array(array, dtype=float)
    copy.setflags(write=False)
    return copy


@dataclass(frozen=True)
class FieldRealization:
    grid: Optional[Geometry]
    values: np.ndarray = field(repr=False)
    cutoff: float
    variance: Optional[np.ndarray] = field(default=None, repr=False)
    variance_kind: str = "analytic"
    construction: str = "dense"
    level: int = 0
    lineage: Optional[Tuple[int, int, int]] = None

    def __post_init__(self):
        values = _read_only(self.values)
        if not np.all(np.isfinite(values)):
            raise PreconditionError("field values must be finite")
        object.__setattr__(self, "values", values)
        if self.variance is not None:
            variance = _read_only(np.broadcast_to(self.variance, values.shape))
            object.__setattr__(self, "variance", variance)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape


@dataclass(frozen=True)
class RefinementLadder:
    """X_{eps_0}, ..., X_{eps_K} of one replica."""

    levels: Tuple[FieldRealization, ...]
    independent_increments: bool = True

    @property
    def finest(self) -> FieldRealization:
        return self.levels[-1]

    @property
    def cutoffs(self) -> Tuple[float, ...]:
        return tuple(level.cutoff for level in self.levels)

    def increments(self) -> List[np.ndarray]:
        """Y_k = X_{eps_k} - X_{eps_{k-1}}, with Y_0 = X_{eps_0}."""
        previous = np.zeros(self.levels[0].shape)
        out = []
        for level in self.levels:
            out.append(level.values - previous)
            previous = level.values
        return out


# ---- Dense Sampling ----

def sample_gaussian_on_grid(
    cov: CovarianceMatrix,
    rng: np.random.Generator,
    grid: Optional[Geometry] = None,
    cutoff: float = float("nan"),
    construction: str = "dense",
) -> FieldRealization:
    """L z for the Cholesky factor L of cov and i.i.d. standard normals z."""
    values = cov.factor @ rng.standard_normal(cov.size)
    if grid is not None:
        values = values.reshape(grid.shape)
        variance = cov.diagonal.reshape(grid.shape)
    else:
        variance = cov.diagonal
    return FieldRealization(grid=grid, values=values, cutoff=cutoff, variance=variance, construction=construction)


@dataclass(frozen=True)
class DenseFieldSampler:
    """Caches the Cholesky factor of one covariance so an ensemble factors once."""

    grid: GridDomain
    covariance: CovarianceMatrix = field(repr=False)
    cutoff: float
    construction: str = "dense"

    @classmethod
    def from_kernel(
        cls, kernel, grid: GridDomain, cutoff: float, construction: str = "dense",
        jitter_policy: JitterPolicy = JitterPolicy(),
    ) -> "DenseFieldSampler":
        if grid.n_points > DENSE_CAP:
            raise GridSizeError(
                f"dense sampling limited to {DENSE_CAP} points, got {grid.n_points}; "
                "use the white-noise or spectral route"
            )
        cov = assemble_covariance_matrix(kernel, grid.points(), jitter_policy, label=f"{construction} eps={cutoff:g}")
        return cls(grid=grid, covariance=cov, cutoff=cutoff, construction=construction)

    @property
    def cutoffs(self) -> Tuple[float, ...]:
        return (self.cutoff,)

    @property
    def independent_increments(self) -> bool:
        return False

    def sample(self, master_seed: int, replica: int, level: int = 0) -> FieldRealization:
        realization = sample_gaussian_on_grid(
            self.covariance, derive_rng(master_seed, replica, level), self.grid, self.cutoff, self.construction
        )
        return _with_lineage(realization, (master_seed, replica, level), level)

    def sample_ladder(self, master_seed: int, replica: int) -> RefinementLadder:
        return RefinementLadder(levels=(self.sample(master_seed, replica),), independent_increments=False)


def _with_lineage(realization: FieldRealization, lineage, level: int) -> FieldRealization:
    return FieldRealization(
        grid=realization.grid, values=realization.values, cutoff=realization.cutoff,
        variance=realization.variance, variance_kind=realization.variance_kind,
        construction=realization.construction, level=level, lineage=tuple(int(v) for v in lineage),
    )


# ---- Sigma-Positive Refinement ----

class RefinementSampler:
    """
    Samples X_n = Y_1 + ... + Y_n with independent Y_k of covariance K_k.

    Each level is factored once; replicas reuse the factors.
    """

    def __init__(
        self,
        decomposition: SigmaPositiveDecomposition,
        grid: GridDomain,
        n_levels: Optional[int] = None,
        jitter_policy: JitterPolicy = JitterPolicy(),
    ):
        n_levels = decomposition.n_levels if n_levels is None else n_levels
        if n_levels > decomposition.n_levels:
            raise ParameterError(f"decomposition has only {decomposition.n_levels} levels")
        if grid.n_points > DENSE_CAP:
            raise GridSizeError(
                f"per-level dense sampling limited to {DENSE_CAP} points, got {grid.n_points}; "
                "use the white-noise or spectral route"
            )
        if grid.dimension != decomposition.spec.dimension:
            raise PreconditionError("grid and kernel dimensions differ")
        self.decomposition = decomposition
        self.grid = grid
        self.n_levels = n_levels
        self.cutoffs = decomposition.cutoffs[:n_levels]
        self.construction = f"refinement-{decomposition.spec.family.value}"
        points = grid.points()
        self.factors: List[np.ndarray] = []
        self.level_variances: List[float] = []
        for k in range(1, n_levels + 1):
            cov = assemble_covariance_matrix(
                decomposition.level_evaluator(k), points, jitter_policy, label=f"{self.construction} level {k}"
            )
            self.factors.append(cov.factor)
            self.level_variances.append(float(decomposition.level(k, 0.0)))
        logger.info(f"Factored {n_levels} refinement levels on {grid.n_points} points")

    @property
    def independent_increments(self) -> bool:
        return True

    def _assemble(self, draws: Sequence[np.ndarray], lineage_root: Optional[Tuple[int, int]]) -> RefinementLadder:
        shape = self.grid.shape
        if not draws:
            zero = FieldRealization(
                grid=self.grid, values=np.zeros(shape), cutoff=math.inf, variance=np.zeros(shape),
                construction=self.construction,
            )
            return RefinementLadder(levels=(zero,))
        total = np.zeros(self.grid.n_points)
        variance = 0.0
        levels = []
        for k, (factor, z) in enumerate(zip(self.factors, draws), start=1):
            total = total + factor @ z
            variance += self.level_variances[k - 1]
            lineage = None if lineage_root is None else (lineage_root[0], lineage_root[1], k)
            levels.append(
                FieldRealization(
                    grid=self.grid, values=total.reshape(shape), cutoff=self.cutoffs[k - 1],
                    variance=np.full(shape, variance), construction=self.construction, level=k, lineage=lineage,
                )
            )
        return RefinementLadder(levels=tuple(levels))

    def sample_ladder(self, master_seed: int, replica: int) -> RefinementLadder:
        draws = [derive_rng(master_seed, replica, k).standard_normal(self.grid.n_points)
                 for k in range(1, self.n_levels + 1)]
        return self._assemble(draws, (master_seed, replica))

    def sample(self, master_seed: int, replica: int) -> FieldRealization:
        return self.sample_ladder(master_seed, replica).finest

    def sample_with_rng(self, rng: np.random.Generator) -> RefinementLadder:
        draws = [rng.standard_normal(self.grid.n_points) for _ in range(self.n_levels)]
        return self._assemble(draws, None)


def sample_refinement_sequence(
    decomp: SigmaPositiveDecomposition, grid: GridDomain, n_levels: int, rng: np.random.Generator
) -> RefinementLadder:
    """Partial sums of independently sampled decomposition levels."""
    return RefinementSampler(decomp, grid, n_levels).sample_with_rng(rng)


# ---- Gaussian Free Field: Modal Samplers ----

class GFFModalSampler:
    """
    GFF on a rectangle through the tensor sine basis of the grid.

    route="whitenoise" samples independent heat-kernel bands between successive
    cutoffs; route="eigen" keeps the first n_modes modes per axis. A MassiveGreen
    domain gives the massive field.
    """

    def __init__(
        self,
        domain: KernelSpec,
        grid: GridDomain,
        ladder: Optional[CutoffLadder] = None,
        n_modes: Optional[int] = None,
        route: str = "whitenoise",
    ):
        if domain.family not in GREEN_FAMILIES:
            raise ParameterError("modal GFF sampling needs a Green-family domain")
        if grid.dimension != 2 or domain.dimension != 2:
            raise PreconditionError("modal GFF sampler works on two-dimensional rectangles")
        if not np.allclose(grid.extents, domain.domain_extents):
            raise PreconditionError("grid extents must match the rectangle domain")
        if route not in ("whitenoise", "eigen"):
            raise ParameterError(f"unknown GFF route {route!r}")
        self.domain = domain
        self.grid = grid
        self.route = route
        self.mass = domain.mass if domain.family == KernelFamily.MASSIVE_GREEN else 0.0
        self.construction = f"gff-{route}" + ("-massive" if self.mass > 0 else "")

        if route == "whitenoise":
            if ladder is None:
                raise ParameterError("white-noise route needs a cutoff ladder")
            if ladder.cutoffs[0] > max(grid.extents):
                raise PreconditionError("coarsest cutoff exceeds the domain size")
            ladder.check_grid(grid)
            self.n_modes = n_modes or grid.points_per_axis
            self.cutoffs = ladder.cutoffs
            edges = (math.inf,) + ladder.cutoffs
            self.band_weights = [
                green_mode_weights(grid.extents, self.n_modes, cutoff=fine, coarse_cutoff=coarse, mass=self.mass)
                for coarse, fine in zip(edges[:-1], edges[1:])
            ]
        else:
            self.n_modes = n_modes or grid.points_per_axis
            if self.n_modes > grid.points_per_axis:
                raise GridSizeError("eigen route cannot resolve more modes than grid points per axis")
            self.band_weights = [green_mode_weights(grid.extents, self.n_modes, mass=self.mass)]
            self.cutoffs = (effective_cutoff_for_modes(domain, grid, self.n_modes),)

        self.bases = [_sine_basis(grid.axis_coordinates(i), grid.extents[i], self.n_modes) for i in range(2)]
        self.band_scales = [np.sqrt(w) for w in self.band_weights]
        squares = [b ** 2 for b in self.bases]
        cumulative = np.zeros_like(self.band_weights[0])
        self.variances: List[np.ndarray] = []
        for weights in self.band_weights:
            cumulative = cumulative + weights
            self.variances.append(squares[0] @ cumulative @ squares[1].T)

    @property
    def independent_increments(self) -> bool:
        return True

    def band_field(self, band: int, rng: np.random.Generator) -> np.ndarray:
        beta = rng.standard_normal((self.n_modes, self.n_modes))
        return self.bases[0] @ (self.band_scales[band] * beta) @ self.bases[1].T

    def _assemble(self, bands: Sequence[np.ndarray], lineage_root: Optional[Tuple[int, int]]) -> RefinementLadder:
        total = np.zeros(self.grid.shape)
        levels = []
        for k, band in enumerate(bands):
            total = total + band
            lineage = None if lineage_root is None else (lineage_root[0], lineage_root[1], k)
            levels.append(
                FieldRealization(
                    grid=self.grid, values=total, cutoff=self.cutoffs[k], variance=self.variances[k],
                    construction=self.construction, level=k, lineage=lineage,
                )
            )
        return RefinementLadder(levels=tuple(levels), independent_increments=self.route == "whitenoise")

    def sample_ladder(self, master_seed: int, replica: int) -> RefinementLadder:
        bands = [self.band_field(k, derive_rng(master_seed, replica, k)) for k in range(len(self.band_weights))]
        return self._assemble(bands, (master_seed, replica))

    def sample_with_rng(self, rng: np.random.Generator) -> RefinementLadder:
        return self._assemble([self.band_field(k, rng) for k in range(len(self.band_weights))], None)

    def sample(self, master_seed: int, replica: int) -> FieldRealization:
        return self.sample_ladder(master_seed, replica).finest


def sample_gff_whitenoise(
    domain: KernelSpec, grid: GridDomain, ladder: CutoffLadder, rng: np.random.Generator
) -> RefinementLadder:
    """Independent white-noise bands pi int_{eps_k^2}^{eps_{k-1}^2} p_D dt, summed along the ladder."""
    return GFFModalSampler(domain, grid, ladder=ladder).sample_with_rng(rng)


def sample_gff_eigen(domain: KernelSpec, grid: GridDomain, n_modes: int, rng: np.random.Generator) -> FieldRealization:
    """sqrt(2 pi) sum beta_n e_n / sqrt(-lambda_n) over the first n_modes modes per axis."""
    return GFFModalSampler(domain, grid, n_modes=n_modes, route="eigen").sample_with_rng(rng).finest


def effective_cutoff_for_modes(domain: KernelSpec, grid: GridDomain, n_modes: int) -> float:
    """Cutoff eps whose white-noise variance at the domain centre matches the n_modes eigen field."""
    centre = np.asarray(domain.domain_extents) / 2.0
    reference_modes = max(4 * n_modes, grid.points_per_axis)
    mass = domain.mass if domain.family == KernelFamily.MASSIVE_GREEN else 0.0

    def centre_variance(n: int, cutoff: float) -> float:
        weights = green_mode_weights(domain.domain_extents, n, cutoff=cutoff, mass=mass)
        first = _sine_basis([centre[0]], domain.domain_extents[0], n)[0] ** 2
        second = _sine_basis([centre[1]], domain.domain_extents[1], n)[0] ** 2
        return float(first @ weights @ second)

    target = centre_variance(n_modes, 0.0)
    upper = max(domain.domain_extents)
    lower = 1e-6
    if centre_variance(reference_modes, upper) >= target:
        return upper
    return float(brentq(lambda eps: centre_variance(reference_modes, eps) - target, lower, upper, xtol=1e-10))


# ---- Circle Average ----

def circle_average(
    fine_field: FieldRealization, eps: float, variance: Optional[np.ndarray] = None, n_angles: int = CIRCLE_ANGLES
) -> FieldRealization:
    """
    Mean of bilinear interpolations of the field at n_angles points on the circle of
    radius eps around each grid point; the field is taken as zero outside the domain.

    The variance of the averaged field is not analytic: pass an empirical profile
    (see CircleAverageSampler) or build_subcritical will refuse the field.
    """
    grid = fine_field.grid
    if grid is None or grid.dimension != 2:
        raise PreconditionError("circle average needs a two-dimensional grid")
    if eps < 4.0 * grid.spacing - 1e-12:
        raise GridSizeError(f"circle radius {eps:g} is below four grid spacings ({4 * grid.spacing:g})")
    spacings = grid.spacings
    n = grid.points_per_axis
    index = np.arange(n, dtype=float)
    ii, jj = np.meshgrid(index, index, indexing="ij")
    total = np.zeros(grid.shape)
    for theta in (np.arange(n_angles) * 2.0 * math.pi / n_angles):
        coords = [ii + eps * math.cos(theta) / spacings[0], jj + eps * math.sin(theta) / spacings[1]]
        total += map_coordinates(fine_field.values, coords, order=1, mode="grid-constant", cval=0.0)
    return FieldRealization(
        grid=grid, values=total / n_angles, cutoff=eps, variance=variance, variance_kind="empirical",
        construction=f"circle-average({fine_field.construction})", level=fine_field.level, lineage=fine_field.lineage,
    )


def _square_symmetrize(profile: np.ndarray) -> np.ndarray:
    images = [profile, profile[::-1, :], profile[:, ::-1], profile[::-1, ::-1]]
    if profile.shape[0] == profile.shape[1]:
        images += [image.T for image in images]
    return np.mean(images, axis=0)


class CircleAverageSampler:
    """
    Circle averages at radius eps of a fine modal GFF, with the variance profile
    estimated once from a calibration ensemble on its own seed stream.
    """

    CALIBRATION_LEVEL = 10_000

    def __init__(self, base: GFFModalSampler, eps: float, calibration_replicas: int = 512, calibration_seed: int = 0):
        self.base = base
        self.eps = eps
        self.grid = base.grid
        self.cutoffs = (eps,)
        squares = np.zeros(self.grid.shape)
        for replica in range(calibration_replicas):
            rng = derive_rng(calibration_seed, replica, self.CALIBRATION_LEVEL)
            averaged = circle_average(base.sample_with_rng(rng).finest, eps)
            squares += averaged.values ** 2
        profile = squares / calibration_replicas
        if np.allclose(np.diff(self.grid.extents), 0.0):
            profile = _square_symmetrize(profile)
        self.variance = _read_only(profile)
        logger.info(f"Calibrated circle-average variance at eps={eps:g} from {calibration_replicas} replicas")

    @property
    def independent_increments(self) -> bool:
        return False

    def sample(self, master_seed: int, replica: int) -> FieldRealization:
        fine = self.base.sample(master_seed, replica)
        return circle_average(fine, self.eps, variance=self.variance)

    def sample_ladder(self, master_seed: int, replica: int) -> RefinementLadder:
        return RefinementLadder(levels=(self.sample(master_seed, replica),), independent_increments=False)


# ---- Discrete Gaussian Free Field ----

class DGFFSampler:
    """Dense sampler of the discrete GFF with covariance 2 pi G_{D_n}; zero on the boundary."""

    def __init__(self, lattice: SquareLattice, jitter_policy: JitterPolicy = JitterPolicy()):
        if lattice.n_interior > DENSE_CAP:
            raise GridSizeError(f"dense DGFF sampling limited to {DENSE_CAP} interior vertices, got {lattice.n_interior}")
        self.lattice = lattice
        self.grid = lattice
        matrix = dgff_green_matrix(lattice)
        self.factor, self.jitter = factor_covariance(np.array(matrix), jitter_policy, label=f"dgff n={lattice.n}")
        variance = np.zeros(lattice.shape)
        variance[1:-1, 1:-1] = np.diag(matrix).reshape(lattice.n - 1, lattice.n - 1)
        self.variance = _read_only(variance)
        self.cutoffs = (lattice.spacing,)

    @property
    def independent_increments(self) -> bool:
        return False

    def _realize(self, z: np.ndarray, lineage) -> FieldRealization:
        values = np.zeros(self.lattice.shape)
        values[1:-1, 1:-1] = (self.factor @ z).reshape(self.lattice.n - 1, self.lattice.n - 1)
        return FieldRealization(
            grid=self.lattice, values=values, cutoff=self.lattice.spacing, variance=self.variance,
            construction="dgff", lineage=lineage,
        )

    def sample(self, master_seed: int, replica: int) -> FieldRealization:
        z = derive_rng(master_seed, replica, 0).standard_normal(self.lattice.n_interior)
        return self._realize(z, (master_seed, replica, 0))

    def sample_with_rng(self, rng: np.random.Generator) -> FieldRealization:
        return self._realize(rng.standard_normal(self.lattice.n_interior), None)

    def sample_ladder(self, master_seed: int, replica: int) -> RefinementLadder:
        return RefinementLadder(levels=(self.sample(master_seed, replica),), independent_increments=False)


def sample_dgff(lattice: SquareLattice, rng: np.random.Generator) -> FieldRealization:
    return DGFFSampler(lattice).sample_with_rng(rng)


# ---- Smoothness and Cutoff Consistency ----

@dataclass(frozen=True)
class SmoothnessReport:
    c_hat: float
    alpha_hat: float
    violation_fraction: float
    unit_alpha_constant: float
    n_replicas: int
    master_seed: int
    passed: bool
    rows: Tuple[Tuple[float, float, float], ...] = ()


def _structure_function(values: np.ndarray, lag: int, margin: int) -> float:
    """Mean of (X(x + lag e_1) - X(x))^2 over points at least `margin` cells from the boundary."""
    n = values.shape[0]
    lo, hi = margin, n - margin - lag
    if hi <= lo:
        return float("nan")
    inner = tuple(slice(margin, values.shape[i] - margin) for i in range(1, values.ndim))
    diff = values[(slice(lo + lag, hi + lag),) + inner] - values[(slice(lo, hi),) + inner]
    return float(np.mean(diff ** 2))


def smoothness_check(
    construction, n_replicas: int, master_seed: int = 0, max_violation: float = 0.05
) -> SmoothnessReport:
    """
    Fits E[(X_eps(x) - X_eps(y))^2] <= C (|x-y|/eps)^alpha over lags |x-y| <= eps,
    pooling every ladder level into one (C, alpha).
    """
    grid = construction.grid
    h = grid.spacing
    margin = grid.shape[0] // 8
    sums = {}
    for replica in range(n_replicas):
        ladder = construction.sample_ladder(master_seed, replica)
        for level in ladder.levels:
            if not math.isfinite(level.cutoff):
                continue
            max_lag = int(level.cutoff / h)
            for lag in range(1, max_lag + 1):
                value = _structure_function(level.values, lag, margin)
                if math.isfinite(value):
                    key = (level.cutoff, lag)
                    sums[key] = sums.get(key, 0.0) + value
    rows = tuple((eps, lag * h / eps, total / n_replicas) for (eps, lag), total in sorted(sums.items()))
    if not rows or max(r[2] for r in rows) <= 1e-24:
        return SmoothnessReport(0.0, float("nan"), 0.0, 0.0, n_replicas, master_seed, True, rows)
    positive = [r for r in rows if r[2] > 0]
    ratios = np.array([r[1] for r in positive])
    values = np.array([r[2] for r in positive])
    fit = linregress(np.log(ratios), np.log(values))
    residuals = np.log(values) - (fit.intercept + fit.slope * np.log(ratios))
    c_hat = float(math.exp(fit.intercept + 2.0 * np.std(residuals)))
    envelope = c_hat * ratios ** fit.slope
    violation = float(np.mean(values > envelope * (1.0 + 1e-12)))
    unit_alpha = float(np.max(values / ratios))
    passed = fit.slope > 0 and violation <= max_violation
    return SmoothnessReport(c_hat, float(fit.slope), violation, unit_alpha, n_replicas, master_seed, passed, rows)


@dataclass(frozen=True)
class CutoffConsistencyReport:
    constants: Tuple[float, ...]
    c_hat: float
    spread: float
    passed: bool


def cutoff_consistency_check(
    construction, n_replicas: int, pairs: Sequence[Tuple[Tuple[int, ...], Tuple[int, ...]]],
    master_seed: int = 0, max_spread: float = 1.0,
) -> CutoffConsistencyReport:
    """
    Empirical E[X_eps(x) X_eta(y)] (eta < eps, successive levels) against ln+ 1/(|x-y| + eps);
    the fitted constant per level is the largest absolute deviation over the pairs.
    """
    grid = construction.grid
    points = grid.points().reshape(grid.shape + (grid.dimension,))
    accum = None
    for replica in range(n_replicas):
        ladder = construction.sample_ladder(master_seed, replica)
        levels = [lv for lv in ladder.levels if math.isfinite(lv.cutoff)]
        products = np.array([
            [levels[k].values[x] * levels[k + 1].values[y] for x, y in pairs] for k in range(len(levels) - 1)
        ])
        accum = products if accum is None else accum + products
        cutoffs = [lv.cutoff for lv in levels]
    covariance = accum / n_replicas
    constants = []
    for k in range(covariance.shape[0]):
        deviations = []
        for (x, y), value in zip(pairs, covariance[k]):
            distance = float(np.linalg.norm(points[x] - points[y]))
            deviations.append(abs(value - max(math.log(1.0 / (distance + cutoffs[k])), 0.0)))
        constants.append(max(deviations))
    spread = max(constants) - min(constants)
    return CutoffConsistencyReport(tuple(constants), max(constants), spread, spread <= max_spread)


# ---- Binary Field Dump ----

def dump_field(realization: FieldRealization, path: os.PathLike) -> Path:
    """GMCF: magic, u32 version, u32 d, u32 n per axis, f64 cutoff, then row-major f64 values (little-endian)."""
    path = Path(path)
    values = np.ascontiguousarray(realization.values, dtype="<f8")
    header = GMCF_MAGIC + struct.pack("<II", GMCF_VERSION, values.ndim)
    header += struct.pack(f"<{values.ndim}I", *values.shape) + struct.pack("<d", float(realization.cutoff))
    path.parent.mkdir(parents=True, exist_ok=True)
    temporary = path.with_name(path.name + ".tmp")
    with open(temporary, "wb") as handle:
        handle.write(header)
        handle.write(values.tobytes(order="C"))
    os.replace(temporary, path)
    logger.info(f"Dumped field of shape {values.shape} to {path}")
    return path


def load_field(path: os.PathLike) -> Tuple[np.ndarray, float]:
    """Reads a GMCF dump; returns (values, cutoff)."""
    with open(path, "rb") as handle:
        payload = handle.read()
    if payload[:4] != GMCF_MAGIC:
        raise PreconditionError(f"{path} is not a GMCF field dump")
    version, d = struct.unpack_from("<II", payload, 4)
    if version != GMCF_VERSION:
        raise PreconditionError(f"unsupported GMCF version {version}")
    shape = struct.unpack_from(f"<{d}I", payload, 12)
    offset = 12 + 4 * d
    (cutoff,) = struct.unpack_from("<d", payload, offset)
    values = np.frombuffer(payload, dtype="<f8", offset=offset + 8).reshape(shape)
    return values.copy(), cutoff
