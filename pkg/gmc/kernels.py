# --- Covariance kernels of log-correlated fields ---
# Description: kernel specifications, pointwise evaluation, sigma-positive
#              decompositions and positive-definite covariance assembly.
# -----------------------------------------------------------------

import logging
import math
import threading
import warnings
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache, partial
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import sparse
from scipy.integrate import IntegrationWarning, quad
from scipy.linalg import LinAlgError, cholesky, eigvalsh, solve
from scipy.sparse.linalg import spsolve
from scipy.spatial.distance import cdist
from scipy.special import exp1

from gmc.errors import (
    KernelDomainError,
    NotPositiveDefiniteError,
    NumericalError,
    OpenQuestionError,
    ParameterError,
    PreconditionError,
)

logger = logging.getLogger(__name__)

DEFAULT_MODES = 256
QUAD_TOLERANCE = 1e-9
DENSE_CAP = 2 ** 13


# ---- Kernel Specification ----

class KernelFamily(str, Enum):
    EXACT_LOG = "ExactLog"
    STAR_SCALE = "StarScale"
    SPHERICAL_LOG = "SphericalLog"
    GREEN_DIRICHLET_RECTANGLE = "GreenDirichletRectangle"
    MASSIVE_GREEN = "MassiveGreen"
    DGFF_SQUARE_LATTICE = "DGFFSquareLattice"


class SeedCovariance(str, Enum):
    KAHANE = "kahane"
    TRIANGLE = "triangle"


GREEN_FAMILIES = (KernelFamily.GREEN_DIRICHLET_RECTANGLE, KernelFamily.MASSIVE_GREEN)


def kahane_seed(x, correlation_length: float = 1.0):
    """k(x) = exp(-|x|/T)."""
    return np.exp(-np.abs(np.asarray(x, dtype=float)) / correlation_length)


def triangle_seed(x, correlation_length: float = 1.0):
    """k(x) = (1 - |x|/T) on [0, T], zero beyond."""
    return np.maximum(1.0 - np.abs(np.asarray(x, dtype=float)) / correlation_length, 0.0)


class KernelSpec(BaseModel):
    """
    A covariance kernel family and its parameters.

    `seed_function` and `g_offset` are Python callables for programmatic use; configs
    select one of the built-in seeds by name instead.
    """

    model_config = ConfigDict(frozen=True, extra="forbid", arbitrary_types_allowed=True)

    family: KernelFamily
    dimension: int = Field(1, ge=1, le=3, description="Ambient dimension d")
    correlation_length: float = Field(1.0, gt=0, description="Correlation length T")
    seed: Optional[SeedCovariance] = Field(None, description="Built-in seed covariance for StarScale")
    seed_function: Optional[Callable] = Field(None, exclude=True)
    mass: float = Field(0.0, ge=0, description="Mass m of the massive Green function")
    extents: Optional[Tuple[float, ...]] = Field(None, description="Rectangle side lengths")
    n_modes: int = Field(DEFAULT_MODES, ge=1, description="Sine modes per axis")
    g_offset: Optional[Callable] = Field(None, exclude=True)

    @model_validator(mode="after")
    def check_family_parameters(self) -> "KernelSpec":
        if self.family == KernelFamily.STAR_SCALE:
            if self.seed is None and self.seed_function is None:
                raise ValueError("StarScale kernel needs a seed covariance k")
            if abs(float(np.asarray(self.seed_covariance(0.0))) - 1.0) > 1e-12:
                raise ValueError("seed covariance must satisfy k(0) = 1")
        if self.family == KernelFamily.SPHERICAL_LOG and self.dimension != 3:
            raise ValueError("SphericalLog kernel is defined for d = 3")
        if self.extents is not None:
            if len(self.extents) != self.dimension:
                raise ValueError(f"extents must have {self.dimension} entries")
            if any(a <= 0 for a in self.extents):
                raise ValueError("extents must be positive")
        return self

    @property
    def T(self) -> float:
        return self.correlation_length

    @property
    def domain_extents(self) -> Tuple[float, ...]:
        return tuple(self.extents) if self.extents is not None else (1.0,) * self.dimension

    @property
    def mu(self) -> float:
        """Exponent of the Pasenchenko-type building block (1 - |x|^mu)_+."""
        if self.dimension == 1:
            return 1.0
        if self.dimension == 2:
            return 0.5
        raise OpenQuestionError("sigma-positivity of ln+(T/|x|) in d = 3 is unresolved")

    def seed_covariance(self, x):
        if self.seed_function is not None:
            return self.seed_function(x)
        if self.seed == SeedCovariance.KAHANE:
            return kahane_seed(x, self.correlation_length)
        return triangle_seed(x, self.correlation_length)

    def offset(self, x, y) -> float:
        return 0.0 if self.g_offset is None else float(self.g_offset(x, y))


def _require(spec: KernelSpec, *families: KernelFamily) -> None:
    if spec.family not in families:
        names = ", ".join(f.value for f in families)
        raise ParameterError(f"kernel family {spec.family.value} not accepted here (expected {names})")


def _as_point(x, d: int) -> np.ndarray:
    point = np.atleast_1d(np.asarray(x, dtype=float))
    if point.size == 1 and d > 1:
        point = np.full(d, float(point[0]))
    if point.size != d:
        raise KernelDomainError(f"point {x!r} does not have {d} coordinates")
    return point


# ---- Exact Logarithmic Kernel ----

def eval_exact_log(spec: KernelSpec, x, y) -> float:
    """ln+(T/|x-y|) + g(x, y); the diagonal is excluded."""
    _require(spec, KernelFamily.EXACT_LOG)
    px, py = _as_point(x, spec.dimension), _as_point(y, spec.dimension)
    r = float(np.linalg.norm(px - py))
    if r == 0.0:
        raise KernelDomainError("exact log kernel is infinite on the diagonal")
    return max(math.log(spec.T / r), 0.0) + spec.offset(px, py)


def exact_log_profile(spec: KernelSpec, r) -> np.ndarray:
    """Vectorized ln+(T/r) for r > 0."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0.0):
        raise KernelDomainError("exact log kernel is infinite on the diagonal")
    return np.maximum(np.log(spec.T / r), 0.0)


def _nu_band(u, lo: float, hi: float, top: float) -> np.ndarray:
    """
    Closed form of int_{[lo, hi)} (t - u)_+ nu_top(dt), where
    nu_top(dt) = 1_{(0, top)}(t) dt / t^2 + delta_top(dt) / top.
    """
    u = np.asarray(u, dtype=float)
    a = np.maximum(lo, u)
    b = min(hi, top)
    with np.errstate(divide="ignore", invalid="ignore"):
        continuous = np.where(a < b, np.log(b / a) + u * (1.0 / b - 1.0 / a), 0.0)
    continuous = np.maximum(continuous, 0.0)
    atom = np.maximum(top - u, 0.0) / top if lo <= top < hi else 0.0
    return continuous + atom


def exact_log_cutoff(spec: KernelSpec, r, eps: float) -> np.ndarray:
    """
    Cutoff kernel keeping the nu-scales above eps:
    ln(T / max(r, eps)) + (1 - (r/eps)^mu)_+ / mu for r, eps <= T.
    Finite on the diagonal, with value ln(T/eps) + 1/mu.
    """
    _require(spec, KernelFamily.EXACT_LOG)
    mu = spec.mu
    if eps <= 0:
        raise ParameterError("cutoff eps must be positive")
    u = np.asarray(r, dtype=float) ** mu
    return _nu_band(u, eps ** mu, np.inf, spec.T ** mu) / mu


def nu_level_quadrature(spec: KernelSpec, lo: float, hi: float, r: float) -> float:
    """Numerical value of (1/mu) int_{[lo, hi)} (t - r^mu)_+ nu_{T^mu}(dt)."""
    _require(spec, KernelFamily.EXACT_LOG)
    mu = spec.mu
    top = spec.T ** mu
    u = float(r) ** mu
    a, b = max(lo, u), min(hi, top)
    total = 0.0
    if a < b:
        total, _ = quad(lambda t: (t - u) / t ** 2, a, b, epsabs=QUAD_TOLERANCE, limit=200)
    if lo <= top < hi:
        total += max(top - u, 0.0) / top
    return total / mu


# ---- Star Scale Invariant Kernels ----

def _star_integrand_breakpoints(spec: KernelSpec, r: float, upper: float) -> Optional[List[float]]:
    if spec.seed == SeedCovariance.TRIANGLE and spec.seed_function is None and r > 0:
        kink = spec.T / r
        if 1.0 < kink < upper:
            return [kink]
    return None


def eval_star_kernel(spec: KernelSpec, eps_low: float, x) -> float:
    """
    Cutoff star kernel int_1^{1/eps_low} k(u x)/u du by adaptive quadrature.

    Raises NumericalError when the quadrature misses the absolute tolerance.
    """
    _require(spec, KernelFamily.STAR_SCALE)
    if not 0.0 < eps_low <= 1.0:
        raise ParameterError(f"eps_low must lie in (0, 1], got {eps_low}")
    r = float(np.linalg.norm(_as_point(x, spec.dimension)))
    upper = 1.0 / eps_low
    if upper == 1.0:
        return 0.0

    def integrand(u: float) -> float:
        return float(spec.seed_covariance(u * r)) / u

    with warnings.catch_warnings():
        warnings.simplefilter("error", IntegrationWarning)
        try:
            value, abserr = quad(
                integrand, 1.0, upper, epsabs=QUAD_TOLERANCE, epsrel=1e-12, limit=500,
                points=_star_integrand_breakpoints(spec, r, upper),
            )
        except IntegrationWarning as exc:
            raise NumericalError(f"star kernel quadrature did not converge: {exc}") from exc
    if abserr > 10 * QUAD_TOLERANCE:
        raise NumericalError("star kernel quadrature missed its tolerance", achieved=abserr)
    return value


def star_cutoff_kernel(spec: KernelSpec, r, eps: float) -> np.ndarray:
    """
    Vectorized cutoff star kernel. Closed forms for the built-in seeds:
    Kahane gives E1(r/T) - E1(r/(T eps)); the triangle seed gives
    ln U - (r/T)(U - 1) with U = min(1/eps, T/r).
    """
    _require(spec, KernelFamily.STAR_SCALE)
    if not 0.0 < eps <= 1.0:
        raise ParameterError(f"cutoff eps must lie in (0, 1], got {eps}")
    r = np.asarray(r, dtype=float)
    upper = 1.0 / eps
    if spec.seed_function is not None:
        flat = [eval_star_kernel(spec, eps, value) for value in r.ravel()]
        return np.asarray(flat, dtype=float).reshape(r.shape)

    scaled = r / spec.T
    if spec.seed == SeedCovariance.KAHANE:
        with np.errstate(divide="ignore", invalid="ignore"):
            values = exp1(scaled) - exp1(scaled * upper)
        return np.where(scaled > 0, values, math.log(upper))

    positive = np.where(scaled > 0, scaled, 1.0)
    cap = np.where(scaled > 0, np.minimum(upper, 1.0 / positive), upper)
    values = np.log(cap) - scaled * (cap - 1.0)
    return np.where(scaled < 1.0, np.maximum(values, 0.0), 0.0)


# ---- Sigma-Positive Decompositions ----

@dataclass(frozen=True)
class SigmaPositiveDecomposition:
    """
    K = sum_k K_k with continuous nonnegative positive-definite levels.

    Level k collects the scales between cutoffs[k-2] and cutoffs[k-1]
    (level 1 collects everything coarser than cutoffs[0]); the partial sum
    up to level n is the cutoff kernel at cutoffs[n-1].
    """

    spec: KernelSpec
    cutoffs: Tuple[float, ...]

    @property
    def n_levels(self) -> int:
        return len(self.cutoffs)

    def _check_level(self, k: int) -> None:
        if not 1 <= k <= self.n_levels:
            raise ParameterError(f"level {k} outside 1..{self.n_levels}")

    def level(self, k: int, r) -> np.ndarray:
        self._check_level(k)
        eps_fine = self.cutoffs[k - 1]
        eps_coarse = self.cutoffs[k - 2] if k > 1 else None
        if self.spec.family == KernelFamily.EXACT_LOG:
            mu = self.spec.mu
            hi = eps_coarse ** mu if eps_coarse is not None else np.inf
            u = np.asarray(r, dtype=float) ** mu
            return _nu_band(u, eps_fine ** mu, hi, self.spec.T ** mu) / mu
        values = star_cutoff_kernel(self.spec, r, eps_fine)
        if eps_coarse is not None:
            values = values - star_cutoff_kernel(self.spec, r, eps_coarse)
        return np.maximum(values, 0.0)

    def partial_sum(self, n: int, r) -> np.ndarray:
        if n == 0:
            return np.zeros_like(np.asarray(r, dtype=float))
        self._check_level(n)
        return self.cumulative(r, self.cutoffs[n - 1])

    def cumulative(self, r, eps: float) -> np.ndarray:
        if self.spec.family == KernelFamily.EXACT_LOG:
            return exact_log_cutoff(self.spec, r, eps)
        return star_cutoff_kernel(self.spec, r, eps)

    def evaluate(self, k: int, x, y) -> float:
        d = self.spec.dimension
        r = np.linalg.norm(_as_point(x, d) - _as_point(y, d))
        return float(self.level(k, r))

    def level_evaluator(self, k: int) -> "IsotropicEvaluator":
        self._check_level(k)
        return IsotropicEvaluator(partial(self.level, k))

    def partial_sum_evaluator(self, n: int) -> "IsotropicEvaluator":
        return IsotropicEvaluator(partial(self.partial_sum, n))


def sigma_positive_decompose_exact_log(spec: KernelSpec, n_levels: int) -> SigmaPositiveDecomposition:
    """
    Levels K_n(x) = (1/mu) int_{1/n}^{1/(n-1)} (t - |x|^mu)_+ nu_{T^mu}(dt), level 1 taking t >= 1.
    Equivalent cutoffs are eps_n = n^(-1/mu).
    """
    _require(spec, KernelFamily.EXACT_LOG)
    if spec.g_offset is not None:
        raise PreconditionError("sigma-positive decomposition covers the pure logarithm only (g_offset set)")
    mu = spec.mu
    if n_levels < 0:
        raise ParameterError("n_levels must be nonnegative")
    cutoffs = tuple(float(n) ** (-1.0 / mu) for n in range(1, n_levels + 1))
    return SigmaPositiveDecomposition(spec=spec, cutoffs=cutoffs)


def exact_log_band_decomposition(spec: KernelSpec, cutoffs: Sequence[float]) -> SigmaPositiveDecomposition:
    """Exact-log decomposition along an arbitrary decreasing cutoff ladder."""
    _require(spec, KernelFamily.EXACT_LOG)
    if spec.dimension == 3:
        raise OpenQuestionError("sigma-positivity of ln+(T/|x|) in d = 3 is unresolved")
    return SigmaPositiveDecomposition(spec=spec, cutoffs=_check_ladder(cutoffs))


def star_band_decomposition(spec: KernelSpec, cutoffs: Sequence[float]) -> SigmaPositiveDecomposition:
    """Bands int_{1/eps_{k-1}}^{1/eps_k} k(u x)/u du of a star kernel."""
    _require(spec, KernelFamily.STAR_SCALE)
    ladder = _check_ladder(cutoffs)
    if ladder and ladder[0] > 1.0:
        raise ParameterError("star cutoffs must lie in (0, 1]")
    if spec.seed == SeedCovariance.TRIANGLE and spec.dimension > 1:
        logger.warning("Triangle seed is positive definite in d = 1 only; bands may need jitter.")
    return SigmaPositiveDecomposition(spec=spec, cutoffs=ladder)


def _check_ladder(cutoffs: Sequence[float]) -> Tuple[float, ...]:
    ladder = tuple(float(c) for c in cutoffs)
    if any(c <= 0 for c in ladder):
        raise ParameterError("cutoffs must be positive")
    if any(b >= a for a, b in zip(ladder, ladder[1:])):
        raise ParameterError("cutoffs must be strictly decreasing")
    return ladder


# ---- Spherical Logarithmic Kernel ----

@lru_cache(maxsize=8)
def _sphere_rule(n_nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gauss-Legendre in z times uniform azimuth; weights sum to one.
    Even n_z and n_phi divisible by 4 keep nodes off the coordinate great circles.
    """
    n_z = 2 * max(int(round(math.sqrt(n_nodes / 8.0))), 2)
    n_phi = 2 * n_z
    z, wz = np.polynomial.legendre.leggauss(n_z)
    phi = (np.arange(n_phi) + 0.5) * (2.0 * math.pi / n_phi)
    rho = np.sqrt(1.0 - z ** 2)
    nodes = np.stack(
        [np.outer(rho, np.cos(phi)).ravel(), np.outer(rho, np.sin(phi)).ravel(), np.repeat(z, n_phi)], axis=1
    )
    weights = np.repeat(wz / 2.0, n_phi) / n_phi
    return nodes, weights


@lru_cache(maxsize=4)
def spherical_log_constant(dimension: int = 3) -> float:
    """c_d = int_S ln(1/|<e, s>|) sigma(ds) for the uniform probability on the sphere."""
    exponent = (dimension - 3) / 2.0
    numerator, _ = quad(lambda t: -math.log(t) * (1.0 - t * t) ** exponent, 0.0, 1.0, limit=200)
    denominator, _ = quad(lambda t: (1.0 - t * t) ** exponent, 0.0, 1.0, limit=200)
    return numerator / denominator


def eval_spherical_log(spec: KernelSpec, x, n_nodes: int = 40000) -> float:
    """Sphere average of ln+(T/|<x, s>|); equals ln(T/|x|) + c_3 for |x| <= T."""
    _require(spec, KernelFamily.SPHERICAL_LOG)
    if n_nodes < 100:
        raise ParameterError("spherical quadrature needs at least 100 nodes")
    point = _as_point(x, 3)
    if not np.any(point):
        raise KernelDomainError("spherical log kernel is infinite at the origin")
    nodes, weights = _sphere_rule(int(n_nodes))
    projection = np.abs(nodes @ point)
    with np.errstate(divide="ignore"):
        values = np.maximum(np.log(spec.T / projection), 0.0)
    return float(weights @ values)


# ---- Green Functions on a Rectangle ----

def _sine_basis(coords, extent: float, n_modes: int) -> np.ndarray:
    k = np.arange(1, n_modes + 1)
    return math.sqrt(2.0 / extent) * np.sin(math.pi * np.outer(np.asarray(coords, dtype=float), k) / extent)


def _axis_eigenvalues(extent: float, n_modes: int) -> np.ndarray:
    k = np.arange(1, n_modes + 1)
    return (math.pi * k / extent) ** 2


def laplacian_eigenvalues(extents: Sequence[float], n_modes: int) -> np.ndarray:
    """-lambda_n on the tensor grid of modes, shape (n_modes,) * d."""
    total = _axis_eigenvalues(extents[0], n_modes)
    for extent in extents[1:]:
        total = np.add.outer(total, _axis_eigenvalues(extent, n_modes))
    return total


def green_mode_weights(
    extents: Sequence[float],
    n_modes: int,
    cutoff: float = 0.0,
    coarse_cutoff: float = math.inf,
    mass: float = 0.0,
) -> np.ndarray:
    """
    Per-mode covariance weights of the band between `cutoff` and `coarse_cutoff`:
    2 pi (exp(-L eps^2/2) - exp(-L eps_c^2/2)) / L with L = m^2 - lambda_n.
    The full Green function is cutoff=0, coarse_cutoff=inf.
    """
    rate = laplacian_eigenvalues(extents, n_modes) + mass ** 2
    fine = np.exp(-rate * cutoff ** 2 / 2.0)
    coarse = np.zeros_like(rate) if math.isinf(coarse_cutoff) else np.exp(-rate * coarse_cutoff ** 2 / 2.0)
    return 2.0 * math.pi * (fine - coarse) / rate


def modal_pair_sum(extents: Sequence[float], xs: np.ndarray, ys: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """sum_n w_n e_n(x_p) e_n(y_p) for paired rows of xs and ys."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    n_modes = weights.shape[0]
    factors = [
        _sine_basis(xs[:, i], extent, n_modes) * _sine_basis(ys[:, i], extent, n_modes)
        for i, extent in enumerate(extents)
    ]
    letters = "ijk"[: len(extents)]
    subscripts = ",".join(f"p{c}" for c in letters) + f",{letters}->p"
    return np.einsum(subscripts, *factors, weights, optimize=True)


def _check_interior(spec: KernelSpec, *points: np.ndarray) -> None:
    extents = np.asarray(spec.domain_extents)
    for point in points:
        if np.any(point <= 0.0) or np.any(point >= extents):
            raise KernelDomainError(f"point {point.tolist()} is not interior to the rectangle")


def green_rectangle_eigen(spec: KernelSpec, x, y, n_modes: Optional[int] = None) -> float:
    """2 pi sum_n e_n(x) e_n(y) / (-lambda_n), truncated at n_modes per axis."""
    _require(spec, *GREEN_FAMILIES)
    px, py = _as_point(x, spec.dimension), _as_point(y, spec.dimension)
    _check_interior(spec, px, py)
    if np.array_equal(px, py):
        raise KernelDomainError("Green function is infinite on the diagonal")
    n = n_modes or spec.n_modes
    weights = green_mode_weights(spec.domain_extents, n)
    return float(modal_pair_sum(spec.domain_extents, px, py, weights)[0])


def heat_kernel_green_band(spec: KernelSpec, eps: float, x, y, n_modes: Optional[int] = None) -> float:
    """
    pi int_{eps^2}^inf p_D(t, x, y) dt for Brownian motion (generator Laplacian/2) killed
    on the boundary: 2 pi sum_n e_n(x) e_n(y) exp(lambda_n eps^2 / 2) / (-lambda_n).
    """
    _require(spec, *GREEN_FAMILIES)
    if eps < 0:
        raise ParameterError("eps must be nonnegative")
    px, py = _as_point(x, spec.dimension), _as_point(y, spec.dimension)
    _check_interior(spec, px, py)
    if math.isinf(eps):
        return 0.0
    n = n_modes or spec.n_modes
    weights = green_mode_weights(spec.domain_extents, n, cutoff=eps)
    return float(modal_pair_sum(spec.domain_extents, px, py, weights)[0])


def massive_green(spec: KernelSpec, x, y, n_modes: Optional[int] = None) -> float:
    """2 pi sum_n e_n(x) e_n(y) / (m^2 - lambda_n)."""
    _require(spec, KernelFamily.MASSIVE_GREEN)
    if spec.mass <= 0:
        raise ParameterError("massive Green function needs m > 0")
    px, py = _as_point(x, spec.dimension), _as_point(y, spec.dimension)
    _check_interior(spec, px, py)
    n = n_modes or spec.n_modes
    weights = green_mode_weights(spec.domain_extents, n, mass=spec.mass)
    return float(modal_pair_sum(spec.domain_extents, px, py, weights)[0])


def green_truncation_estimate(spec: KernelSpec, x, y, n_modes: Optional[int] = None, eps: float = 0.0) -> float:
    """|G_N - G_{N/2}|; the absolute tail of the Green series does not converge."""
    _require(spec, *GREEN_FAMILIES)
    n = n_modes or spec.n_modes
    px, py = _as_point(x, spec.dimension), _as_point(y, spec.dimension)
    mass = spec.mass if spec.family == KernelFamily.MASSIVE_GREEN else 0.0
    full = modal_pair_sum(spec.domain_extents, px, py, green_mode_weights(spec.domain_extents, n, eps, mass=mass))
    half = modal_pair_sum(
        spec.domain_extents, px, py, green_mode_weights(spec.domain_extents, max(n // 2, 1), eps, mass=mass)
    )
    return float(abs(full[0] - half[0]))


# ---- Discrete Gaussian Free Field on the Square Lattice ----

@dataclass(frozen=True)
class SquareLattice:
    """Vertices i*h, i = 0..n per axis, of the square [0, extent]^2 with h = extent/n."""

    n: int
    extent: float = 1.0

    def __post_init__(self):
        if self.n < 2:
            raise ParameterError("square lattice needs n >= 2")
        if self.extent <= 0:
            raise ParameterError("lattice extent must be positive")

    @property
    def dimension(self) -> int:
        return 2

    @property
    def spacing(self) -> float:
        return self.extent / self.n

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.n + 1, self.n + 1)

    @property
    def n_interior(self) -> int:
        return (self.n - 1) ** 2

    @property
    def extents(self) -> Tuple[float, float]:
        return (self.extent, self.extent)

    def axis_coordinates(self) -> np.ndarray:
        return np.arange(self.n + 1) * self.spacing

    def points(self) -> np.ndarray:
        coords = self.axis_coordinates()
        xx, yy = np.meshgrid(coords, coords, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel()], axis=1)

    def interior_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[1:-1, 1:-1] = True
        return mask

    def cell_volumes(self) -> np.ndarray:
        """
        Vertex weights W_z: h^2 inside, h^2/2 on edges and h^2/4 at corners, so they sum to the
        area of the hull. Boundary values are zero, so boundary vertices carry Lebesgue mass only.
        """
        axis = np.ones(self.n + 1)
        axis[[0, -1]] = 0.5
        return np.outer(axis, axis) * self.spacing ** 2

    def interior_index(self, vertex: Tuple[int, int]) -> int:
        i, j = int(vertex[0]), int(vertex[1])
        if not (0 < i < self.n and 0 < j < self.n):
            raise KernelDomainError(f"vertex {vertex} is not an interior lattice point")
        return (i - 1) * (self.n - 1) + (j - 1)


def _lattice_operator(n: int) -> sparse.csc_matrix:
    """4I - A on the (n-1)^2 interior vertices, row-major."""
    m = n - 1
    path = sparse.diags([-np.ones(m - 1), 2.0 * np.ones(m), -np.ones(m - 1)], [-1, 0, 1])
    identity = sparse.identity(m)
    return sparse.csc_matrix(sparse.kron(path, identity) + sparse.kron(identity, path))


def dgff_green(lattice: SquareLattice, x: Tuple[int, int], y: Tuple[int, int]) -> float:
    """2 pi x Green function of the continuum-normalized lattice Laplacian, by a sparse solve."""
    ix, iy = lattice.interior_index(x), lattice.interior_index(y)
    rhs = np.zeros(lattice.n_interior)
    rhs[iy] = 2.0 * math.pi
    column = spsolve(_lattice_operator(lattice.n), rhs)
    return float(np.atleast_1d(column)[ix])


@lru_cache(maxsize=8)
def dgff_green_matrix(lattice: SquareLattice) -> np.ndarray:
    """Dense interior covariance 2 pi (4I - A)^{-1}; read-only."""
    if lattice.n_interior > DENSE_CAP:
        raise PreconditionError(
            f"dense lattice Green matrix limited to {DENSE_CAP} interior vertices, got {lattice.n_interior}"
        )
    operator = _lattice_operator(lattice.n).toarray()
    matrix = solve(operator, 2.0 * math.pi * np.eye(lattice.n_interior), assume_a="pos")
    matrix = 0.5 * (matrix + matrix.T)
    matrix.setflags(write=False)
    logger.info(f"Solved lattice Green matrix for n={lattice.n} ({lattice.n_interior} interior vertices)")
    return matrix


# ---- Kernel Evaluators ----

@dataclass(frozen=True)
class IsotropicEvaluator:
    """Adapts a profile r -> K(r) to the (P, d), (Q, d) -> (P, Q) evaluator form."""

    profile: Callable

    def __call__(self, points_a: np.ndarray, points_b: np.ndarray) -> np.ndarray:
        distances = cdist(np.atleast_2d(points_a), np.atleast_2d(points_b))
        return np.asarray(self.profile(distances), dtype=float)


def isotropic(profile: Callable) -> IsotropicEvaluator:
    return IsotropicEvaluator(profile)


@dataclass(frozen=True)
class ModalEvaluator:
    """Green-family kernel on point pairs through the truncated sine series."""

    spec: KernelSpec
    cutoff: float = 0.0

    def __call__(self, points_a: np.ndarray, points_b: np.ndarray) -> np.ndarray:
        a, b = np.atleast_2d(points_a), np.atleast_2d(points_b)
        mass = self.spec.mass if self.spec.family == KernelFamily.MASSIVE_GREEN else 0.0
        weights = green_mode_weights(self.spec.domain_extents, self.spec.n_modes, self.cutoff, mass=mass)
        xs = np.repeat(a, len(b), axis=0)
        ys = np.tile(b, (len(a), 1))
        return modal_pair_sum(self.spec.domain_extents, xs, ys, weights).reshape(len(a), len(b))


def kernel_evaluator(spec: KernelSpec, cutoff: Optional[float] = None) -> Callable:
    """Evaluator for the (cutoff) kernel of a spec, suitable for assemble_covariance_matrix."""
    if spec.family == KernelFamily.EXACT_LOG:
        if cutoff is None:
            return IsotropicEvaluator(partial(exact_log_profile, spec))
        return IsotropicEvaluator(partial(exact_log_cutoff, spec, eps=cutoff))
    if spec.family == KernelFamily.STAR_SCALE:
        if cutoff is None:
            raise ParameterError("star kernel evaluator needs a cutoff")
        return IsotropicEvaluator(partial(star_cutoff_kernel, spec, eps=cutoff))
    if spec.family in GREEN_FAMILIES:
        return ModalEvaluator(spec=spec, cutoff=cutoff or 0.0)
    raise ParameterError(f"no pointwise evaluator for {spec.family.value}; use the dedicated routine")


# ---- Covariance Assembly ----

_jitter_lock = threading.Lock()
_jitter_events: List[Dict[str, object]] = []


def record_jitter_event(label: str, jitter: float, size: int) -> None:
    with _jitter_lock:
        _jitter_events.append({"label": label, "jitter": float(jitter), "size": int(size)})


def drain_jitter_events() -> List[Dict[str, object]]:
    """Returns and clears the jitter events recorded so far."""
    with _jitter_lock:
        events = list(_jitter_events)
        _jitter_events.clear()
    return events


@dataclass(frozen=True)
class JitterPolicy:
    ladder: Tuple[float, ...] = (1e-12, 1e-10, 1e-8)


@dataclass(frozen=True)
class CovarianceMatrix:
    points: np.ndarray
    entries: np.ndarray = field(repr=False)
    jitter_applied: float
    factor: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.entries)


def _freeze(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


def factor_covariance(
    entries: np.ndarray, jitter_policy: JitterPolicy = JitterPolicy(), label: str = "covariance"
) -> Tuple[np.ndarray, float]:
    """Lower Cholesky factor, climbing the jitter ladder on failure."""
    entries = 0.5 * (entries + entries.T)
    try:
        return cholesky(entries, lower=True), 0.0
    except LinAlgError:
        pass
    scale = float(np.mean(np.diag(entries)))
    identity = np.eye(entries.shape[0])
    for rung in jitter_policy.ladder:
        jitter = rung * scale
        if jitter <= 0:
            break
        try:
            factor = cholesky(entries + jitter * identity, lower=True)
        except LinAlgError:
            continue
        logger.warning(f"Applied diagonal jitter {jitter:.3e} to {label} ({entries.shape[0]} points)")
        record_jitter_event(label, jitter, entries.shape[0])
        return factor, jitter
    min_eigenvalue = float(eigvalsh(entries, subset_by_index=[0, 0])[0])
    raise NotPositiveDefiniteError(
        f"kernel not numerically PSD: most negative eigenvalue {min_eigenvalue:.3e}", min_eigenvalue
    )


def assemble_covariance_matrix(
    kernel: Callable,
    points,
    jitter_policy: JitterPolicy = JitterPolicy(),
    label: str = "covariance",
) -> CovarianceMatrix:
    """Symmetric kernel matrix on a point set, factored with the smallest jitter that succeeds."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    n_distinct = np.unique(pts, axis=0).shape[0]
    if n_distinct < pts.shape[0]:
        raise PreconditionError(f"{label}: {pts.shape[0] - n_distinct} duplicate point(s) in the point set")
    entries = np.asarray(kernel(pts, pts), dtype=float)
    entries = 0.5 * (entries + entries.T)
    factor, jitter = factor_covariance(entries, jitter_policy, label)
    return CovarianceMatrix(
        points=_freeze(pts), entries=_freeze(entries), jitter_applied=jitter, factor=_freeze(factor)
    )
