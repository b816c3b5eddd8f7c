import logging
import math

import numpy as np
import pytest
from scipy.special import erf, gamma as gamma_function

from gmc.chaos import (
    AtomicMeasure,
    Regime,
    ball_mass_field,
    build_atomic_direct,
    build_atomic_subordinated,
    build_derivative,
    build_discrete_liouville,
    build_frozen_renormalized,
    build_seneta_heyde,
    build_subcritical,
    cell_rows,
    default_z_min,
    dual_parameters,
    hopf_cole_burgers,
    measure_record,
    multifractal_random_walk,
    sample_rooted_point,
    sample_stable_scatter,
    subcell_quadrature_check,
    truncated_laplace_exponent,
    weighted_z_min,
)
from gmc.errors import ParameterError, PreconditionError
from gmc.fields import DGFFSampler, FieldRealization, GridDomain
from gmc.kernels import SquareLattice
from gmc.utils import derive_rng


def flat_field(dimension=1, points=8, cutoff=0.25, variance=1.0, construction="dense"):
    grid = GridDomain.unit(dimension, points)
    return FieldRealization(
        grid=grid, values=np.zeros(grid.shape), cutoff=cutoff, variance=variance, construction=construction
    )


@pytest.mark.unit
class TestSubcriticalChaos:
    """Test the subcritical exponential construction"""

    def test_zero_field_mass(self):
        """A zero field gives cell masses h exp(-gamma^2 Var / 2)"""
        measure = build_subcritical(flat_field(), gamma=1.0)
        np.testing.assert_allclose(measure.cell_masses, math.exp(-0.5) / 8.0)
        assert measure.regime == Regime.SUBCRITICAL

    def test_gamma_zero_is_lebesgue(self):
        """gamma = 0 recovers the cell volumes"""
        measure = build_subcritical(flat_field(dimension=2, points=4), gamma=0.0)
        assert measure.total_mass == pytest.approx(1.0)

    def test_vanishing_tag(self):
        """gamma^2 >= 2d is tagged Vanishing"""
        assert build_subcritical(flat_field(), gamma=1.5).regime == Regime.VANISHING

    def test_negative_gamma(self):
        """Negative gamma is a parameter error"""
        with pytest.raises(ParameterError):
            build_subcritical(flat_field(), gamma=-0.1)

    def test_missing_variance(self):
        """A field without a variance profile cannot be normalized"""
        grid = GridDomain.unit(1, 4)
        field = FieldRealization(grid=grid, values=np.zeros(4), cutoff=0.25)
        with pytest.raises(PreconditionError):
            build_subcritical(field, gamma=0.5)

    def test_masses_read_only(self):
        """Cell masses are frozen"""
        measure = build_subcritical(flat_field(), gamma=0.5)
        with pytest.raises(ValueError):
            measure.cell_masses[0] = 1.0


@pytest.mark.unit
class TestCriticalChaos:
    """Test the derivative and Seneta-Heyde constructions"""

    def test_derivative_on_zero_field(self):
        """Cells carry h gamma Var exp(-d Var) at X = 0"""
        measure = build_derivative(flat_field())
        expected = math.sqrt(2.0) * math.exp(-1.0) / 8.0
        np.testing.assert_allclose(measure.cell_masses, expected)
        assert measure.regime == Regime.CRITICAL_DERIVATIVE
        assert measure.negative_fraction == 0.0

    def test_derivative_negative_cells(self):
        """Large field values make the derivative martingale negative"""
        grid = GridDomain.unit(1, 4)
        field = FieldRealization(grid=grid, values=np.array([0.0, 5.0, 0.0, 0.0]), cutoff=0.25, variance=1.0)
        measure = build_derivative(field)
        assert measure.negative_cells == 1
        assert 0.0 < measure.negative_fraction < 1.0

    def test_seneta_heyde_norming(self):
        """Masses carry sqrt(ln 1/eps)"""
        measure = build_seneta_heyde(flat_field(cutoff=0.25))
        expected = math.sqrt(math.log(4.0)) * math.exp(-1.0) / 8.0
        np.testing.assert_allclose(measure.cell_masses, expected)
        assert np.all(measure.cell_masses >= 0)

    def test_seneta_heyde_needs_small_cutoff(self):
        """Cutoffs outside (0, 1) have no norming"""
        with pytest.raises(PreconditionError):
            build_seneta_heyde(flat_field(cutoff=1.0))

    def test_circle_average_rejected(self):
        """Critical constructions refuse circle-average fields"""
        field = flat_field(dimension=2, points=8, construction="circle-average(gff-whitenoise)")
        with pytest.raises(PreconditionError):
            build_derivative(field)
        with pytest.raises(PreconditionError):
            build_seneta_heyde(field)

    def test_frozen_needs_supercritical(self):
        """Frozen renormalization starts above sqrt(2d)"""
        with pytest.raises(ParameterError):
            build_frozen_renormalized(flat_field(), gamma=1.0)

    def test_frozen_factor(self):
        """Frozen masses carry c^(3 gamma / (2 sqrt 2d)) exp(c (gamma/sqrt 2 - sqrt d)^2)"""
        gamma = 2.0
        measure = build_frozen_renormalized(flat_field(variance=2.0), gamma=gamma)
        log_factor = 3.0 * gamma / (2.0 * math.sqrt(2.0)) * math.log(2.0) + 2.0 * (gamma / math.sqrt(2.0) - 1.0) ** 2
        expected = math.exp(-0.5 * gamma ** 2 * 2.0 + log_factor) / 8.0
        np.testing.assert_allclose(measure.cell_masses, expected, rtol=1e-12)
        assert measure.regime == Regime.FROZEN_RENORMALIZED


@pytest.mark.unit
class TestAtomicChaos:
    """Test stable scatters and atomic chaos"""

    def setup_method(self):
        """Set up a Lebesgue base measure on [0, 1]"""
        self.base = build_subcritical(flat_field(points=8), gamma=0.0)

    def test_dual_parameters(self):
        """alpha gamma_bar^2 = 2d and alpha gamma_bar = gamma"""
        gamma_bar, alpha = dual_parameters(1.0, 1)
        assert (gamma_bar, alpha) == pytest.approx((2.0, 0.5))
        assert alpha * gamma_bar ** 2 == pytest.approx(2.0)
        with pytest.raises(ParameterError):
            dual_parameters(0.0, 1)
        with pytest.raises(ParameterError):
            dual_parameters(2.0, 1)

    def test_laplace_exponent_small_threshold(self):
        """As z_min -> 0 the exponent approaches Gamma(1 - alpha) q^alpha / alpha"""
        alpha, q = 0.5, 2.0
        closed = gamma_function(1.0 - alpha) * q ** alpha / alpha
        assert truncated_laplace_exponent(q, alpha, 1e-10) == pytest.approx(closed, rel=1e-4)

    def test_laplace_exponent_parameters(self):
        """alpha outside (0, 1) or q < 0 are rejected"""
        with pytest.raises(ParameterError):
            truncated_laplace_exponent(1.0, 1.0, 1e-3)
        with pytest.raises(ParameterError):
            truncated_laplace_exponent(-1.0, 0.5, 1e-3)

    def test_default_threshold_meets_deficit_target(self):
        """Default z_min keeps the deficit at 1e-3 of the base mass"""
        z_min = default_z_min(0.5, 1.0)
        assert z_min == pytest.approx((1e-3 * 0.5) ** 2)

    def test_scatter_atoms(self):
        """Atoms lie above z_min and inside their cells"""
        cell_index, locations, weights = sample_stable_scatter(
            self.base.grid, np.ones(8), 0.5, 0.01, derive_rng(3)
        )
        assert abs(weights.size - 160) <= 63
        assert np.all(weights >= 0.01)
        lower = cell_index / 8.0
        assert np.all(locations[:, 0] >= lower) and np.all(locations[:, 0] <= lower + 1.0 / 8.0)

    def test_subordinated_needs_rng(self):
        """Sampling without a generator is refused"""
        with pytest.raises(ParameterError):
            build_atomic_subordinated(self.base, 0.5)

    def test_subordinated_measure(self):
        """Subordinated measure records its provenance and deficit"""
        atomic = build_atomic_subordinated(self.base, 0.5, rng=derive_rng(1))
        assert isinstance(atomic, AtomicMeasure)
        assert atomic.provenance.startswith("subordinated")
        assert atomic.total_mass > 0
        assert atomic.deficit_bound == pytest.approx(1e-3, rel=1e-9)
        assert atomic.cell_masses().sum() == pytest.approx(atomic.total_mass)

    @pytest.mark.statistical
    def test_conditional_laplace_transform(self):
        """E exp(-q M) matches exp(-M_base psi(q)) for the truncated scatter"""
        alpha, q = 0.5, 1.0
        z_min = default_z_min(alpha, self.base.total_mass)
        rng = derive_rng(2024)
        values = np.array([
            math.exp(-q * build_atomic_subordinated(self.base, alpha, z_min=z_min, rng=rng).total_mass)
            for _ in range(2000)
        ])
        expected = math.exp(-self.base.total_mass * truncated_laplace_exponent(q, alpha, z_min))
        stderr = values.std(ddof=1) / math.sqrt(values.size)
        assert abs(values.mean() - expected) <= 4.0 * stderr

    def test_direct_needs_supercritical_gamma_bar(self):
        """Direct route needs gamma_bar^2 > 2d"""
        with pytest.raises(ParameterError):
            build_atomic_direct(flat_field(), gamma_bar=1.0, alpha=0.5, rng=derive_rng(0))

    def test_direct_reuses_scatter(self):
        """gamma_bar = 0 reproduces the bare scatter; nonzero gamma_bar reweights it"""
        field = flat_field()
        bare = build_atomic_direct(field, gamma_bar=0.0, alpha=0.5, rng=derive_rng(5))
        tilted = build_atomic_direct(field, gamma_bar=2.0, alpha=0.5, scatter=bare)
        np.testing.assert_array_equal(tilted.cell_index, bare.cell_index)
        np.testing.assert_allclose(tilted.weights, bare.weights * math.exp(-0.5 * 0.5 * 4.0))
        with pytest.raises(ParameterError):
            build_atomic_direct(field, gamma_bar=2.0, alpha=0.4, scatter=bare)

    def test_weighted_threshold_for_flat_landscape(self):
        """A flat landscape gives the default threshold"""
        volumes = np.full(8, 1.0 / 8.0)
        assert weighted_z_min(0.5, volumes, np.ones(8)) == pytest.approx(default_z_min(0.5, 1.0))


@pytest.mark.unit
class TestSubcellQuadrature:
    """Test the sub-cell check of the one-point quadrature"""

    def setup_method(self):
        """Set up a smooth and an alternating field on 64 cells"""
        grid = GridDomain.unit(1, 64)
        x = grid.points()[:, 0]
        self.smooth = FieldRealization(grid=grid, values=np.sin(2.0 * np.pi * x), cutoff=1.0 / 32.0, variance=1.0)
        signs = np.where(np.arange(64) % 2 == 0, 1.0, -1.0)
        self.rough = FieldRealization(grid=grid, values=signs, cutoff=1.0 / 32.0, variance=1.0)

    def test_flat_field_agrees_exactly(self):
        """Constant fields give the same mass at every quadrature point"""
        check = subcell_quadrature_check(flat_field(dimension=2, points=8), gamma=1.0)
        assert check.relative_difference == pytest.approx(0.0, abs=1e-12)
        assert check.one_point_mass == pytest.approx(math.exp(-0.5))

    def test_smooth_field_within_one_percent(self):
        """A field smooth on the cell scale passes at the default tolerance"""
        check = subcell_quadrature_check(self.smooth, gamma=1.0)
        assert check.tolerance == 0.01
        assert check.passed
        assert check.relative_difference < 1e-3

    def test_smooth_plane_field(self):
        """Four points per cell in the plane on a slowly varying field"""
        grid = GridDomain.unit(2, 32)
        points = grid.points()
        values = (np.cos(np.pi * points[:, 0]) * np.sin(np.pi * points[:, 1])).reshape(grid.shape)
        field = FieldRealization(grid=grid, values=values, cutoff=1.0 / 16.0, variance=np.full(grid.shape, 0.5))
        assert subcell_quadrature_check(field, gamma=0.8).passed

    def test_rough_field_fails(self):
        """Alternating cell values are not resolved by one point per cell"""
        check = subcell_quadrature_check(self.rough, gamma=1.0)
        assert check.relative_difference > 0.05
        assert not check.passed

    def test_needs_cell_centred_grid(self):
        """Lattice fields have no cells to subdivide"""
        field = DGFFSampler(SquareLattice(4)).sample(0, 0)
        with pytest.raises(PreconditionError):
            subcell_quadrature_check(field, gamma=1.0)

    def test_runs_in_debug_mode(self, caplog):
        """build_subcritical logs the check only when debug logging is on"""
        caplog.set_level(logging.INFO, logger="gmc.chaos")
        build_subcritical(self.smooth, gamma=1.0)
        assert "Sub-cell quadrature" not in caplog.text
        caplog.set_level(logging.DEBUG, logger="gmc.chaos")
        build_subcritical(self.smooth, gamma=1.0)
        assert "Sub-cell quadrature" in caplog.text

    def test_debug_mode_warns_on_rough_field(self, caplog):
        """A failed check is raised to a warning"""
        caplog.set_level(logging.DEBUG, logger="gmc.chaos")
        build_subcritical(self.rough, gamma=1.0)
        assert any(r.levelno == logging.WARNING and "Sub-cell" in r.getMessage() for r in caplog.records)


@pytest.mark.unit
class TestDiscreteLiouville:
    """Test the lattice Liouville measure"""

    def setup_method(self):
        """Set up one DGFF sample"""
        self.field = DGFFSampler(SquareLattice(8)).sample(0, 0)

    def test_boundary_carries_lebesgue_mass(self):
        """The field vanishes on the boundary, so boundary vertices keep exactly their weight"""
        measure = build_discrete_liouville(self.field, gamma=1.0)
        np.testing.assert_allclose(measure.cell_masses[0], self.field.grid.cell_volumes()[0])
        assert measure.cell_masses[0, 0] == pytest.approx(1.0 / 256.0)
        assert measure.regime == Regime.SUBCRITICAL

    def test_zero_gamma_mass_is_hull_area(self):
        """gamma = 0 gives total mass equal to the area of the lattice hull"""
        assert build_discrete_liouville(self.field, gamma=0.0).total_mass == pytest.approx(1.0)

    def test_critical_flag(self):
        """The critical flag forces gamma = 2 with the Seneta-Heyde tag"""
        measure = build_discrete_liouville(self.field, gamma=1.0, critical=True)
        assert measure.gamma == 2.0
        assert measure.regime == Regime.CRITICAL_SENETA_HEYDE

    def test_needs_lattice(self):
        """Continuum fields are refused"""
        with pytest.raises(PreconditionError):
            build_discrete_liouville(flat_field(dimension=2), gamma=1.0)


@pytest.mark.unit
class TestHopfCole:
    """Test the Hopf-Cole Burgers functional"""

    def test_zero_potential(self):
        """Zero potential integrates the heat kernel over [0, 1]"""
        potential = FieldRealization(grid=GridDomain.unit(1, 64), values=np.zeros(64), cutoff=1.0 / 32.0)
        partition, velocity = hopf_cole_burgers(potential, nu=1.0, t=1.0, x_eval=[0.5])
        assert partition[0] == pytest.approx(erf(0.25), abs=1e-4)
        assert abs(velocity[0]) < 1e-10

    def test_parameters(self):
        """nu and t must be positive; potentials must be one-dimensional"""
        potential = FieldRealization(grid=GridDomain.unit(1, 8), values=np.zeros(8), cutoff=0.25)
        with pytest.raises(ParameterError):
            hopf_cole_burgers(potential, nu=0.0, t=1.0, x_eval=[0.5])
        with pytest.raises(PreconditionError):
            hopf_cole_burgers(flat_field(dimension=2), nu=1.0, t=1.0, x_eval=[0.5])


@pytest.mark.unit
class TestMeasureTools:
    """Test rooted sampling, ball masses, the MRW and records"""

    def test_rooted_point_follows_mass(self):
        """All mass in one cell roots the point there"""
        field = flat_field(points=8)
        weights = np.zeros(8)
        weights[5] = 1.0
        measure = build_subcritical(field, gamma=0.0, weights=weights)
        rooted = sample_rooted_point(measure, derive_rng(0))
        assert rooted.cell == (5,)
        assert 5.0 / 8.0 <= rooted.point[0] <= 6.0 / 8.0

    def test_rooted_needs_mass(self):
        """Zero measures cannot be rooted"""
        measure = build_subcritical(flat_field(), gamma=0.0, weights=np.zeros(8))
        with pytest.raises(PreconditionError):
            sample_rooted_point(measure, derive_rng(0))

    def test_ball_masses(self):
        """Balls of radius h cover three cells in the interior"""
        masses = np.ones(16)
        np.testing.assert_allclose(ball_mass_field(masses, 1.0 / 16.0, 0.0), 1.0, atol=1e-12)
        np.testing.assert_allclose(ball_mass_field(masses, 1.0 / 16.0, 1.0 / 16.0)[1:-1], 3.0, atol=1e-12)

    def test_random_walk_length(self):
        """One MRW value per cell"""
        measure = build_subcritical(flat_field(points=16), gamma=0.5)
        assert multifractal_random_walk(measure, derive_rng(0)).shape == (16,)

    def test_random_walk_needs_one_dimension(self):
        """The MRW is defined on the line"""
        measure = build_subcritical(flat_field(dimension=2, points=4), gamma=0.5)
        with pytest.raises(PreconditionError):
            multifractal_random_walk(measure, derive_rng(0))

    @pytest.mark.statistical
    def test_random_walk_variance(self):
        """E B(M[0, 1])^2 equals the total mass"""
        measure = build_subcritical(flat_field(points=16), gamma=0.5)
        finals = np.array([multifractal_random_walk(measure, derive_rng(9, r))[-1] for r in range(4000)])
        squares = finals ** 2
        stderr = squares.std(ddof=1) / math.sqrt(squares.size)
        assert abs(squares.mean() - measure.total_mass) <= 4.0 * stderr

    def test_records(self):
        """Records and per-cell rows describe the measure"""
        measure = build_subcritical(flat_field(points=4), gamma=0.5)
        record = measure_record(measure, replica=3)
        assert record["replica"] == 3
        assert record["regime"] == "Subcritical"
        assert record["total_mass"] == pytest.approx(measure.total_mass)
        rows = cell_rows(measure)
        assert len(rows) == 4
        assert rows[0][1] == pytest.approx(0.125)
