import math

import numpy as np
import pytest

from gmc.errors import GridSizeError, ParameterError, PreconditionError
from gmc.fields import (
    CircleAverageSampler,
    CutoffLadder,
    DenseFieldSampler,
    DGFFSampler,
    FieldRealization,
    GFFModalSampler,
    GridDomain,
    RefinementSampler,
    circle_average,
    cutoff_consistency_check,
    dump_field,
    effective_cutoff_for_modes,
    load_field,
    sample_dgff,
    sample_gaussian_on_grid,
    sample_gff_eigen,
    sample_gff_whitenoise,
    sample_refinement_sequence,
    smoothness_check,
)
from gmc.kernels import (
    KernelFamily,
    KernelSpec,
    SquareLattice,
    exact_log_band_decomposition,
    exact_log_cutoff,
    heat_kernel_green_band,
    kernel_evaluator,
)
from gmc.utils import derive_rng


@pytest.mark.unit
class TestGridDomain:
    """Test grid geometry"""

    def test_power_of_two_required(self):
        """Points per axis must be a power of two"""
        with pytest.raises(GridSizeError):
            GridDomain.unit(1, 48)

    def test_size_cap(self):
        """Grids beyond the refinement cap are rejected"""
        with pytest.raises(GridSizeError):
            GridDomain.unit(2, 2048)

    def test_cell_centres_and_volumes(self):
        """Cell centres sit mid-cell; volumes sum to the domain volume"""
        grid = GridDomain(extents=(2.0, 1.0), points_per_axis=4)
        assert grid.points().shape == (16, 2)
        assert grid.points()[0] == pytest.approx([0.25, 0.125])
        assert grid.cell_volumes().sum() == pytest.approx(grid.volume)
        assert grid.spacing == pytest.approx(0.5)


@pytest.mark.unit
class TestCutoffLadder:
    """Test cutoff ladders"""

    def test_dyadic(self):
        """Dyadic ladders halve at each level"""
        ladder = CutoffLadder.dyadic(0.25, 3)
        assert ladder.cutoffs == (0.25, 0.125, 0.0625)
        assert ladder.finest == 0.0625
        assert len(ladder) == 3

    def test_must_decrease(self):
        """Non-decreasing ladders are rejected"""
        with pytest.raises(ParameterError):
            CutoffLadder((0.1, 0.2))
        with pytest.raises(ParameterError):
            CutoffLadder(())

    def test_finest_resolved_by_grid(self):
        """The finest cutoff must be at least twice the spacing"""
        with pytest.raises(GridSizeError):
            CutoffLadder.dyadic(0.25, 4).check_grid(GridDomain.unit(1, 16))
        CutoffLadder.dyadic(0.25, 3).check_grid(GridDomain.unit(1, 32))


@pytest.mark.unit
class TestFieldRealization:
    """Test field realization invariants"""

    def test_values_read_only(self):
        """Stored values are frozen copies"""
        values = np.zeros(4)
        realization = FieldRealization(grid=GridDomain.unit(1, 4), values=values, cutoff=0.5)
        values[0] = 1.0
        assert realization.values[0] == 0.0
        with pytest.raises(ValueError):
            realization.values[0] = 2.0

    def test_non_finite_rejected(self):
        """NaN or infinite values are precondition failures"""
        with pytest.raises(PreconditionError):
            FieldRealization(grid=GridDomain.unit(1, 2), values=np.array([0.0, np.inf]), cutoff=0.5)

    def test_scalar_variance_broadcast(self):
        """A scalar variance broadcasts to the field shape"""
        realization = FieldRealization(grid=GridDomain.unit(1, 4), values=np.zeros(4), cutoff=0.5, variance=2.0)
        assert realization.variance.shape == (4,)


@pytest.mark.unit
class TestDenseSampler:
    """Test dense Cholesky sampling"""

    def setup_method(self):
        """Set up a small exact-log sampler"""
        self.spec = KernelSpec(family=KernelFamily.EXACT_LOG)
        self.grid = GridDomain.unit(1, 32)
        self.sampler = DenseFieldSampler.from_kernel(kernel_evaluator(self.spec, 1.0 / 16.0), self.grid, 1.0 / 16.0)

    def test_deterministic_by_seed(self):
        """Same seed and replica give identical fields"""
        first = self.sampler.sample(7, 3)
        second = self.sampler.sample(7, 3)
        np.testing.assert_array_equal(first.values, second.values)
        assert first.lineage == (7, 3, 0)

    def test_replicas_differ(self):
        """Different replicas draw different noise"""
        assert not np.array_equal(self.sampler.sample(7, 0).values, self.sampler.sample(7, 1).values)

    def test_variance_is_kernel_diagonal(self):
        """Variance profile is the cutoff kernel at zero distance"""
        variance = self.sampler.sample(0, 0).variance
        np.testing.assert_allclose(variance, float(exact_log_cutoff(self.spec, 0.0, 1.0 / 16.0)))

    def test_dense_cap(self):
        """Dense sampling refuses grids beyond the cap"""
        with pytest.raises(GridSizeError):
            DenseFieldSampler.from_kernel(kernel_evaluator(self.spec, 0.1), GridDomain.unit(1, 16384), 0.1)


class TestRefinementSampler:
    """Test refinement sequences from sigma-positive decompositions"""

    def setup_method(self):
        """Set up a three-level exact-log ladder on 32 points"""
        self.spec = KernelSpec(family=KernelFamily.EXACT_LOG)
        self.grid = GridDomain.unit(1, 32)
        self.decomposition = exact_log_band_decomposition(self.spec, [0.25, 0.125, 0.0625])
        self.sampler = RefinementSampler(self.decomposition, self.grid)

    @pytest.mark.unit
    def test_ladder_shape(self):
        """One realization per level with increasing variance"""
        ladder = self.sampler.sample_ladder(1, 0)
        assert ladder.cutoffs == (0.25, 0.125, 0.0625)
        assert ladder.independent_increments
        variances = [float(level.variance[0]) for level in ladder.levels]
        assert variances == sorted(variances)
        assert variances[-1] == pytest.approx(float(exact_log_cutoff(self.spec, 0.0, 0.0625)))

    @pytest.mark.unit
    def test_increments_sum_to_finest(self):
        """Increments telescope back to the finest level"""
        ladder = self.sampler.sample_ladder(1, 0)
        np.testing.assert_allclose(sum(ladder.increments()), ladder.finest.values, atol=1e-12)

    @pytest.mark.unit
    def test_coarse_levels_are_nested(self):
        """Coarser levels are partial sums of the same draws"""
        ladder = self.sampler.sample_ladder(2, 5)
        fewer = RefinementSampler(self.decomposition, self.grid, n_levels=2).sample_ladder(2, 5)
        np.testing.assert_allclose(fewer.finest.values, ladder.levels[1].values, atol=1e-12)

    @pytest.mark.unit
    def test_rng_route(self):
        """Generator-driven sampling gives the requested number of levels"""
        ladder = sample_refinement_sequence(self.decomposition, self.grid, 2, derive_rng(0))
        assert len(ladder.levels) == 2

    @pytest.mark.unit
    def test_too_many_levels(self):
        """Requesting more levels than the decomposition holds fails"""
        with pytest.raises(ParameterError):
            RefinementSampler(self.decomposition, self.grid, n_levels=4)

    @pytest.mark.unit
    def test_dimension_mismatch(self):
        """Grid and kernel dimensions must agree"""
        with pytest.raises(PreconditionError):
            RefinementSampler(self.decomposition, GridDomain.unit(2, 8))

    @pytest.mark.statistical
    def test_empirical_variance(self):
        """Pointwise sample variance matches the analytic cutoff variance"""
        draws = np.array([self.sampler.sample(11, r).values[10] for r in range(2000)])
        expected = float(exact_log_cutoff(self.spec, 0.0, 0.0625))
        assert np.mean(draws ** 2) == pytest.approx(expected, rel=0.12)

    @pytest.mark.statistical
    def test_smoothness_of_cutoff_field(self):
        """Structure function grows like a positive power of |x - y|/eps"""
        grid = GridDomain.unit(1, 64)
        decomposition = exact_log_band_decomposition(self.spec, [0.25, 0.125, 0.0625, 0.03125])
        report = smoothness_check(RefinementSampler(decomposition, grid), n_replicas=8, master_seed=3)
        assert report.rows
        assert 0.5 < report.alpha_hat < 1.5
        assert report.c_hat > 0

    @pytest.mark.statistical
    def test_cutoff_consistency_constants(self):
        """One constant per pair of successive levels"""
        pairs = [((10,), (12,)), ((20,), (20,))]
        report = cutoff_consistency_check(self.sampler, n_replicas=8, pairs=pairs)
        assert len(report.constants) == 2
        assert report.spread >= 0.0


@pytest.mark.unit
class TestGFFModalSampler:
    """Test white-noise and eigen GFF sampling on the unit square"""

    def setup_method(self):
        """Set up a 16 x 16 grid and the Dirichlet domain"""
        self.domain = KernelSpec(family=KernelFamily.GREEN_DIRICHLET_RECTANGLE, dimension=2)
        self.grid = GridDomain.unit(2, 16)
        self.ladder = CutoffLadder.dyadic(0.5, 3)

    def test_whitenoise_variance_matches_heat_band(self):
        """Summed band variances equal the heat-kernel band at the finest cutoff"""
        sampler = GFFModalSampler(self.domain, self.grid, ladder=self.ladder)
        i, j = 5, 9
        x = (self.grid.axis_coordinates(0)[i], self.grid.axis_coordinates(1)[j])
        expected = heat_kernel_green_band(self.domain, 0.125, x, x, n_modes=16)
        assert sampler.variances[-1][i, j] == pytest.approx(expected, rel=1e-10)

    def test_ladder_has_independent_increments(self):
        """White-noise ladders expose one level per cutoff"""
        ladder = GFFModalSampler(self.domain, self.grid, ladder=self.ladder).sample_ladder(0, 0)
        assert ladder.independent_increments
        assert ladder.cutoffs == self.ladder.cutoffs
        assert ladder.finest.construction == "gff-whitenoise"

    def test_eigen_route(self):
        """Eigen route has a single level and no independent increments"""
        sampler = GFFModalSampler(self.domain, self.grid, n_modes=8, route="eigen")
        ladder = sampler.sample_ladder(0, 0)
        assert len(ladder.levels) == 1
        assert not ladder.independent_increments

    def test_eigen_modes_limited_by_grid(self):
        """More modes than grid points per axis is a grid error"""
        with pytest.raises(GridSizeError):
            GFFModalSampler(self.domain, self.grid, n_modes=32, route="eigen")

    def test_needs_green_domain(self):
        """Only Green-family domains are accepted"""
        with pytest.raises(ParameterError):
            GFFModalSampler(KernelSpec(family=KernelFamily.EXACT_LOG, dimension=2), self.grid, ladder=self.ladder)

    def test_whitenoise_needs_ladder(self):
        """White-noise route without a ladder is rejected"""
        with pytest.raises(ParameterError):
            GFFModalSampler(self.domain, self.grid)

    def test_effective_cutoff_decreases_with_modes(self):
        """More eigen modes correspond to a finer effective cutoff"""
        coarse = effective_cutoff_for_modes(self.domain, self.grid, 4)
        fine = effective_cutoff_for_modes(self.domain, self.grid, 8)
        assert 0 < fine < coarse

    def test_massive_construction_label(self):
        """Massive domains are labelled as such"""
        massive = KernelSpec(family=KernelFamily.MASSIVE_GREEN, dimension=2, mass=2.0)
        sampler = GFFModalSampler(massive, self.grid, ladder=self.ladder)
        assert sampler.construction == "gff-whitenoise-massive"
        plain = GFFModalSampler(self.domain, self.grid, ladder=self.ladder)
        assert np.all(sampler.variances[-1] < plain.variances[-1])


@pytest.mark.unit
class TestCircleAverage:
    """Test circle averages of a fine field"""

    def setup_method(self):
        """Set up a 32 x 32 grid"""
        self.grid = GridDomain.unit(2, 32)

    def test_constant_field_interior(self):
        """Averages of a constant are that constant away from the boundary"""
        field = FieldRealization(grid=self.grid, values=np.ones(self.grid.shape), cutoff=1.0 / 16.0)
        averaged = circle_average(field, 0.125)
        np.testing.assert_allclose(averaged.values[8:24, 8:24], 1.0, atol=1e-12)
        assert averaged.variance_kind == "empirical"
        assert averaged.variance is None

    def test_radius_resolved(self):
        """Radius must be at least four grid spacings"""
        field = FieldRealization(grid=self.grid, values=np.zeros(self.grid.shape), cutoff=1.0 / 16.0)
        with pytest.raises(GridSizeError):
            circle_average(field, 2.0 / 32.0)

    def test_sampler_calibrates_variance(self):
        """Sampler attaches its calibrated variance profile"""
        domain = KernelSpec(family=KernelFamily.GREEN_DIRICHLET_RECTANGLE, dimension=2)
        base = GFFModalSampler(domain, self.grid, ladder=CutoffLadder((1.0 / 16.0,)))
        sampler = CircleAverageSampler(base, 0.125, calibration_replicas=8, calibration_seed=1)
        realization = sampler.sample(0, 0)
        assert realization.construction.startswith("circle-average")
        assert realization.variance.shape == self.grid.shape
        assert np.all(realization.variance >= 0.0)
        np.testing.assert_allclose(realization.variance, realization.variance.T)


@pytest.mark.unit
class TestDGFFSampler:
    """Test the discrete Gaussian free field"""

    def setup_method(self):
        """Set up an 8 x 8 lattice"""
        self.sampler = DGFFSampler(SquareLattice(8))

    def test_zero_boundary(self):
        """Field and variance vanish on the boundary"""
        realization = self.sampler.sample(0, 0)
        assert realization.values.shape == (9, 9)
        for edge in (realization.values[0], realization.values[-1], realization.values[:, 0], realization.values[:, -1]):
            assert np.all(edge == 0.0)
        assert realization.variance[0, 0] == 0.0
        assert np.all(realization.variance[1:-1, 1:-1] > 0.0)

    def test_deterministic(self):
        """Same seed and replica give identical fields"""
        np.testing.assert_array_equal(self.sampler.sample(4, 2).values, self.sampler.sample(4, 2).values)


@pytest.mark.unit
class TestSamplingFunctions:
    """Test the one-shot sampling functions against their sampler classes"""

    def setup_method(self):
        """Set up the Dirichlet square"""
        self.domain = KernelSpec(family=KernelFamily.GREEN_DIRICHLET_RECTANGLE, dimension=2)
        self.grid = GridDomain.unit(2, 16)

    def test_gaussian_on_grid(self):
        """Values take the grid shape and the variance is the covariance diagonal"""
        grid = GridDomain.unit(1, 32)
        sampler = DenseFieldSampler.from_kernel(kernel_evaluator(KernelSpec(family=KernelFamily.EXACT_LOG), 0.0625), grid, 0.0625)
        realization = sample_gaussian_on_grid(sampler.covariance, derive_rng(1), grid, cutoff=0.0625)
        assert realization.values.shape == (32,)
        np.testing.assert_array_equal(realization.variance, sampler.covariance.diagonal)
        assert realization.construction == "dense"

    def test_whitenoise_matches_sampler(self):
        """Same generator state gives the same ladder as the sampler"""
        ladder = CutoffLadder.dyadic(0.5, 3)
        direct = sample_gff_whitenoise(self.domain, self.grid, ladder, derive_rng(4))
        via_sampler = GFFModalSampler(self.domain, self.grid, ladder=ladder).sample_with_rng(derive_rng(4))
        assert len(direct.levels) == 3
        np.testing.assert_array_equal(direct.finest.values, via_sampler.finest.values)

    def test_eigen_matches_sampler(self):
        """The eigen route returns the finest field of the eigen sampler"""
        field = sample_gff_eigen(self.domain, self.grid, 8, derive_rng(5))
        expected = GFFModalSampler(self.domain, self.grid, n_modes=8, route="eigen").sample_with_rng(derive_rng(5)).finest
        assert field.values.shape == (16, 16)
        np.testing.assert_array_equal(field.values, expected.values)

    def test_dgff(self):
        """A DGFF draw vanishes on the lattice boundary"""
        realization = sample_dgff(SquareLattice(8), derive_rng(6))
        assert realization.values.shape == (9, 9)
        assert np.all(realization.values[0] == 0.0)
        assert np.all(realization.values[:, -1] == 0.0)


@pytest.mark.unit
class TestFieldDump:
    """Test the binary field dump"""

    def test_dump_and_load(self, tmp_path):
        """A dumped field reads back bit for bit"""
        values = np.arange(16, dtype=float).reshape(4, 4) / 3.0
        realization = FieldRealization(grid=GridDomain.unit(2, 4), values=values, cutoff=0.5)
        path = dump_field(realization, tmp_path / "field.gmcf")
        loaded, cutoff = load_field(path)
        np.testing.assert_array_equal(loaded, values)
        assert cutoff == 0.5
        assert path.read_bytes()[:4] == b"GMCF"

    def test_rejects_foreign_file(self, tmp_path):
        """Files without the magic header are refused"""
        path = tmp_path / "other.bin"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(PreconditionError):
            load_field(path)
