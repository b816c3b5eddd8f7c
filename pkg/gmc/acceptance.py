# --- Acceptance battery behind `gmc suite` ---
# Description: the fourteen desk-scale acceptance criteria. Each criterion builds
#              its own samplers at fixed sizes, draws from its own seed block and
#              returns an ExperimentResult; replica counts scale with
#              suite.replica_scale for quick smoke runs.
# -----------------------------------------------------------------

import logging
import math
from typing import Callable, Dict, List

import numpy as np
from scipy.spatial.distance import cdist

from gmc.analysis import (
    approximation_equivalence_test,
    kahane_comparison_test,
    ladder_maxima,
    ladder_total_masses,
    scale_invariance_test,
    second_moment_oracle,
    structure_exponent,
    summarize_degeneracy,
    summarize_maxima,
    tail_exponent_fit,
)
from gmc.chaos import build_subcritical
from gmc.experiments import (
    ExperimentResult,
    run_atomic,
    run_critical,
    run_dgff_converge,
    run_kpz,
    run_xi_fit,
)
from gmc.fields import (
    CircleAverageSampler,
    CutoffLadder,
    DenseFieldSampler,
    GFFModalSampler,
    GridDomain,
    RefinementSampler,
    effective_cutoff_for_modes,
)
from gmc.kernels import (
    KernelFamily,
    KernelSpec,
    SeedCovariance,
    exact_log_band_decomposition,
    exact_log_cutoff,
    kernel_evaluator,
    star_band_decomposition,
)
from gmc.utils import run_replicas
from gmc.validation_models import Construction, ExperimentConfig, ExperimentKind
from gmc.validation_models.experiment_model import GridBlock, LadderBlock, ParametersBlock

logger = logging.getLogger(__name__)

SEED_BLOCK = 1000
MIN_REPLICAS = 20

EXACT_LOG_1D = KernelSpec(family=KernelFamily.EXACT_LOG, dimension=1)
STAR_1D = KernelSpec(family=KernelFamily.STAR_SCALE, dimension=1, seed=SeedCovariance.KAHANE)
GFF_SQUARE = KernelSpec(family=KernelFamily.GREEN_DIRICHLET_RECTANGLE, dimension=2)


def _scaled(n: int, scale: float, floor: int = MIN_REPLICAS) -> int:
    return max(floor, int(round(n * scale)))


def _config(kind: ExperimentKind, kernel: KernelSpec, construction: Construction, points: int, coarsest: float,
            n_levels: int, n_replicas: int, master_seed: int, **parameters) -> ExperimentConfig:
    return ExperimentConfig(
        kind=kind, kernel=kernel, construction=construction, grid=GridBlock(points_per_axis=points),
        ladder=LadderBlock(coarsest=coarsest, n_levels=n_levels), parameters=ParametersBlock(**parameters),
        n_replicas=n_replicas, master_seed=master_seed,
    )


def _keep(result: ExperimentResult, *prefixes: str) -> ExperimentResult:
    result.checks = [c for c in result.checks if c.name.startswith(prefixes)]
    return result


# ---- Replica Tasks ----

def _total_mass_task(task) -> float:
    construction, master_seed, replica, gamma = task
    return build_subcritical(construction.sample(master_seed, replica), gamma).total_mass


def _ladder_totals_task(task) -> np.ndarray:
    construction, master_seed, replica, gammas = task
    return ladder_total_masses(construction.sample_ladder(master_seed, replica), gammas)


def _box_measure_task(task):
    construction, master_seed, replica, gamma = task
    return build_subcritical(construction.sample(master_seed, replica), gamma)


def _ladder_summary_task(task):
    construction, master_seed, replica, gammas = task
    ladder = construction.sample_ladder(master_seed, replica)
    return ladder_total_masses(ladder, gammas), ladder_maxima(ladder)


# ---- Criteria ----

def second_moment_criterion(seed: int, scale: float, workers: int) -> ExperimentResult:
    """E[M_eps(A)^2] on A = [0, 1/2] against the continuum quadrature of exp(gamma^2 K_eps)."""
    gamma, eps, side = 0.5, 2.0 ** -6, 0.5
    grid = GridDomain(extents=(side,), points_per_axis=128)
    sampler = DenseFieldSampler.from_kernel(kernel_evaluator(EXACT_LOG_1D, eps), grid, eps, construction="dense-ExactLog")
    n = _scaled(10_000, scale, 200)
    totals = np.array(run_replicas(_total_mass_task, [(sampler, seed, r, gamma) for r in range(n)], workers))
    squares = totals ** 2
    mean, stderr = float(squares.mean()), float(squares.std(ddof=1) / math.sqrt(n))
    oracle = second_moment_oracle(EXACT_LOG_1D, side, gamma, eps)
    result = ExperimentResult()
    result.add_table("second_moment.csv", ("gamma", "eps", "mc_second_moment", "stderr", "oracle"),
                     [(gamma, eps, mean, stderr, oracle)])
    result.check("second-moment oracle", abs(mean - oracle) <= 3.0 * stderr, f"mc={mean:.5f} oracle={oracle:.5f}")
    return result


def normalization_criterion(seed: int, scale: float, workers: int) -> ExperimentResult:
    """Mean total mass equals the domain volume for every construction, gamma and level."""
    cutoffs = (2.0 ** -2, 2.0 ** -3, 2.0 ** -4)
    line = GridDomain(extents=(1.0,), points_per_axis=256)
    square = GridDomain(extents=(1.0, 1.0), points_per_axis=64)
    constructions = {
        "exact-log": RefinementSampler(exact_log_band_decomposition(EXACT_LOG_1D, cutoffs), line),
        "star": RefinementSampler(star_band_decomposition(STAR_1D, cutoffs), line),
        "gff-whitenoise": GFFModalSampler(GFF_SQUARE, square, ladder=CutoffLadder(cutoffs)),
    }
    n = _scaled(1000, scale, 100)
    result = ExperimentResult()
    rows = []
    for name, construction in constructions.items():
        d = construction.grid.dimension
        gammas = [g for g in (0.5, 1.0, 1.5) if g ** 2 < 2 * d]
        tasks = [(construction, seed, r, gammas) for r in range(n)]
        totals = np.stack(run_replicas(_ladder_totals_task, tasks, workers))
        volume = construction.grid.volume
        for i, gamma in enumerate(gammas):
            for j, eps in enumerate(cutoffs):
                column = totals[:, i, j]
                mean, stderr = float(column.mean()), float(column.std(ddof=1) / math.sqrt(n))
                rows.append((name, gamma, eps, mean, stderr, volume))
                result.check(f"normalization {name} gamma={gamma:g} eps={eps:g}", abs(mean - volume) <= 3.0 * stderr,
                             f"mean={mean:.4f} stderr={stderr:.4f}")
    result.add_table("normalization.csv", ("construction", "gamma", "eps", "mean", "stderr", "volume"), rows)
    return result


def structure_exponent_criterion(seed: int, scale: float, workers: int) -> ExperimentResult:
    """
    xi(q) on the 512 x 512 square through the Dirichlet GFF white-noise route. Balls are centred in
    the central quarter, where the covariance is ln(1/r) plus a smooth bounded term, so the exponents
    are those of the exact-log field.
    """
    config = _config(
        ExperimentKind.XI_FIT, GFF_SQUARE, Construction.GFF_WHITENOISE, 512, 2.0 ** -8, 1, _scaled(200, scale), seed,
        gammas=[1.0], q_values=[0.5, 1.0, 1.5, 2.0], radii=[2.0 ** -k for k in range(3, 7)],
    )
    return _keep(run_xi_fit(config, workers), "structure exponent")


def scale_invariance_criterion(seed: int, scale: float, workers: int) -> ExperimentResult:
    """
    Exact-log chaos on [0, 1] with boxes [1/4, 3/4] and [1/4, 1/2]. The negative control runs the
    same test on a triangle-seed star kernel with correlation length 1/32 and the same physical
    cutoff; its q = 2 ratio falls well below 1 and the test must reject it.
    """
    gamma, lambda_, box_side, eps = 0.7, 0.5, 0.5, 2.0 ** -9
    grid = GridDomain(extents=(1.0,), points_per_axis=1024)
    sampler = DenseFieldSampler.from_kernel(kernel_evaluator(EXACT_LOG_1D, eps), grid, eps, construction="dense-ExactLog")
    n = _scaled(4000, scale, 200)
    measures = run_replicas(_box_measure_task, [(sampler, seed, r, gamma) for r in range(n)], workers)
    report = scale_invariance_test(measures, lambda_, (1.0, 2.0), box_side, kernel=EXACT_LOG_1D, seed=seed)

    star = KernelSpec(
        family=KernelFamily.STAR_SCALE, dimension=1, seed=SeedCovariance.TRIANGLE, correlation_length=1.0 / 32.0
    )
    star_eps = eps / star.T
    star_sampler = DenseFieldSampler.from_kernel(
        kernel_evaluator(star, star_eps), grid, eps, construction="dense-StarScale"
    )
    n_star = _scaled(1000, scale, 200)
    star_measures = run_replicas(
        _box_measure_task, [(star_sampler, seed + 1, r, gamma) for r in range(n_star)], workers
    )
    star_report = scale_invariance_test(star_measures, lambda_, (1.0, 2.0), box_side, seed=seed + 1)
    star_oracle = second_moment_oracle(star, lambda_ * box_side, gamma, star_eps) / (
        lambda_ ** structure_exponent(2.0, gamma, 1) * second_moment_oracle(star, box_side, gamma, star_eps)
    )

    result = ExperimentResult()
    result.add_table("scale_invariance.csv", ("q", "ratio", "ci_low", "ci_high"), report.rows())
    result.add_table("star_control.csv", ("q", "ratio", "ci_low", "ci_high"), star_report.rows())
    result.check("exact scale invariance", report.passed, f"ratios={report.ratios} oracle={report.oracle_ratio:.4f}")
    result.check("star negative control", not star_report.passed,
                 f"star ratios={star_report.ratios} oracle={star_oracle:.4f} n={n_star}")
    return result


def _shared_gff_ladder(points: int = 256, n_levels: int = 7) -> GFFModalSampler:
    return GFFModalSampler(GFF_SQUARE, GridDomain.unit(2, points), ladder=CutoffLadder.dyadic(0.5, n_levels))


def degeneracy_criterion(seed: int, scale: float, workers: int) -> ExperimentResult:
    """Median total mass is stable for gamma = 1 and collapses for gamma = 2.5 in d = 2."""
    gammas = [1.0, 2.5]
    sampler = _shared_gff_ladder()
    n = _scaled(200, scale)
    outputs = run_replicas(_ladder_summary_task, [(sampler, seed, r, gammas) for r in range(n)], workers)
    report = summarize_degeneracy(np.stack([o[0] for o in outputs]), gammas, sampler.cutoffs)
    result = ExperimentResult()
    result.add_table("degeneracy.csv", ("gamma", "eps", "median_total_mass"), report.rows())
    result.check("subcritical median stable", report.spread(0) <= 2.0, f"spread={report.spread(0):.3f}")
    result.check("supercritical collapse", report.degenerate[1], f"decay={report.decay[1]:.2f}")
    return result


def kahane_criterion(seed: int, scale: float, workers: int) -> ExperimentResult:
    """Exact-log cutoff kernels at eps = 1/8 and eps = 1/16 are ordered entrywise on 32 points of [0, 1]."""
    grid = GridDomain(extents=(1.0,), points_per_axis=32)
    distances = cdist(grid.points(), grid.points())
    cov_a = exact_log_cutoff(EXACT_LOG_1D, distances, 2.0 ** -3)
    cov_b = exact_log_cutoff(EXACT_LOG_1D, distances, 2.0 ** -4)
    report = kahane_comparison_test(cov_a, cov_b, grid.cell_volumes(), _scaled(20_000, scale, 500), master_seed=seed)
    result = ExperimentResult()
    result.add_table(
        "kahane.csv", ("function", "mean_a", "mean_b", "z"),
        list(zip(report.functions, report.mean_a, report.mean_b, report.z_scores)),
    )
    result.check("kahane ordering", all(report.ordering_holds), f"z={report.z_scores}")
    result.check("kahane square exact", all(abs(z) <= 3.0 for z in report.square_z), f"z={report.square_z}")
    return result


def thick_point_criterion(seed: int, scale: float, workers: int) -> ExperimentResult:
    """
    GFF on the unit square rooted in the central quarter. The ladder starts at eps = 1/8, where
    the rooted points already sit two cutoffs away from the boundary.
    """
    config = _config(
        ExperimentKind.XI_FIT, GFF_SQUARE, Construction.GFF_WHITENOISE, 256, 2.0 ** -3, 5, _scaled(2000, scale), seed,
        gammas=[1.0], q_values=[1.0], radii=[2.0 ** -k for k in range(2, 6)],
    )
    return _keep(run_xi_fit(config, workers), "rooted local exponent", "thick-point")


def _matched_modes(grid: GridDomain, eps: float) -> int:
    """Fewest eigen modes whose effective cutoff is at most eps."""
    lo, hi = 1, grid.points_per_axis
    while lo < hi:
        mid = (lo + hi) // 2
        if effective_cutoff_for_modes(GFF_SQUARE, grid, mid) <= eps:
            hi = mid
        else:
            lo = mid + 1
    return lo


def equivalence_criterion(seed: int, scale: float, workers: int) -> ExperimentResult:
    """White-noise, eigen and circle-average GFF cutoffs agree in law; a massive field does not."""
    gamma, eps = 1.0, 2.0 ** -5
    grid = GridDomain.unit(2, 128)
    whitenoise = GFFModalSampler(GFF_SQUARE, grid, ladder=CutoffLadder((eps,)))
    eigen = GFFModalSampler(GFF_SQUARE, grid, n_modes=_matched_modes(grid, eps), route="eigen")
    base = GFFModalSampler(GFF_SQUARE, grid, ladder=CutoffLadder((2.0 * grid.spacing,)))
    circle = CircleAverageSampler(base, eps, calibration_seed=seed)
    massive = GFFModalSampler(
        KernelSpec(family=KernelFamily.MASSIVE_GREEN, dimension=2, mass=4.5), grid, ladder=CutoffLadder((eps,))
    )
    n = _scaled(500, scale, 100)
    result = ExperimentResult()
    rows = []
    for name, other, mismatch in (("eigen", eigen, False), ("circle-average", circle, False), ("massive", massive, True)):
        report = approximation_equivalence_test(
            whitenoise, other, gamma, n, master_seed=seed, workers=workers, allow_kernel_mismatch=mismatch
        )
        rows.append((name, report.total_ks_pvalue, max(abs(r - 1.0) for r in report.mean_ratios + report.second_moment_ratios)))
        if mismatch:
            result.check(f"equivalence control {name}", not report.passed, f"ks p={report.total_ks_pvalue:.4f}")
        else:
            result.check(f"equivalence {name}", report.passed, f"ks p={report.total_ks_pvalue:.4f}")
    result.add_table("equivalence.csv", ("against", "total_ks_pvalue", "max_ratio_deviation"), rows)
    return result


def critical_criterion(seed: int, scale: float, workers: int) -> ExperimentResult:
    config = _config(
        ExperimentKind.CRITICAL, EXACT_LOG_1D, Construction.REFINEMENT, 1024, 0.25, 8, _scaled(500, scale), seed,
    )
    return run_critical(config, workers)


def atomic_criterion(seed: int, scale: float, workers: int) -> ExperimentResult:
    config = _config(
        ExperimentKind.ATOMIC, EXACT_LOG_1D, Construction.REFINEMENT, 256, 0.25, 4, _scaled(1000, scale, 100), seed,
        gammas=[1.0],
    )
    return run_atomic(config, workers)


def dgff_criterion(seed: int, scale: float, workers: int) -> ExperimentResult:
    config = _config(
        ExperimentKind.DGFF_CONVERGE, GFF_SQUARE, Construction.DGFF, 32, 0.5, 1, _scaled(1000, scale, 100), seed,
        gammas=[1.0], lattice_sizes=[16, 32, 64],
    )
    return _keep(run_dgff_converge(config, workers), "dgff second moment n=32", "dgff mean")


def kpz_criterion(seed: int, scale: float, workers: int) -> ExperimentResult:
    config = _config(
        ExperimentKind.KPZ, GFF_SQUARE, Construction.GFF_WHITENOISE, 256, 2.0 ** -7, 1, _scaled(200, scale), seed,
        gammas=[1.0],
    )
    return run_kpz(config, workers)


def tail_criterion(seed: int, scale: float, workers: int) -> ExperimentResult:
    """Hill exponent of the total mass on [0, 1] against 2/gamma^2, decreasing in gamma."""
    gammas = [0.5, 0.8, 1.1]
    sampler = RefinementSampler(exact_log_band_decomposition(EXACT_LOG_1D, CutoffLadder.dyadic(0.25, 8).cutoffs),
                                GridDomain.unit(1, 1024))
    n = _scaled(10_000, scale, 1000)
    totals = np.stack(run_replicas(_ladder_totals_task, [(sampler, seed, r, gammas) for r in range(n)], workers))
    fits = [tail_exponent_fit(totals[:, i, -1], g, seed=seed) for i, g in enumerate(gammas)]
    result = ExperimentResult()
    result.add_table("tail.csv", ("gamma", "exponent", "ci_low", "ci_high", "target", "k", "n_samples"),
                     [row for fit in fits for row in fit.rows()])
    central = fits[1]
    result.check("tail exponent", central.relative_error <= 0.25,
                 f"exponent={central.exponent:.3f} target={central.target:.3f}")
    exponents = [fit.exponent for fit in fits]
    result.check("tail trend", bool(np.all(np.diff(exponents) < 0)), f"exponents={exponents}")
    return result


def max_criterion(seed: int, scale: float, workers: int) -> ExperimentResult:
    """First-order growth sup X / c_n near sqrt(2d) and a tight recentered maximum."""
    sampler = _shared_gff_ladder()
    n = _scaled(200, scale)
    outputs = run_replicas(_ladder_summary_task, [(sampler, seed, r, []) for r in range(n)], workers)
    sups = np.stack([o[1][0] for o in outputs])
    report = summarize_maxima(sups, outputs[0][1][1], outputs[0][1][2], 2)
    result = ExperimentResult()
    result.add_table("max.csv", ("eps", "c_n", "mean_first_order", "recentered_median", "inter_level_ks"), report.rows())
    result.check("max first order", report.first_order_ok,
                 f"ratio={report.mean_first_order[-1]:.3f} target={report.first_order_target:.3f}")
    result.check("max tightness", report.tightness_drift < 0.5, f"drift={report.tightness_drift:.3f}")
    return result


CRITERIA: Dict[int, Callable[[int, float, int], ExperimentResult]] = {
    1: second_moment_criterion,
    2: normalization_criterion,
    3: structure_exponent_criterion,
    4: scale_invariance_criterion,
    5: degeneracy_criterion,
    6: kahane_criterion,
    7: thick_point_criterion,
    8: equivalence_criterion,
    9: critical_criterion,
    10: atomic_criterion,
    11: dgff_criterion,
    12: kpz_criterion,
    13: tail_criterion,
    14: max_criterion,
}


def run_acceptance(config: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    """Runs the selected criteria; each draws from master_seed + 1000 * criterion."""
    suite = config.suite
    result = ExperimentResult()
    summary: List[tuple] = []
    for number in sorted(set(suite.criteria)):
        logger.info(f"Acceptance criterion {number}: {CRITERIA[number].__name__}")
        outcome = CRITERIA[number](config.master_seed + SEED_BLOCK * number, suite.replica_scale, workers)
        result.extend(outcome, prefix=f"c{number:02d}_")
        summary.extend((number, check.name, check.passed, check.detail) for check in outcome.checks)
    result.add_table("suite.csv", ("criterion", "check", "passed", "detail"), summary)
    return result
