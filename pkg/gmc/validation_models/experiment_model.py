import math
from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from gmc.kernels import KernelSpec

SCHEMA_VERSION = 1


class ExperimentKind(str, Enum):
    SAMPLE_FIELD = "sample-field"
    BUILD_CHAOS = "build-chaos"
    XI_FIT = "xi-fit"
    KPZ = "kpz"
    CRITICAL = "critical"
    ATOMIC = "atomic"
    DGFF_CONVERGE = "dgff-converge"
    BURGERS = "burgers"
    SUITE = "suite"


class Construction(str, Enum):
    DENSE = "dense"
    REFINEMENT = "refinement"
    GFF_WHITENOISE = "gff-whitenoise"
    GFF_EIGEN = "gff-eigen"
    CIRCLE_AVERAGE = "circle-average"
    DGFF = "dgff"


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridBlock(_Block):
    points_per_axis: int = Field(..., ge=2, description="Cells per axis (power of two)")
    extents: Optional[List[float]] = Field(None, description="Side lengths; defaults to the kernel's rectangle")

    @field_validator("points_per_axis")
    @classmethod
    def power_of_two(cls, value: int) -> int:
        if value & (value - 1):
            raise ValueError("points_per_axis must be a power of two")
        return value

    @field_validator("extents")
    @classmethod
    def positive_extents(cls, value: Optional[List[float]]) -> Optional[List[float]]:
        if value is not None and any(a <= 0 for a in value):
            raise ValueError("extents must be positive")
        return value


class LadderBlock(_Block):
    coarsest: float = Field(0.5, gt=0, le=1, description="Coarsest cutoff eps_0")
    n_levels: int = Field(4, ge=1, le=24)

    @property
    def cutoffs(self) -> Tuple[float, ...]:
        return tuple(self.coarsest * 0.5 ** k for k in range(self.n_levels))

    @field_validator("coarsest")
    @classmethod
    def dyadic(cls, value: float) -> float:
        exponent = -math.log2(value)
        if abs(exponent - round(exponent)) > 1e-9:
            raise ValueError("coarsest cutoff must be a power of 1/2")
        return value


class FractalBlock(_Block):
    kind: Literal["segment", "square"] = "segment"
    start: Tuple[float, float] = (0.25, 0.5)
    end: Tuple[float, float] = (0.75, 0.5)


class ParametersBlock(_Block):
    gammas: List[float] = Field(default_factory=lambda: [1.0])
    q_values: List[float] = Field(default_factory=lambda: [0.5, 1.0, 1.5, 2.0])
    p_values: List[float] = Field(default_factory=lambda: [-1.0, 0.5, 1.0, 2.0])
    radii: List[float] = Field(default_factory=list)
    alpha: Optional[float] = None
    gamma_bar: Optional[float] = None
    laplace_q: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0])
    nu_values: List[float] = Field(default_factory=lambda: [1.0, 0.5, 0.25])
    t: float = Field(1.0, gt=0)
    x_eval: List[float] = Field(default_factory=lambda: [0.25, 0.5, 0.75])
    beta_values: List[float] = Field(default_factory=list)
    lattice_sizes: List[int] = Field(default_factory=lambda: [16, 32, 64])
    eps_ladder: List[float] = Field(default_factory=list)
    delta_ladder: List[float] = Field(default_factory=list)
    fractal: FractalBlock = Field(default_factory=FractalBlock)

    @field_validator("gammas")
    @classmethod
    def nonnegative_gammas(cls, value: List[float]) -> List[float]:
        if any(g < 0 for g in value):
            raise ValueError("gamma must be nonnegative")
        return value

    @field_validator("alpha")
    @classmethod
    def alpha_range(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and not 0.0 < value < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        return value

    @field_validator("nu_values")
    @classmethod
    def positive_viscosity(cls, value: List[float]) -> List[float]:
        if any(v <= 0 for v in value):
            raise ValueError("viscosities must be positive")
        return value


class SuiteBlock(_Block):
    criteria: List[int] = Field(default_factory=lambda: list(range(1, 15)))
    replica_scale: float = Field(1.0, gt=0, le=1, description="Fraction of the acceptance ensemble sizes")

    @field_validator("criteria")
    @classmethod
    def known_criteria(cls, value: List[int]) -> List[int]:
        unknown = [c for c in value if not 1 <= c <= 14]
        if unknown:
            raise ValueError(f"unknown acceptance criteria {unknown}")
        return value


class ExperimentConfig(_Block):
    schema_version: Literal[1] = SCHEMA_VERSION
    kind: ExperimentKind
    kernel: Optional[KernelSpec] = None
    construction: Construction = Construction.REFINEMENT
    grid: Optional[GridBlock] = None
    ladder: LadderBlock = Field(default_factory=LadderBlock)
    parameters: ParametersBlock = Field(default_factory=ParametersBlock)
    suite: Optional[SuiteBlock] = None
    n_replicas: int = Field(100, ge=1)
    master_seed: int = Field(0, ge=0)
    output_dir: Optional[str] = None
    workers: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def suite_block_for_suite(self) -> "ExperimentConfig":
        if self.kind == ExperimentKind.SUITE and self.suite is None:
            object.__setattr__(self, "suite", SuiteBlock())
        return self


class CheckResult(_Block):
    name: str
    passed: bool
    detail: str = ""


class RunManifest(_Block):
    schema_version: Literal[1] = SCHEMA_VERSION
    tool_version: str
    kind: ExperimentKind
    config_hash: str
    master_seed: int
    n_replicas: int
    seed_scheme: str = "SeedSequence(master_seed, spawn_key=(replica, level))"
    workers: int
    started_at: str
    wall_time_seconds: float
    jitter_events: List[Dict[str, object]] = Field(default_factory=list)
    checks: List[CheckResult] = Field(default_factory=list)
    outputs: List[str] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)
