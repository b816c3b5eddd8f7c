from gmc.validation_models.experiment_model import (
    CheckResult,
    Construction,
    ExperimentConfig,
    ExperimentKind,
    RunManifest,
)

__all__ = ["CheckResult", "Construction", "ExperimentConfig", "ExperimentKind", "RunManifest"]
