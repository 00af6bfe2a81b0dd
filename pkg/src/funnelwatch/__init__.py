"""Funnel-plot screening for over- and undertreatment across healthcare providers."""

__version__ = "0.1.0"

from .domain import (  # noqa: E402
    ClaimAggregate,
    FunnelChart,
    PopulationCell,
    ProviderDiagnosisStats,
    RandomEffectsFit,
    StrataScheme,
    StratumKey,
    TransformSpec,
)
from .engine import (  # noqa: E402
    AnalysisConfig,
    analyze_dataset,
    analyze_diagnosis,
    excess_log_odds,
    fit_random_effects,
    flag_providers,
    funnel_limits,
)
from .ingest import Dataset, apply_transforms, parse_claims, parse_population, validate  # noqa: E402
from .kernels import BACKEND  # noqa: E402

__all__ = [
    "AnalysisConfig",
    "BACKEND",
    "ClaimAggregate",
    "Dataset",
    "FunnelChart",
    "PopulationCell",
    "ProviderDiagnosisStats",
    "RandomEffectsFit",
    "StrataScheme",
    "StratumKey",
    "TransformSpec",
    "analyze_dataset",
    "analyze_diagnosis",
    "apply_transforms",
    "excess_log_odds",
    "fit_random_effects",
    "flag_providers",
    "funnel_limits",
    "parse_claims",
    "parse_population",
    "validate",
]
