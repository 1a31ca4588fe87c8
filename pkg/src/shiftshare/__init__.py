"""Model-based shift-share analysis of migration flows and local outcomes.

The package walks the full chain: panel ingestion, a structural
simulator with known parameters, migration choice estimation, Bartik
instrument construction from predicted shares, fixed-effects IV with
weak-instrument diagnostics, dynamic event studies, validity
diagnostics, and tax counterfactuals.  ``shiftshare.cli`` exposes the
same stages as subcommands.
"""

from .choice import (
    ChoiceModelEstimates,
    FeSpec,
    estimate_log_odds,
    predict_migration_probabilities,
)
from .cluster import VceResult, classical_vce, cluster_vce, hc1_vce
from .config import ConfigError, RunConfig, SpecGrid, load_config, parse_config
from .counterfactual import (
    CounterfactualReport,
    FlowCounterfactual,
    aggregate_to_state,
    counterfactual_flows,
    counterfactual_productivity,
    equalize_taxes,
    national_decomposition,
)
from .diagnostics import (
    HerfindahlReport,
    OriginLevelResult,
    PlaceboResult,
    Residualizer,
    RotembergReport,
    distance_ring_design,
    herfindahl_diagnostics,
    origin_level_transform,
    permutation_placebo,
    ring_columns,
    rotemberg_decompose,
    share_balance,
)
from .dynamics import (
    EventDesign,
    EventStudyFit,
    build_event_design,
    cumulative_from_lags,
    fit_distributed_lag,
    fit_iv_event_study,
)
from .errors import (
    CollinearityError,
    DegenerateClusterError,
    EstimationError,
    PredictionError,
    UnderIdentifiedError,
)
from .geo import GeoRegistry, great_circle_miles
from .hdfe import Absorption, ConvergenceError, absorb, absorbed_dof, drop_singletons
from .instruments import (
    VARIANT_NAMES,
    VARIANTS,
    InstrumentColumn,
    build_bartik,
    initial_shares,
)
from .io import load_panels, read_truth, write_panels, write_truth
from .ivreg import (
    EffectiveF,
    IvEstimates,
    SWStats,
    effective_f,
    expand_interactions,
    fit_2sls,
    fit_fe_ols,
    sanderson_windmeijer,
)
from .panels import (
    FlowPanel,
    LogOddsRecord,
    OutcomePanel,
    PanelBundle,
    PanelValidationError,
    PolicyPanel,
    build_flow_tables,
    build_log_odds,
)
from .pipeline import DestinationDesign, Pipeline, StageError
from .seeding import derive_rng, derive_seed_sequence
from .simulate import (
    SimConfig,
    SimulatedWorld,
    WorldTruth,
    simulate_world,
    structural_to_reduced,
)

__version__ = "0.1.0"

__all__ = [
    "Absorption",
    "ChoiceModelEstimates",
    "CollinearityError",
    "ConfigError",
    "ConvergenceError",
    "CounterfactualReport",
    "DegenerateClusterError",
    "DestinationDesign",
    "EffectiveF",
    "EstimationError",
    "EventDesign",
    "EventStudyFit",
    "FeSpec",
    "FlowCounterfactual",
    "FlowPanel",
    "GeoRegistry",
    "HerfindahlReport",
    "InstrumentColumn",
    "IvEstimates",
    "LogOddsRecord",
    "OriginLevelResult",
    "OutcomePanel",
    "PanelBundle",
    "PanelValidationError",
    "Pipeline",
    "PlaceboResult",
    "PolicyPanel",
    "PredictionError",
    "Residualizer",
    "RotembergReport",
    "RunConfig",
    "SWStats",
    "SimConfig",
    "SimulatedWorld",
    "SpecGrid",
    "StageError",
    "UnderIdentifiedError",
    "VARIANTS",
    "VARIANT_NAMES",
    "VceResult",
    "WorldTruth",
    "absorb",
    "absorbed_dof",
    "aggregate_to_state",
    "build_bartik",
    "build_event_design",
    "build_flow_tables",
    "build_log_odds",
    "classical_vce",
    "cluster_vce",
    "counterfactual_flows",
    "counterfactual_productivity",
    "cumulative_from_lags",
    "derive_rng",
    "derive_seed_sequence",
    "distance_ring_design",
    "drop_singletons",
    "effective_f",
    "equalize_taxes",
    "estimate_log_odds",
    "expand_interactions",
    "fit_2sls",
    "fit_distributed_lag",
    "fit_fe_ols",
    "fit_iv_event_study",
    "great_circle_miles",
    "hc1_vce",
    "herfindahl_diagnostics",
    "initial_shares",
    "load_config",
    "load_panels",
    "national_decomposition",
    "origin_level_transform",
    "parse_config",
    "permutation_placebo",
    "predict_migration_probabilities",
    "read_truth",
    "ring_columns",
    "rotemberg_decompose",
    "sanderson_windmeijer",
    "share_balance",
    "simulate_world",
    "structural_to_reduced",
    "write_panels",
    "write_truth",
]
