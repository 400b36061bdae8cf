"""Spatio-temporal lattice models for dense irradiance sensor networks."""

__version__ = "0.1.0"

from .core import (
    SensorLayout,
    SpatioTemporalField,
    TrendModel,
    detrend,
    grid_layout,
    ingest_field,
    read_layout_csv,
    read_measurements_csv,
    time_average,
    write_layout_csv,
    write_measurements_csv,
)
from .evaluation import (
    CrossvalPlan,
    MetricsReport,
    adjusted_r2,
    crossval,
    rmpe,
    rmpe_ratio,
    rmpe_rooted,
    rmse,
    write_order_rmse_csv,
    write_rmpe_ratio_csv,
    write_window_rmse_csv,
)
from .fcar import (
    FcarFit,
    FcarOptions,
    FcarSpec,
    SplineBasis,
    effective_params,
    fit_fcar,
    forecast_fcar,
    select_fcar_order,
)
from .fcsar import (
    FcsarFit,
    FcsarSpec,
    SeparabilityReport,
    SeparableFit,
    fit_fcsar,
    fit_separable,
    predict_missing_sensor,
    separability_diagnostic,
    write_separability_csv,
)
from .simulation import (
    Expar2Config,
    FieldSimConfig,
    expar2_true_curves,
    factorization_gap,
    simulate_expar2,
    simulate_field,
)
from .spatial import (
    NaturalNeighborPrediction,
    NeighborGraph,
    SarFit,
    SarTrace,
    VoronoiWeights,
    build_neighbor_graph,
    natural_neighbor_predict,
    sar_fit_ml,
    sar_residuals_field,
    voronoi_weights,
    write_sar_trace_csv,
)

__all__ = [
    "__version__",
    "SensorLayout",
    "SpatioTemporalField",
    "TrendModel",
    "detrend",
    "grid_layout",
    "ingest_field",
    "read_layout_csv",
    "read_measurements_csv",
    "time_average",
    "write_layout_csv",
    "write_measurements_csv",
    "CrossvalPlan",
    "MetricsReport",
    "adjusted_r2",
    "crossval",
    "rmpe",
    "rmpe_ratio",
    "rmpe_rooted",
    "rmse",
    "write_order_rmse_csv",
    "write_rmpe_ratio_csv",
    "write_window_rmse_csv",
    "FcarFit",
    "FcarOptions",
    "FcarSpec",
    "SplineBasis",
    "effective_params",
    "fit_fcar",
    "forecast_fcar",
    "select_fcar_order",
    "FcsarFit",
    "FcsarSpec",
    "SeparabilityReport",
    "SeparableFit",
    "fit_fcsar",
    "fit_separable",
    "predict_missing_sensor",
    "separability_diagnostic",
    "write_separability_csv",
    "Expar2Config",
    "FieldSimConfig",
    "expar2_true_curves",
    "factorization_gap",
    "simulate_expar2",
    "simulate_field",
    "NaturalNeighborPrediction",
    "NeighborGraph",
    "SarFit",
    "SarTrace",
    "VoronoiWeights",
    "build_neighbor_graph",
    "natural_neighbor_predict",
    "sar_fit_ml",
    "sar_residuals_field",
    "voronoi_weights",
    "write_sar_trace_csv",
]
