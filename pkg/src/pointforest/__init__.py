"""Random-forest intensity estimation for spatial point patterns.

The package provides two forest estimators of a point process intensity
surface: purely spatial forests averaging count-per-area estimates over
random Voronoi partitions of the window, and covariate-driven forests that
recursively split space by thresholding covariate rasters at their spatial
medians, scored by a Poisson likelihood criterion.  Supporting modules
cover simulation, tessellation statistics, scoring/tuning and a CLI.
"""

from .geometry import (
    DEFAULT_RESOLUTION,
    CovariateStack,
    DataError,
    PointPattern,
    RasterGrid,
    Window,
    fmt_float,
    mean_iqr,
    read_points_csv,
    read_raster,
    value_at,
    window_area,
    window_from_mask,
    write_points_csv,
    write_raster,
)
from .simulate import (
    BEI_COVARIATE_NAMES,
    IntensityModel,
    RngSeed,
    simulate_homogeneous_poisson,
    simulate_inhomogeneous_poisson,
    simulate_thomas,
    surrogate_stack,
    synthetic_covariates,
    synthetic_intensity_model,
)
from .tessellation import Partition, cell_of, poisson_voronoi_partition, zero_cell_statistics
from .spatial import (
    SpatialForest,
    SpatialTree,
    fit_spatial_forest,
    fit_spatial_tree,
    forest_estimates_at,
    predict_spatial,
    predict_spatial_grid,
    rule_of_thumb_gamma,
)
from .covariate import (
    CovariateForest,
    CovariateTree,
    Leaf,
    SplitNode,
    fit_covariate_forest,
    fit_covariate_tree,
    leaf_partition,
    predict_covariate,
    predict_covariate_grid,
    split_score,
    variable_importance,
)
from .scoring import (
    ScoreReport,
    TuningGrid,
    infill_study,
    lcv,
    miae,
    mise,
    oob_oracle_study,
    oob_score_forest,
    oob_score_tree,
    synthetic_study,
    tune,
)
from .persistence import load_model, save_model

__version__ = "0.1.0"
