"""Random walks, weighted grids and exclusion dynamics on compact manifolds.

The package builds a pipeline whose stages can each be checked against an
independent oracle: geodesic random walks whose generators approximate the
Laplacian, kernel-weighted grids on sampled point clouds whose graph
Laplacians converge to the manifold Laplacian, and a symmetric exclusion
process on those grids whose empirical density follows the heat equation.
"""

from manigrid.manifolds import (
    Circle,
    FlatTorus,
    Manifold,
    Mode,
    Sphere2,
    TangentVector,
    TestFunction,
    finite_difference_laplacian,
    laplace_eigenbasis,
    make_manifold,
    quadrature_rule,
    test_function_library,
    volume_density_expansion_check,
)
from manigrid.walk import (
    StepMeasure,
    WalkPath,
    biased_control_step,
    check_canonical,
    ensemble_expectation,
    generator_apply,
    product_counterexample_step,
    simulate_walk,
    speed_constant,
    uniform_sphere_step,
)
from manigrid.wasserstein import transport_upper_bound, wasserstein1_upper
from manigrid.grids import (
    Kernel,
    PointCloud,
    WeightedGrid,
    build_weights,
    check_connected,
    convergence_error,
    default_kernel,
    epsilon_schedule,
    graph_laplacian_apply,
    limiting_constant_op,
    load_cloud,
    load_grid,
    normalize_grid,
    regular_circle_cloud,
    sample_cloud,
    save_cloud,
    save_grid,
    w1_curve,
    wasserstein1,
)
from manigrid.sep import (
    Configuration,
    EdgeTable,
    ObservableTrace,
    dynkin_path,
    empirical_average,
    init_bernoulli,
    martingale_report,
    qv_bound,
    replica_rngs,
    save_traces,
    simulate,
    swap,
)
from manigrid.pde import SpectralField, evolve, pair, project, save_field

__version__ = "0.1.0"
