"""Entropic optimal transport loss with analytic gradients, category cost
metrics, and a small two-head network trained with an OT penalty between its
heads."""

from .errors import (
    DimensionMismatch,
    InstanceTooLarge,
    InvalidHistogram,
    InvalidSolution,
    JtlnError,
    MetricError,
    NonFiniteLoss,
    NumericalUnderflow,
    ParseError,
    SchemaError,
)
from .metrics import (
    CategoryBank,
    CostMethod,
    EmpiricalMeasure,
    KernelSpec,
    build_cost_matrix,
    mk_mmd_linear,
    mk_mmd_squared,
    ot_distance,
)
from .network import LabeledSet, ModelParams, TrainConfig, backward, forward, jtln_objective, train
from .ot import (
    CostMatrix,
    GradientPair,
    Histogram,
    OtSolution,
    SinkhornConfig,
    TransportPlan,
    exact_ot_solve,
    ot_loss_gradients,
    plan_entropy,
    sinkhorn_solve,
)

__version__ = "0.1.0"
