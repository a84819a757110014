"""Manifold-learning normalizing flows with exact densities on learned manifolds."""

from .autodiff import (
    GradientCheckReport,
    Node,
    Parameter,
    ParamStore,
    grad,
    gradient_check,
    jvp,
)
from .estimators import AmbientFlowDensity, ManifoldFlowDensity
from .models import (
    AmbientFlow,
    EncoderManifoldFlow,
    ManifoldFlow,
    PieFlow,
    PrescribedChart,
    PrescribedManifoldFlow,
    bits_per_dim,
    unit_circle_chart,
)
from .training import (
    AdamW,
    PhaseLog,
    TrainPlan,
    loss_nll,
    loss_optimal_transport,
    loss_reconstruction,
    loss_simultaneous,
    sinkhorn_divergence,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "AmbientFlow",
    "AmbientFlowDensity",
    "EncoderManifoldFlow",
    "GradientCheckReport",
    "ManifoldFlow",
    "ManifoldFlowDensity",
    "Node",
    "ParamStore",
    "Parameter",
    "PhaseLog",
    "PieFlow",
    "PrescribedChart",
    "PrescribedManifoldFlow",
    "TrainPlan",
    "bits_per_dim",
    "grad",
    "gradient_check",
    "jvp",
    "loss_nll",
    "loss_optimal_transport",
    "loss_reconstruction",
    "loss_simultaneous",
    "sinkhorn_divergence",
    "train",
    "unit_circle_chart",
]
