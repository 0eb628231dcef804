"""infersim: trace-driven simulation of ML inference serving on cloud resources.

Quantifies cost, SLO violations and over-provisioning for five resource
procurement policies (reactive, util_aware, exascale, mixed, paragon) combined
with constraint-aware model selection.
"""

__version__ = "0.1.0"

from .catalog import (
    ConstraintSet,
    ModelChoice,
    ModelProfile,
    feasible_models,
    load_catalog,
    select_model_naive,
    select_model_paragon,
)
from .cloudmodel import (
    RateCard,
    ServerlessPool,
    VmInstance,
    choose_serverless_memory,
    cost_per_million,
    load_rate_card,
    serverless_dispatch,
    serverless_exec_latency,
    serverless_invocation_cost,
    vm_capacity,
    vm_cost,
)
from .engine import MetricsReport, over_provision_ratio, replay_verify, run
from .errors import (
    ComparisonError,
    ConfigurationError,
    InferSimError,
    InfeasibleError,
    TraceParseError,
    ValidationError,
    VerificationError,
)
from .policies import ClusterState, PolicySpec, predict_demand, required_vms
from .workload import (
    ArrivalTrace,
    MixSpec,
    QuerySpec,
    assign_constraints,
    gen_burst,
    gen_constant,
    load_trace_csv,
    peak_to_median,
)
