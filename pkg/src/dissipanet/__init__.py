"""Dissipativity-preserving action shielding for networked RL controllers."""

__version__ = "0.1.0"

from .dissipativity import (
    QsrSupply,
    SupplySpec,
    cumulative_supply_check,
    cross_weight_residual,
    eval_supply,
    interconnection_margins,
    jacobi_eigenvalues,
    network_supply_bound,
)
from .harness import RunConfig, Scenario, Setup, run_evaluation, run_training
from .microgrid import (
    DguParams,
    EquilibriumPoint,
    LineParams,
    build_microgrid,
    compute_equilibrium,
    dgu_step,
    line_step,
    microgrid_supplies,
    reward,
)
from .netmodel import (
    EdgeSystem,
    IoRecord,
    NetworkState,
    NetworkTopology,
    NodeSystem,
    couple,
    network_step,
)
from .shield import (
    BarrierState,
    DissipConstraint,
    FeedforwardStore,
    InfeasibleConstraint,
    ShieldConfig,
    UnsupportedConstraint,
    barrier_update,
    dec_control,
    desired_supply,
    project,
)
