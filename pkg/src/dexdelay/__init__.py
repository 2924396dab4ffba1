"""Mixed continuous/impulse control with priority-fee execution delays.

Solver and Monte Carlo simulator for optimal trading across a centralized
exchange (continuous rate control) and a constant-product DEX (delayed
discrete orders whose expected delay is chosen via a priority-fee ladder).
"""

from .control import (
    PendingConfig,
    PriorityLadder,
    ProblemSpec,
    config_after_execute,
    config_after_submit,
    enumerate_configs,
)
from .market import (
    MarketParams,
    TradingState,
    build_problem,
    impact,
    impulse_map,
    intervention_cashflow,
    psi,
    running_reward,
    swap_cashflow,
    terminal_reward,
)
from .solver import (
    GridSpec,
    PolicyTables,
    SolveResult,
    SolverOptions,
    ValueField,
    cfl_time_steps,
    default_volume_grid,
    qvi_residual,
    riccati_reference,
    solve,
)

__version__ = "0.1.0"
