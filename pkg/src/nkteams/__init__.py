"""Agent-based NK simulation of virtual teams with and without liaison coordination."""
from .analysis import (
    PDCurve,
    RegressionTree,
    empirical_partial_dependence,
    fit_tree,
    load_dataset,
    panel_partial_dependence,
    partial_dependence,
)
from .config import load_config, parse_and_validate
from .landscape import (
    InterdependenceMatrix,
    Landscape,
    Pattern,
    build_matrix,
    compute_global_max,
    contribution,
    generate_landscape,
    performance,
    subtask_performance,
)
from .population import (
    Agent,
    NoiseSpec,
    ResidualContext,
    best_known,
    estimated_utility,
    init_population,
    learn_step,
    utility,
)
from .simulation import (
    Coordination,
    LearningScope,
    RoundResult,
    ScenarioConfig,
    expand_grid,
    normalize_performance,
    run_grid,
    run_round,
    run_scenario,
)
from .team import Team, autonomous_decision, coordinated_decision, form_team, should_reform

__version__ = "0.1.0"
