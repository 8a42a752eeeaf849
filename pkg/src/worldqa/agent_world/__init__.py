"""Grid puzzle world in imperfect and perfect fidelity."""
from worldqa.agent_world.combat import CombatOutcome, resolve_combat, resolve_combat_arrays
from worldqa.agent_world.engine import (
    FAILURE, ONGOING, SUCCESS, NoOrbAccess, OrbEntry, check_goal, legal_moves, orb_report,
    replay, step, upgrade_cost,
)
from worldqa.agent_world.generate import GenerationExhausted, WorldConfig, default_task, generate_world
from worldqa.agent_world.solver import GridTooLarge, SearchBudgetExceeded, SolveResult, validate_solvable
from worldqa.agent_world.types import (
    AgentAction, Fidelity, InspectOrb, Inventory, Monster, MonsterKind, Move, Stats, TaskSpec,
    Trade, UseShovel, UseWing, WorldState, fidelity_violations, validate_state,
)
