"""Hand-built worlds used by docs, tests and the demo pipeline."""
from __future__ import annotations

from worldqa.agent_world.types import (
    EMPTY, SPAWN, WALL, Fidelity, Inventory, Monster, MonsterKind, Stats, TaskSpec, WorldState,
    key, monster_ref, potion, stairs,
)


def _monster(mid: str, life: int, attack: int, defense: int, pos) -> Monster:
    return Monster(MonsterKind.NORMAL, Stats(attack, defense, life), reward_gold=life // 5,
                   reward_exp=attack, pos=pos)


def reference_world() -> WorldState:
    """The 5x5 observation example: warrior at (0, 0), exit stairs at (4, 4).

    Tiles follow the map rows of the example. Its description block lists
    some positions that disagree with those rows; the rows are used.
    """
    E = EMPTY
    grid = (
        (SPAWN, E, E, WALL, potion(20)),
        (E, E, E, WALL, monster_ref("M1")),
        (E, E, monster_ref("M2"), E, E),
        (E, key("red"), E, monster_ref("M3"), E),
        (E, E, E, E, stairs(1)),
    )
    monsters = {
        "M1": _monster("M1", 50, 15, 5, (1, 4)),
        "M2": _monster("M2", 70, 20, 8, (2, 2)),
        "M3": _monster("M3", 100, 25, 10, (3, 3)),
    }
    return WorldState(
        floors=(grid,), current_floor=0, player_pos=(0, 0), player_stats=Stats(12, 8, 535),
        inventory=Inventory(keys=(2, 1, 0)), monsters=monsters, fidelity=Fidelity.PERFECT,
        spawn_stats=Stats(10, 5, 100))


def reference_task() -> TaskSpec:
    return TaskSpec("reference", "reach_floor", 1, "reach the stairs at (4, 4)")
