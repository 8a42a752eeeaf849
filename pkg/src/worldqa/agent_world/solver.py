"""Exhaustive best-first solvability check with a witness.

Nodes are world states at "interaction points": walking across passable
tiles changes nothing but the position, so each expansion floods the free
region around the player and branches only on tiles that change the state
(monsters, keys, doors, potions, stairs, trades, items). States with the same
grid and a dominated resource vector are pruned; more life, attack, defense,
keys, currency or items never make a goal harder, so pruning keeps the search
complete.
"""
from __future__ import annotations

import heapq
import itertools
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional

from worldqa.agent_world.engine import SUCCESS, check_goal, step, wing_target
from worldqa.agent_world.types import (
    ALTAR, DIRECTIONS, PASSABLE, STATS, STORE, WALL, AgentAction, Fidelity, Move,
    TaskSpec, Trade, UseShovel, UseWing, WorldState,
)

DEFAULT_NODE_LIMIT = 50_000
DEFAULT_MAX_CELLS = 400


class SearchBudgetExceeded(RuntimeError):
    pass


class GridTooLarge(ValueError):
    pass


@dataclass
class SolveResult:
    solvable: bool
    witness: list[AgentAction] = field(default_factory=list)
    nodes: int = 0

    def __bool__(self) -> bool:
        return self.solvable


def free_region(state: WorldState, start: Optional[tuple[int, int]] = None
                ) -> dict[tuple[int, int], tuple[Optional[tuple[int, int]], Optional[str]]]:
    """BFS over passable tiles from ``start``; maps cell -> (parent, move)."""
    start = state.player_pos if start is None else start
    grid = state.grid
    rows, cols = len(grid), len(grid[0])
    parents: dict = {start: (None, None)}
    queue = deque([start])
    while queue:
        r, c = queue.popleft()
        for d, (dr, dc) in DIRECTIONS.items():
            nr, nc = r + dr, c + dc
            if 0 <= nr < rows and 0 <= nc < cols and (nr, nc) not in parents and grid[nr][nc] in PASSABLE:
                parents[(nr, nc)] = ((r, c), d)
                queue.append((nr, nc))
    return parents


def path_to(parents: dict, cell: tuple[int, int]) -> list[AgentAction]:
    moves: list[AgentAction] = []
    while True:
        parent, d = parents[cell]
        if parent is None:
            break
        moves.append(Move(d))
        cell = parent
    moves.reverse()
    return moves


def _resources(s: WorldState) -> tuple:
    inv = s.inventory
    return (s.player_stats.life, s.player_stats.attack, s.player_stats.defense, *inv.keys,
            inv.gold, inv.experience, inv.shovels, inv.wings, int(inv.orb))


def _dominated(res: tuple, others: list[tuple]) -> bool:
    return any(all(o >= x for o, x in zip(other, res)) for other in others)


def _power(s: WorldState) -> int:
    st = s.player_stats
    return st.life + 30 * (st.attack + st.defense) + 20 * sum(s.inventory.keys)


def validate_solvable(
    state: WorldState,
    task: TaskSpec,
    *,
    node_limit: int = DEFAULT_NODE_LIMIT,
    max_cells: int = DEFAULT_MAX_CELLS,
) -> SolveResult:
    """Decide whether ``task`` is achievable from ``state``.

    Raises ``GridTooLarge`` above ``max_cells`` total cells and
    ``SearchBudgetExceeded`` once ``node_limit`` nodes have been expanded.
    """
    if state.total_cells() > max_cells:
        raise GridTooLarge(f"{state.total_cells()} cells exceeds the bound of {max_cells}")
    if check_goal(state, task) == SUCCESS:
        return SolveResult(True, [], 0)
    if state.dead:
        return SolveResult(False, [], 0)

    counter = itertools.count()
    # node table: id -> (state, parent id, actions leading here)
    nodes: list[tuple[WorldState, int, tuple]] = []
    frontier: list = []
    seen: dict[tuple, list[tuple]] = {}

    def push(s: WorldState, parent: int, actions: tuple) -> None:
        region = free_region(s)
        anchor = min(region)
        base = (s.floors, s.current_floor, anchor, s.store_purchases, s.altar_purchases)
        res = _resources(s)
        bucket = seen.setdefault(base, [])
        if _dominated(res, bucket):
            return
        bucket[:] = [b for b in bucket if not all(x >= o for x, o in zip(res, b))]
        bucket.append(res)
        nodes.append((s, parent, actions))
        idx = len(nodes) - 1
        heapq.heappush(frontier, (-s.current_floor, -_power(s), len(actions), next(counter), idx))

    def witness(idx: int, tail: list[AgentAction]) -> list[AgentAction]:
        chunks = [tail]
        while idx >= 0:
            _, parent, actions = nodes[idx]
            chunks.append(list(actions))
            idx = parent
        out: list[AgentAction] = []
        for chunk in reversed(chunks):
            out.extend(chunk)
        return out

    push(state, -1, ())
    expanded = 0
    while frontier:
        *_, idx = heapq.heappop(frontier)
        expanded += 1
        if expanded > node_limit:
            raise SearchBudgetExceeded(f"more than {node_limit} nodes expanded")
        s = nodes[idx][0]
        region = free_region(s)

        if task.goal == "reach_tile":
            f, r, c = task.target
            if f == s.current_floor and (r, c) in region:
                return SolveResult(True, witness(idx, path_to(region, (r, c))), expanded)

        grid = s.grid
        rows, cols = len(grid), len(grid[0])
        tried: set = set()
        for cell in sorted(region):
            walk = None
            at = replace(s, player_pos=cell)
            for d, (dr, dc) in DIRECTIONS.items():
                nr, nc = cell[0] + dr, cell[1] + dc
                if not (0 <= nr < rows and 0 <= nc < cols):
                    continue
                t = grid[nr][nc]
                if t in PASSABLE:
                    continue
                if t == WALL:
                    if not s.inventory.shovels:
                        continue
                    action: AgentAction = UseShovel(d)
                    sig = ("shovel", (nr, nc))
                else:
                    action = Move(d)
                    sig = ("move", (nr, nc))
                if sig in tried:
                    continue
                tried.add(sig)
                nxt, events, terminal = step(at, action, task)
                if nxt.dead or nxt.search_key() == at.search_key():
                    continue
                if walk is None:
                    walk = path_to(region, cell)
                if terminal == SUCCESS:
                    return SolveResult(True, witness(idx, walk + [action]), expanded)
                push(nxt, idx, tuple(walk + [action]))
            if s.inventory.wings:
                target = wing_target(at)
                if target not in region and grid[target[0]][target[1]] in PASSABLE and ("wing", target) not in tried:
                    tried.add(("wing", target))
                    nxt, _, terminal = step(at, UseWing(), task)
                    walk = path_to(region, cell) if walk is None else walk
                    if terminal == SUCCESS:
                        return SolveResult(True, witness(idx, walk + [UseWing()]), expanded)
                    push(nxt, idx, tuple(walk + [UseWing()]))
            if s.fidelity is Fidelity.PERFECT and grid[cell[0]][cell[1]] in (STORE, ALTAR):
                for stat in STATS:
                    nxt, events, terminal = step(at, Trade(stat), task)
                    if events[0].kind != "Traded":
                        continue
                    walk = path_to(region, cell) if walk is None else walk
                    if terminal == SUCCESS:
                        return SolveResult(True, witness(idx, walk + [Trade(stat)]), expanded)
                    push(nxt, idx, tuple(walk + [Trade(stat)]))
    return SolveResult(False, [], expanded)
