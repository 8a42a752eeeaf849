from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import simulate_combat
from worldqa.agent_world.combat import resolve_combat, resolve_combat_arrays
from worldqa.agent_world.engine import (
    FAILURE, ONGOING, SUCCESS, NoOrbAccess, legal_moves, orb_report, replay, step, upgrade_cost,
    wing_target,
)
from worldqa.agent_world.examples import reference_task, reference_world
from worldqa.agent_world.generate import GenerationExhausted, WorldConfig, default_task, generate_world
from worldqa.agent_world.solver import GridTooLarge, validate_solvable
from worldqa.agent_world.types import (
    ALTAR, EMPTY, ORB, SPAWN, STORE, WALL, Fidelity, InspectOrb, InvalidWorld, Inventory, Monster,
    MonsterKind, Move, Stats, TaskSpec, Trade, UseShovel, UseWing, WorldState, crystal, door,
    fidelity_violations, item, key, monster_ref, potion, stairs, validate_state,
)

stat = st.integers(1, 40)


def world(rows, monsters=None, *, fidelity="perfect", stats=(10, 5, 100), inv=None, pos=(0, 0), floors=None):
    grids = floors or [rows]
    return WorldState(
        floors=tuple(tuple(tuple(r) for r in g) for g in grids), current_floor=0, player_pos=pos,
        player_stats=Stats(*stats), inventory=inv or Inventory(), monsters=monsters or {},
        fidelity=Fidelity(fidelity))


def mon(mid, pos, atk=15, dfn=5, life=50, kind=MonsterKind.NORMAL, **kw):
    return Monster(kind, Stats(atk, dfn, life), reward_gold=10, reward_exp=7, pos=pos, **kw)


# ---------------------------------------------------------------------------
# combat


@given(stat, stat, st.integers(1, 300), stat, stat, st.integers(1, 300), st.booleans(), st.booleans())
def test_resolve_combat_matches_strike_simulation(a, d, l, am, dm, lm, vampire, after_kill):
    kind = MonsterKind.VAMPIRE if vampire else MonsterKind.NORMAL
    mode = "turns" if after_kill else "turns_minus_one"
    out = resolve_combat(Stats(a, d, l), Stats(am, dm, lm), kind, monster_strikes=mode)
    feasible, turns, residual = simulate_combat(a, d, l, am, dm, lm, vampire, strike_after_kill=after_kill)
    assert out.feasible == feasible
    if feasible:
        assert (out.turns, out.residual_life) == (turns, residual)
        assert out.damage_taken == l - residual
        assert out.survives == (residual >= 0)


@settings(max_examples=30)
@given(st.lists(st.tuples(stat, stat, stat, stat, stat, stat), min_size=1, max_size=30), st.booleans())
def test_array_and_scalar_combat_agree(rows, vampire):
    a, d, l, am, dm, lm = (np.array(c) for c in zip(*rows))
    f, t, r = resolve_combat_arrays(a, d, l, am, dm, lm, vampire)
    kind = MonsterKind.VAMPIRE if vampire else MonsterKind.NORMAL
    for i, row in enumerate(rows):
        out = resolve_combat(Stats(*row[:3]), Stats(*row[3:]), kind)
        assert bool(f[i]) == out.feasible
        if out.feasible:
            assert (int(t[i]), int(r[i])) == (out.turns, out.residual_life)
        else:
            assert int(r[i]) == row[2]


def test_combat_frozen_examples():
    # warrior (10, 5, 100) vs M1 (15, 5, 50): 10 strikes of 10 damage
    assert resolve_combat(Stats(10, 5, 100), Stats(15, 5, 50)).residual_life == 0
    # (12, 8, 535) vs M1: ceil(50 / 7) = 8 strikes of 7 damage
    out = resolve_combat(Stats(12, 8, 535), Stats(15, 5, 50))
    assert (out.turns, out.damage_taken) == (8, 56)
    # equal attack and defense is a stalemate
    assert not resolve_combat(Stats(5, 5, 100), Stats(15, 5, 50)).feasible
    # vampire 10%: 100 -> 90 -> 81 after one strike of 10
    v = resolve_combat(Stats(50, 5, 100), Stats(15, 5, 10), MonsterKind.VAMPIRE)
    assert (v.turns, v.residual_life) == (1, 81)


def test_unknown_strike_mode_rejected():
    with pytest.raises(ValueError):
        resolve_combat(Stats(10, 5, 100), Stats(15, 5, 50), monster_strikes="never")


# ---------------------------------------------------------------------------
# engine


def test_move_and_edge():
    w = world([[SPAWN, EMPTY], [EMPTY, EMPTY]])
    nxt, ev, status = step(w, Move("right"))
    assert nxt.player_pos == (0, 1) and ev[0]["kind"] == "Moved" and status == ONGOING
    same, ev, _ = step(w, Move("up"))
    assert same.player_pos == (0, 0) and ev[0] == {"kind": "IllegalMove", "reason": "edge", "target": [-1, 0]}
    assert same.turn == 1


def test_step_never_mutates_input():
    w = reference_world()
    before = w.state_hash()
    for a in legal_moves(w):
        step(w, a)
    assert w.state_hash() == before


def test_door_consumes_key():
    w = world([[SPAWN, door("yellow"), EMPTY]], inv=Inventory(keys=(1, 0, 0)))
    nxt, ev, _ = step(w, Move("right"))
    assert [e["kind"] for e in ev] == ["DoorOpened", "Moved"]
    assert nxt.inventory.keys == (0, 0, 0) and nxt.tile((0, 1)) == EMPTY
    locked = world([[SPAWN, door("blue"), EMPTY]], inv=Inventory(keys=(1, 0, 0)))
    same, ev, _ = step(locked, Move("right"))
    assert ev[0]["reason"] == "locked" and same.player_pos == (0, 0)


def test_pickups():
    w = world([[SPAWN, key("red"), potion(20), crystal("attack", 2), item("shovel")]])
    s = w
    for _ in range(4):
        s = step(s, Move("right"))[0]
    assert s.inventory.keys == (0, 0, 1)
    assert s.player_stats == Stats(12, 5, 120)
    assert s.inventory.shovels == 1
    assert all(t in (SPAWN, EMPTY) for t in s.grid[0])


def test_combat_win_rewards_and_fidelity():
    for fid, exp in (("perfect", 7), ("imperfect", 0)):
        w = world([[SPAWN, monster_ref("M1")]], {"M1": mon("M1", (0, 1))}, fidelity=fid)
        nxt, ev, _ = step(w, Move("right"))
        assert ev[0]["kind"] == "CombatWon" and ev[0]["damage"] == 100
        assert nxt.player_stats.life == 0 and not nxt.dead
        assert (nxt.inventory.gold, nxt.inventory.experience) == (10, exp)
        assert "M1" not in nxt.monsters and nxt.player_pos == (0, 1)


def test_lethal_combat_and_episode_over():
    w = world([[SPAWN, monster_ref("M1")]], {"M1": mon("M1", (0, 1))}, stats=(10, 5, 99))
    dead, ev, status = step(w, Move("right"))
    assert ev[0]["kind"] == "PlayerDied" and dead.dead and status == FAILURE
    again, ev, status = step(dead, Move("left"))
    assert ev == [{"kind": "EpisodeOver"}] and status == FAILURE


def test_infeasible_combat_is_not_legal():
    w = world([[SPAWN, monster_ref("M1")]], {"M1": mon("M1", (0, 1), dfn=10)})
    assert Move("right") not in legal_moves(w)
    assert step(w, Move("right"))[1][0]["kind"] == "CombatInfeasible"


def test_shovel_and_wing():
    w = world([[SPAWN, WALL, EMPTY], [EMPTY, EMPTY, EMPTY]], inv=Inventory(shovels=1, wings=1))
    assert wing_target(w) == (1, 2)
    assert UseShovel("right") in legal_moves(w) and UseWing() in legal_moves(w)
    dug, ev, _ = step(w, UseShovel("right"))
    assert ev[0]["kind"] == "WallRemoved" and dug.tile((0, 1)) == EMPTY and dug.inventory.shovels == 0
    flown, ev, _ = step(w, UseWing())
    assert flown.player_pos == (1, 2) and ev[0]["kind"] == "WingUsed"
    # wings are reusable
    assert flown.inventory.wings == 1


def test_trade_costs_double():
    assert [upgrade_cost(k) for k in (1, 2, 3, 4)] == [20, 40, 80, 160]
    with pytest.raises(ValueError):
        upgrade_cost(0)
    w = world([[STORE, ALTAR]], inv=Inventory(experience=70, gold=5))
    s, ev, _ = step(w, Trade("attack"))
    assert ev[0] == {"kind": "Traded", "stat": "attack", "cost": 20, "currency": "experience", "gain": 2}
    s, ev, _ = step(s, Trade("attack"))
    assert ev[0]["cost"] == 40 and s.inventory.experience == 10 and s.player_stats.attack == 14
    s, ev, _ = step(s, Trade("life"))
    assert ev[0]["reason"] == "insufficient funds"
    s = step(s, Move("right"))[0]
    assert step(s, Trade("life"))[1][0]["reason"] == "insufficient funds"
    imperfect = world([[STORE]], fidelity="imperfect", inv=Inventory(experience=100))
    assert step(imperfect, Trade("attack"))[1][0]["kind"] == "TradeRejected"


def test_orb_report():
    w = world([[ORB, monster_ref("M1"), monster_ref("M2")]],
              {"M1": mon("M1", (0, 1)), "M2": mon("M2", (0, 2), dfn=20)})
    rep = orb_report(w)
    assert [e.describe() for e in rep] == ["M1: 100", "M2: Infeasible"]
    moved = replace(w, player_pos=(0, 1)).with_tile((0, 0), EMPTY)
    with pytest.raises(NoOrbAccess):
        orb_report(moved)
    assert step(moved, InspectOrb())[1][0]["kind"] == "NoOrbAccess"


def test_stairs_change_floor_and_goal():
    f0 = [[SPAWN, stairs(1)]]
    f1 = [[stairs(0), stairs(2)]]
    w = world(None, floors=[f0, f1])
    task = TaskSpec("t", "reach_floor", 2, "exit")
    s, ev, status = step(w, Move("right"), task)
    assert s.current_floor == 1 and s.player_pos == (0, 0) and status == ONGOING
    s, ev, status = step(s, Move("right"), task)
    assert ev[-1]["kind"] == "ReachedStairs" and status == SUCCESS


# ---------------------------------------------------------------------------
# validation, fidelity, generation, solver


def test_validate_state_errors():
    with pytest.raises(InvalidWorld):
        validate_state(world([[WALL]]))
    with pytest.raises(InvalidWorld):
        validate_state(world([[SPAWN, monster_ref("M9")]]))
    with pytest.raises(InvalidWorld):
        validate_state(world([[SPAWN, key("red")]], fidelity="imperfect"))


def test_fidelity_violations_listed():
    w = world([[SPAWN, key("red"), STORE, stairs(0)]], fidelity="imperfect",
              inv=Inventory(wings=1))
    found = fidelity_violations(w)
    assert any("key:red" in v for v in found)
    assert "store" in found
    assert "perfect-only inventory" in found
    assert fidelity_violations(replace(w, fidelity=Fidelity.PERFECT)) == []


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_generated_imperfect_worlds_are_valid_and_deterministic(seed):
    w = generate_world(WorldConfig.imperfect(), seed)
    validate_state(w)
    assert w == generate_world(WorldConfig.imperfect(), seed)
    assert WorldState.from_json(w.to_json()).state_hash() == w.state_hash()


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 200), st.data())
def test_random_scripts_keep_state_valid(seed, data):
    w = generate_world(WorldConfig.imperfect(), seed)
    task = default_task(w)
    for _ in range(25):
        moves = legal_moves(w)
        if not moves or w.dead:
            break
        w, _, status = step(w, data.draw(st.sampled_from(moves)), task)
        validate_state(w)
        assert w.player_stats.life >= 0
        if status != ONGOING:
            break


def test_world_config_checks():
    with pytest.raises(ValueError):
        WorldConfig(rows=3)
    with pytest.raises(ValueError):
        WorldConfig.imperfect(max_floors=2)
    with pytest.raises(ValueError):
        WorldConfig.from_json({"colour": "red"})
    cfg = WorldConfig.perfect()
    assert WorldConfig.from_json(cfg.to_json()) == cfg


def test_generation_exhausted():
    # one attempt and no solver budget: every candidate is rejected
    cfg = WorldConfig.imperfect(max_attempts=1, solver_node_limit=0)
    with pytest.raises(GenerationExhausted):
        generate_world(cfg, 0)


def test_solver_witness_and_bounds():
    w, task = reference_world(), reference_task()
    res = validate_solvable(w, task)
    assert res
    final, _, status = replay(w, res.witness, task)
    assert status == SUCCESS
    big = world([[EMPTY] * 30 for _ in range(30)])
    with pytest.raises(GridTooLarge):
        validate_solvable(big, TaskSpec("t", "reach_tile", (0, 29, 29), "corner"), max_cells=400)


def test_unsolvable_world_detected():
    w = world([[SPAWN, WALL, stairs(1)]])
    assert not validate_solvable(w, TaskSpec("t", "reach_floor", 1, "exit"))
