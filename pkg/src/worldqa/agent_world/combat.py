"""Closed-form combat resolution.

The warrior needs ``ceil(l_m / (a - d_m))`` strikes to kill a monster; the
monster hits back for ``max(a_m - d, 0)`` per exchange. By default the
monster strikes once per warrior strike (``monster_strikes="turns"``);
``"turns_minus_one"`` drops the monster's strike after the killing blow.
A vampire additionally drains ``floor(pct * life)`` after each of its
strikes, computed on the life left after the normal damage.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from worldqa.agent_world.types import MonsterKind, Stats

MONSTER_STRIKE_MODES = ("turns", "turns_minus_one")
DEFAULT_LIFESTEAL = 0.10


@dataclass(frozen=True)
class CombatOutcome:
    feasible: bool
    turns: Optional[int]
    damage_taken: int
    residual_life: int

    @property
    def survives(self) -> bool:
        # a residual life of exactly zero still counts as survival
        return self.feasible and self.residual_life >= 0

    @property
    def lethal(self) -> bool:
        return self.feasible and self.residual_life < 0


def lifesteal_fraction(pct: float) -> Fraction:
    return Fraction(pct).limit_denominator(10_000)


def _monster_strike_count(turns: int, mode: str) -> int:
    if mode == "turns":
        return turns
    if mode == "turns_minus_one":
        return max(turns - 1, 0)
    raise ValueError(f"unknown monster_strikes mode {mode!r}")


def resolve_combat(
    player: Stats,
    monster: Stats,
    kind: MonsterKind = MonsterKind.NORMAL,
    *,
    lifesteal_pct: float = DEFAULT_LIFESTEAL,
    monster_strikes: str = "turns",
) -> CombatOutcome:
    """Outcome of ``player`` fighting ``monster`` to the death."""
    per_strike = player.attack - monster.defense
    if per_strike <= 0:
        return CombatOutcome(False, None, 0, player.life)
    turns = -(-monster.life // per_strike)
    strikes = _monster_strike_count(turns, monster_strikes)
    damage = max(monster.attack - player.defense, 0)
    if MonsterKind(kind) is not MonsterKind.VAMPIRE:
        taken = damage * strikes
        return CombatOutcome(True, turns, taken, player.life - taken)
    frac = lifesteal_fraction(lifesteal_pct)
    life = player.life
    for _ in range(strikes):
        life -= damage
        life -= (max(life, 0) * frac.numerator) // frac.denominator
    return CombatOutcome(True, turns, player.life - life, life)


def resolve_combat_arrays(
    a: np.ndarray,
    d: np.ndarray,
    l: np.ndarray,
    am: np.ndarray,
    dm: np.ndarray,
    lm: np.ndarray,
    vampire: bool = False,
    *,
    lifesteal_pct: float = DEFAULT_LIFESTEAL,
    monster_strikes: str = "turns",
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized ``resolve_combat`` over broadcastable integer arrays.

    Returns ``(feasible, turns, residual_life)``; ``turns`` is 0 where
    infeasible and ``residual_life`` equals ``l`` there.
    """
    a, d, l, am, dm, lm = np.broadcast_arrays(*(np.asarray(x, dtype=np.int64) for x in (a, d, l, am, dm, lm)))
    per_strike = a - dm
    feasible = per_strike > 0
    safe = np.where(feasible, per_strike, 1)
    turns = np.where(feasible, -(-lm // safe), 0)
    if monster_strikes == "turns":
        strikes = turns
    elif monster_strikes == "turns_minus_one":
        strikes = np.maximum(turns - 1, 0)
    else:
        raise ValueError(f"unknown monster_strikes mode {monster_strikes!r}")
    damage = np.maximum(am - d, 0)
    if not vampire:
        return feasible, turns, l - damage * strikes
    frac = lifesteal_fraction(lifesteal_pct)
    life = l.copy()
    for k in range(int(strikes.max(initial=0))):
        active = strikes > k
        hit = life - damage
        hit = hit - (np.maximum(hit, 0) * frac.numerator) // frac.denominator
        life = np.where(active, hit, life)
    return feasible, turns, life
