"""Independent reference implementations used to freeze expected values.

Nothing here imports the code under test except plain data types; each
oracle recomputes its answer the slow, obvious way.
"""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


# ---------------------------------------------------------------------------
# combat: literal exchange-by-exchange simulation


def simulate_combat(a, d, l, am, dm, lm, vampire=False, pct=Fraction(1, 10), strike_after_kill=True):
    """One fight, strike by strike: warrior hits, then the monster answers.

    With ``strike_after_kill`` false the monster stays silent once it is
    dead. Returns ``(feasible, turns, residual_life)``.
    """
    if a - dm <= 0:
        return False, 0, l
    life, m_life, turns = l, lm, 0
    while m_life > 0:
        m_life -= a - dm
        turns += 1
        if m_life <= 0 and not strike_after_kill:
            break
        life -= max(am - d, 0)
        if vampire:
            life -= math.floor(pct * max(life, 0))
    return True, turns, life


def simulate_combat_grid(lo=1, hi=20, vampire=False, pct=Fraction(1, 10)):
    """Brute force over every stat in ``[lo, hi]``, indexed ``[a, d, l, am, dm, lm]``.

    The fight splits into two independent loops: the monster's life ticking
    down (depends on a, dm, lm) and the warrior's life ticking down (depends
    on d, l, am). Both are simulated step by step and then joined.
    """
    vals = np.arange(lo, hi + 1, dtype=np.int64)
    n = len(vals)
    # turns[a, dm, lm] by repeated subtraction
    A, DM, LM = np.meshgrid(vals, vals, vals, indexing="ij")
    per = A - DM
    feasible = per > 0
    m_life = LM.copy()
    turns = np.zeros_like(LM)
    while True:
        alive = feasible & (m_life > 0)
        if not alive.any():
            break
        m_life = np.where(alive, m_life - per, m_life)
        turns += alive
    max_turns = int(turns.max())
    # traj[k, d, l, am]: warrior life after k monster strikes
    D, L, AM = np.meshgrid(vals, vals, vals, indexing="ij")
    hit = np.maximum(AM - D, 0)
    traj = np.empty((max_turns + 1, n, n, n), dtype=np.int64)
    traj[0] = L
    for k in range(1, max_turns + 1):
        life = traj[k - 1] - hit
        if vampire:
            life = life - (np.maximum(life, 0) * pct.numerator) // pct.denominator
        traj[k] = life
    return vals, feasible, turns, traj


def grid_residual(feasible, turns, traj, ia, idm, ilm):
    """Residual life for fixed (a, dm, lm) indices over all (d, l, am)."""
    if not feasible[ia, idm, ilm]:
        return None
    return traj[turns[ia, idm, ilm]]


# ---------------------------------------------------------------------------
# sampling and splitting


def first_pick_probability(weights, i):
    """Weighted sampling without replacement: P(item i is drawn first)."""
    return Fraction(weights[i]) / sum(Fraction(w) for w in weights)


def largest_remainder(total, ratios):
    """Hamilton apportionment; ties on the remainder go to the earlier entry."""
    shares = [Fraction(total) * Fraction(str(r)) / sum(Fraction(str(x)) for x in ratios) for r in ratios]
    floors = [s.numerator // s.denominator for s in shares]
    left = total - sum(floors)
    order = sorted(range(len(ratios)), key=lambda i: (-(shares[i] - floors[i]), i))
    for i in order[:left]:
        floors[i] += 1
    return floors


# ---------------------------------------------------------------------------
# retrieval


def cosine_rank(query, vectors, ids, k, decimals=12):
    """Top-k ids by cosine similarity, ties (to ``decimals`` places) broken by id; pure Python."""
    def norm(v):
        return math.sqrt(sum(x * x for x in v))

    qn = norm(query)
    scored = []
    for v, i in zip(vectors, ids):
        vn = norm(v)
        sim = 0.0 if qn == 0 or vn == 0 else sum(x * y for x, y in zip(query, v)) / (qn * vn)
        scored.append((-sim, i))
    scored.sort(key=lambda x: (round(x[0], decimals), x[1]))
    return [i for _, i in scored[:k]], [-s for s, _ in scored[:k]]


# ---------------------------------------------------------------------------
# car following


def idm_equilibrium_gap(v, v0=30.0, T=1.5, s0=2.0, delta=4):
    """Gap where the IDM acceleration vanishes for a follower matching the leader's speed."""
    return (s0 + v * T) / math.sqrt(1.0 - (v / v0) ** delta)
