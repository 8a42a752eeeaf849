"""Intelligent Driver Model (Treiber form)."""
from __future__ import annotations

import math
from dataclasses import dataclass

B_EMERGENCY = 8.0


class InvalidGap(ValueError):
    """A leader sits at or behind the follower's front bumper."""


@dataclass(frozen=True)
class IdmParams:
    v0: float = 30.0     # desired speed, m/s
    T: float = 1.5       # time headway, s
    a_max: float = 1.5   # maximum acceleration, m/s^2
    b: float = 2.0       # comfortable deceleration, m/s^2
    delta: float = 4.0   # acceleration exponent
    s0: float = 2.0      # jam distance, m

    def __post_init__(self) -> None:
        for name in ("v0", "T", "a_max", "b", "delta", "s0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"IDM parameter {name} must be positive")
        if self.delta < 1:
            raise ValueError("delta must be >= 1")

    def to_json(self) -> dict:
        return {"v0": self.v0, "T": self.T, "a_max": self.a_max, "b": self.b,
                "delta": self.delta, "s0": self.s0}

    @classmethod
    def from_json(cls, d: dict) -> "IdmParams":
        return cls(**d)


def desired_gap(v: float, delta_v: float, p: IdmParams) -> float:
    return p.s0 + v * p.T + v * delta_v / (2.0 * math.sqrt(p.a_max * p.b))


def idm_acceleration(
    v: float,
    gap: float,
    delta_v: float,
    p: IdmParams,
    b_emergency: float = B_EMERGENCY,
) -> float:
    """IDM acceleration for a follower at speed ``v``.

    ``gap`` is bumper-to-bumper distance to the leader (``math.inf`` on a free
    road) and ``delta_v = v - v_leader`` the approach rate. The result is
    clamped to ``[-b_emergency, a_max]``.
    """
    free = 1.0 - (v / p.v0) ** p.delta
    if math.isinf(gap):
        acc = p.a_max * free
    else:
        if gap <= 0:
            raise InvalidGap(f"gap {gap} <= 0")
        acc = p.a_max * (free - (desired_gap(v, delta_v, p) / gap) ** 2)
    return min(max(acc, -b_emergency), p.a_max)


def equilibrium_gap(v: float, p: IdmParams) -> float:
    """Steady-state gap at speed ``v`` behind a leader at the same speed."""
    return desired_gap(v, 0.0, p) / math.sqrt(1.0 - (v / p.v0) ** p.delta)
