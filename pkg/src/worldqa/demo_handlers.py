"""In-process oracle handlers for the scripted backend.

These stand in for the actor and annotator LLMs in offline runs. They read
privileged simulator state from ``CompletionRequest.metadata`` (which never
reaches the wire or the request digest) and answer by ``purpose``:

- ``act``: a planner that follows a solver witness (Agent World) or a short
  look-ahead rollout (driving), with seeded noise on root episodes;
- ``critique``, ``tag``, ``surprise``: summaries built from the event log;
- ``draft``, ``explain``: mostly-correct drafts with a small seeded error rate,
  so simulator correction has something to fix;
- ``novelty``, ``bootstrap``, ``qa``: votes, paraphrased templates and an
  answer key.
"""
from __future__ import annotations

import json
import random
from collections import Counter
from typing import Callable, Optional

from worldqa.agent_loop import AgentWorldEnv, DrivingEnv
from worldqa.agent_world.engine import step
from worldqa.agent_world.solver import validate_solvable
from worldqa.agent_world.types import TaskSpec, WorldState
from worldqa.common import derive_seed
from worldqa.llm_gateway import CompletionRequest, Handler
from worldqa.textio import render_action
from worldqa.urban_driving.scene import EgoAction, check_outcome, step_scene

DEMO = "demo"


def _rng(*labels) -> random.Random:
    return random.Random(derive_seed(0, "demo", *labels))


# ---------------------------------------------------------------------------
# actor


_PLANS: dict = {}          # (state hash, task json) -> remaining witness
_PLAN_LIMIT = 100_000


def _plan(state: WorldState, task: TaskSpec) -> tuple:
    """Remaining actions of a committed solver witness from ``state``.

    Each witness is indexed by every state it passes through, so an actor
    that follows it keeps the same plan instead of replanning per step.
    """
    task_key = json.dumps(task.to_json(), sort_keys=True)
    hit = _PLANS.get((state.state_hash(), task_key))
    if hit is not None:
        return hit
    res = validate_solvable(state, task)
    witness = list(res.witness) if res else []
    if len(_PLANS) > _PLAN_LIMIT:
        _PLANS.clear()
    s = state
    for i, a in enumerate(witness):
        _PLANS.setdefault((s.state_hash(), task_key), tuple(render_action(x) for x in witness[i:]))
        s = step(s, a, task)[0]
    plan = tuple(render_action(a) for a in witness)
    _PLANS[(state.state_hash(), task_key)] = plan
    return plan


def _world_action(env: AgentWorldEnv, rng: random.Random, noise: float) -> str:
    legal = [render_action(a) for a in env.legal_actions()]
    if legal and rng.random() < noise:
        return rng.choice(legal)
    plan = _plan(env.state, env.task)
    if plan:
        return plan[0]
    return legal[0] if legal else "move(up)"


def _rollout_score(scene, first: EgoAction, ticks: int) -> float:
    sc = scene
    for i in range(ticks):
        sc, _ = step_scene(sc, first if i == 0 else EgoAction.IDLE)
        status = check_outcome(sc)[0]
        if status == "failure":
            return -1e6 + i
        if status == "success":
            return 1e6 - i
    ego = sc.ego
    if ego is None:
        return -1e6
    score = ego.s
    goal = sc.goal
    if goal is not None and goal.lane_id is not None:
        score -= 50.0 * abs(sc.lanes[ego.lane_id].lateral - sc.lanes[goal.lane_id].lateral)
    return score


def _drive_action(env: DrivingEnv, rng: random.Random, noise: float) -> str:
    legal = env.legal_actions()
    if not legal:
        return "idle()"
    if rng.random() < noise:
        return rng.choice(legal).render()
    horizon = 3 * env.decision_ticks
    scored = [(_rollout_score(env.scene, a, horizon), -i, a) for i, a in enumerate(legal)]
    return max(scored)[2].render()


def make_actor(noise: float = 0.25, solve: Optional[Callable[[str], bool]] = None) -> Handler:
    """Oracle actor; root episodes err with probability ``noise``.

    ``solve(task_id)`` false makes the actor stall on that task (for
    partial-solver evaluation fixtures).
    """

    def act(req: CompletionRequest) -> str:
        md = req.metadata
        env = md["env"]
        if solve is not None and not solve(env.task_id):
            return "I am not sure what to do here."
        rng = _rng("act", md.get("episode_seed", 0), md.get("step", 0), bool(md.get("reprompt")))
        p = noise if md.get("refinement_round", 0) == 0 else 0.0
        if isinstance(env, AgentWorldEnv):
            action = _world_action(env, rng, p)
        else:
            action = _drive_action(env, rng, p)
        return f"Thought: pick the move that keeps the plan on track.\nAction: {action}"

    return act


# ---------------------------------------------------------------------------
# annotator


def _world_story(rec) -> list[str]:
    parts = []
    for s in rec.steps:
        for e in s.events:
            k = e["kind"]
            if k == "Collected":
                parts.append(f"collect the {str(e['item']).replace(':', ' ')}")
            elif k == "DoorOpened":
                parts.append(f"open the {e['color']} door")
            elif k == "CombatWon":
                parts.append(f"defeat {e['monster']}")
            elif k == "Traded":
                parts.append(f"trade for {e['stat']}")
            elif k == "WallRemoved":
                parts.append("dig through a wall")
            elif k == "ReachedStairs":
                parts.append("take the stairs")
    return parts


def _drive_story(rec) -> list[str]:
    parts = []
    for s in rec.steps:
        if s.action and s.action != "idle()" and (not parts or parts[-1] != s.action.rstrip("()").replace("_", " ")):
            parts.append(s.action.rstrip("()").replace("_", " "))
    return parts or ["keep the lane"]


def _tag(rec) -> str:
    story = _world_story(rec) if rec.env_kind == "agent_world" else _drive_story(rec)
    wasted = sum(1 for s in rec.steps for e in s.events if e["kind"] in ("IllegalMove", "NoOp", "SkillFailed"))
    text = ", ".join(story[:8]) or "wander without progress"
    extra = f" with {wasted} wasted steps" if wasted else ""
    return f"firstly {text}{extra}; {rec.outcome.lower()} after {len(rec.steps)} steps"


def _critique(req: CompletionRequest) -> str:
    prior = req.metadata.get("prior")
    bad = Counter(e["kind"] for s in (prior.steps if prior else []) for e in s.events
                  if e["kind"] in ("IllegalMove", "PlayerDied", "Collision", "OffRoad", "NoOp", "CombatInfeasible"))
    issues = ", ".join(f"{k} x{v}" for k, v in sorted(bad.items())) or "too slow"
    return f"The attempt went wrong because of: {issues}. Plan the shortest safe route and avoid wasted moves."


def _surprise(req: CompletionRequest) -> str:
    item = req.metadata.get("item")
    if hasattr(item, "outcome"):
        base = {"Success": 3, "Failure": 7, "Budget": 5}[item.outcome]
        base += 2 if item.ood else 0
    elif hasattr(item, "kind"):
        base = {"MultipleChoice": 3, "EpisodicMemory": 4, "Rationale": 5, "Counterfactual": 7,
                "PlanComparison": 6}.get(item.kind, 5) + (2 if getattr(item, "ood", False) else 0)
    else:
        base = 5
    jitter = _rng("surprise", req.prompt).choice((-1, 0, 0, 1))
    return str(min(10, max(1, base + jitter)))


DRAFT_ERROR_RATE = 0.15


def _draft(req: CompletionRequest) -> str:
    md = req.metadata
    options, gold = md.get("options"), md.get("gold")
    rng = _rng("draft", md.get("question", ""))
    answer = gold
    if options and rng.random() < DRAFT_ERROR_RATE:
        answer = rng.choice([chr(65 + i) for i in range(len(options))])
    if answer is None:
        answer = "A"
    lines = [f"Question: {md.get('question', '')}", f"Answer: {answer}"]
    if md.get("rationale"):
        lines.append(f"Rationale: {md.get('hint') or 'the action moved the plan forward'}.")
    return "\n".join(lines)


def _explain(req: CompletionRequest) -> str:
    hint = req.metadata.get("hint") or "the simulator replay settles it"
    return f"Because {hint}."


def _novelty(req: CompletionRequest) -> list[str]:
    sample = req.metadata.get("sample")
    key = sample.id if sample is not None else req.prompt
    rng = _rng("novelty", key)
    redundant = rng.random() < 0.05
    return [("Looks redundant. redundant" if redundant and i < 3 else "Adds coverage. novel") for i in range(req.n)]


PARAPHRASES = {
    "aw.combat_damage": ["With {life} health, {attack} attack and {defense} defense, what damage would fighting "
                         "{monster} (health {m_life}, attack {m_attack}, defense {m_defense}) cost you?"],
    "aw.item_priority": ["To raise your {stat} as much as possible, which item should you go for first?"],
    "aw.last_position_of": ["Where did you last see a {category}?"],
    "aw.reachable_directly": ["From where you stood at step {step}, was the {target} at {pos} reachable without "
                              "any fight, door or item?"],
    "aw.next_action_rationale": ["Why did you take {action} at step {step}, and what did it accomplish?"],
    "dr.future_movement": ["How is the {label} {where} likely to move after t={t} s?"],
    "dr.collision_query": ["Would idling for {seconds} seconds from t={t} s have led to a crash or leaving the road?"],
    "dr.last_lane": ["In which lane was your car when {event}?"],
    "dr.rationale_action": ["What situation made {action} the right call at t={t} s, and why?"],
}


def _bootstrap(req: CompletionRequest) -> str:
    md = req.metadata
    pool = md.get("pool")
    have = {t.skeleton for t in pool} if pool is not None else set()
    out = []
    for t in md.get("exemplars", ()):
        for sk in PARAPHRASES.get(t.question_class, ()):
            if sk not in have:
                out.append(json.dumps({"question_class": t.question_class, "skeleton": sk, "kind": t.kind,
                                       "env_kind": t.env_kind, "temporal_scale": t.temporal_scale}))
                have.add(sk)
    return "\n".join(out[:md.get("per_round", 2)]) or "No new templates."


def _qa(req: CompletionRequest) -> str:
    return f"Answer: {req.metadata.get('gold', 'A')}"


def make_demo_handler(actor: Optional[Handler] = None) -> Handler:
    """One handler that dispatches on ``metadata['purpose']``."""
    actor = actor or make_actor()
    table = {"act": actor, "critique": _critique, "tag": lambda r: _tag(r.metadata["record"]),
             "surprise": _surprise, "draft": _draft, "explain": _explain, "novelty": _novelty,
             "bootstrap": _bootstrap, "qa": _qa}

    def handle(req: CompletionRequest):
        fn = table.get(req.metadata.get("purpose"))
        if fn is None:
            return "I cannot help with that."
        return fn(req)

    return handle


def demo_handlers(noise: float = 0.25) -> dict[str, Handler]:
    return {DEMO: make_demo_handler(make_actor(noise)), "answer_key": _qa}


__all__ = ["DEMO", "demo_handlers", "make_actor", "make_demo_handler"]
