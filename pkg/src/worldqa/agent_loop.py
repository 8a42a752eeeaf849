"""ReAct-style experience sampling: episodes, self-refinement, voting.

An episode alternates observation, LLM reply, parsed action and simulator
step. Unparseable replies get one reprompt and then become a no-op, so an
episode always runs to goal resolution or its step budget.
"""
from __future__ import annotations

import logging
import re
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional, Sequence, Union

from worldqa.agent_world.engine import (
    NoOrbAccess, check_goal, legal_moves, orb_report, step,
)
from worldqa.agent_world.solver import free_region, path_to
from worldqa.agent_world.types import DIRECTIONS, Move, TaskSpec, WorldState
from worldqa.common import Event, content_hash, derive_seed
from worldqa.llm_gateway import ChatMessage, Gateway, GatewayExhausted
from worldqa.textio import (
    Action, ObservationText, SkillCall, UnparseableAction, default_skills, parse_action,
    render_agent_world, render_driving,
)
from worldqa.urban_driving.scenarios import ScenarioSpec, spawn_scenario
from worldqa.urban_driving.scene import EGO, EgoAction, TrafficScene, check_outcome, step_scene

log = logging.getLogger(__name__)

OUTCOMES = ("Success", "Failure", "Budget")

# ---------------------------------------------------------------------------
# environments


class AgentWorldEnv:
    env_kind = "agent_world"

    def __init__(self, state: WorldState, task: TaskSpec):
        self.initial = state
        self.task = task
        self.reset()

    def reset(self) -> None:
        self.state = self.initial
        self.status = check_goal(self.state, self.task)

    @property
    def task_id(self) -> str:
        return self.task.task_id

    @property
    def fidelity(self) -> str:
        return self.state.fidelity.value

    @property
    def seed(self) -> int:
        return self.initial.seed

    def spec(self) -> dict:
        return {"env_kind": self.env_kind, "state": self.initial.to_json(), "task": self.task.to_json()}

    def observe(self) -> ObservationText:
        return render_agent_world(self.state, self.task)

    def goal_text(self) -> str:
        return self.task.describe()

    def state_hash(self) -> str:
        return self.state.state_hash()

    def legal_actions(self) -> list:
        return legal_moves(self.state)

    def expand(self, action: Action) -> list:
        """Primitive actions for ``action``; skills become move sequences."""
        if isinstance(action, SkillCall):
            if action.name == "go_to":
                return _route(self.state, tuple(action.args))
            return []
        return [action]

    def apply(self, action: Action) -> list[Event]:
        prims = self.expand(action)
        if isinstance(action, SkillCall) and not prims:
            self.state = replace(self.state, turn=self.state.turn + 1)
            return [Event("SkillFailed", skill=action.render())]
        events: list[Event] = []
        for a in prims:
            self.state, evs, self.status = step(self.state, a, self.task)
            events.extend(evs)
            if self.status != "ongoing":
                break
        return events

    def noop(self) -> list[Event]:
        return [Event("NoOp")]


def _route(state: WorldState, target: tuple) -> list:
    """Shortest passable path to ``target`` (or next to it, then one step in)."""
    if len(target) != 2 or not state.in_bounds(target) or target == state.player_pos:
        return []
    region = free_region(state)
    if target in region:
        return path_to(region, target)
    for d, (dr, dc) in DIRECTIONS.items():
        prev = (target[0] - dr, target[1] - dc)
        if prev in region:
            return path_to(region, prev) + [Move(d)]
    return []


class DrivingEnv:
    """One decision every ``decision_ticks`` simulator ticks."""

    env_kind = "driving"

    def __init__(self, spec: ScenarioSpec, decision_ticks: int = 10):
        self.scenario = spec
        self.decision_ticks = decision_ticks
        self.reset()

    def reset(self) -> None:
        self.scene: TrafficScene = spawn_scenario(self.scenario)
        self.status = check_outcome(self.scene)[0]

    @property
    def task_id(self) -> str:
        return f"{self.scenario.template}#{self.scenario.seed}"

    @property
    def fidelity(self) -> str:
        return self.scenario.fidelity

    @property
    def seed(self) -> int:
        return self.scenario.seed

    def spec(self) -> dict:
        return {"env_kind": self.env_kind, "scenario": self.scenario.to_json(),
                "decision_ticks": self.decision_ticks}

    def observe(self) -> ObservationText:
        return render_driving(self.scene)

    def goal_text(self) -> str:
        return self.scene.goal.describe() if self.scene.goal else "drive safely"

    def state_hash(self) -> str:
        return self.scene.state_hash()

    def legal_actions(self) -> list:
        ego = self.scene.ego
        if ego is None:
            return []
        lane = self.scene.lanes[ego.lane_id]
        acts = [EgoAction.IDLE, EgoAction.FASTER, EgoAction.SLOWER]
        if lane.left is not None:
            acts.append(EgoAction.LANE_LEFT)
        if lane.right is not None:
            acts.append(EgoAction.LANE_RIGHT)
        return acts

    def _resolve(self, action: Action) -> Optional[EgoAction]:
        if isinstance(action, EgoAction):
            return action
        if isinstance(action, SkillCall) and action.name == "lane_change" and self.scene.ego:
            target = action.args[0]
            here = self.scene.ego.lane_id
            lane = self.scene.lanes[here]
            if target == here or target not in self.scene.lanes:
                return None
            want_left = self.scene.lanes[target].lateral > lane.lateral
            return EgoAction.LANE_LEFT if want_left else EgoAction.LANE_RIGHT
        return None

    def apply(self, action: Action) -> list[Event]:
        ego_action = self._resolve(action)
        if ego_action is None:
            return [Event("SkillFailed", skill=action.render())] + self.noop()
        return self._advance(ego_action)

    def _advance(self, first: EgoAction) -> list[Event]:
        events: list = []
        for i in range(self.decision_ticks):
            self.scene, evs = step_scene(self.scene, first if i == 0 else EgoAction.IDLE)
            events.extend(evs)
            self.status = check_outcome(self.scene)[0]
            if self.status != "ongoing":
                break
        return events

    def noop(self) -> list[Event]:
        return self._advance(EgoAction.IDLE)


Env = Union[AgentWorldEnv, DrivingEnv]


def make_env(env_spec: dict) -> Env:
    kind = env_spec["env_kind"]
    if kind == "agent_world":
        return AgentWorldEnv(WorldState.from_json(env_spec["state"]), TaskSpec.from_json(env_spec["task"]))
    if kind == "driving":
        return DrivingEnv(ScenarioSpec.from_json(env_spec["scenario"]), env_spec.get("decision_ticks", 10))
    raise ValueError(f"unknown env kind {kind!r}")


# ---------------------------------------------------------------------------
# tools


@dataclass(frozen=True)
class Tool:
    name: str
    description: str
    input_schema: dict
    fn: Callable[[Any, dict], Any]

    def __call__(self, env, args: dict):
        return self.fn(env, args)


def _orb_tool(env: AgentWorldEnv, args: dict):
    try:
        return [{"monster": e.monster_id, "feasible": e.feasible, "damage": e.damage, "lethal": e.lethal}
                for e in orb_report(env.state)]
    except NoOrbAccess as e:
        return {"error": str(e)}


def detect_objects(scene: TrafficScene) -> list[dict]:
    """Ground-truth object list relative to the ego vehicle."""
    ego = scene.ego
    if ego is None:
        return []
    out = []
    for v in sorted(scene.vehicles.values(), key=lambda v: (v.lane_id, v.s, v.id)):
        if v.id == EGO:
            continue
        out.append({"id": v.id, "label": v.label, "lane": v.lane_id,
                    "rel_s": round(v.s - ego.s, 2), "speed": round(v.v, 2)})
    for o in sorted(scene.obstacles.values(), key=lambda o: o.id):
        if o.active(scene.t):
            out.append({"id": o.id, "label": o.label, "lane": o.lane_id,
                        "rel_s": round(o.s - ego.s, 2), "speed": 0.0})
    for p in sorted(scene.pedestrians.values(), key=lambda p: p.id):
        lanes = scene.lanes_at_lateral(scene.pedestrian_y(p))
        out.append({"id": p.id, "label": p.label, "lane": lanes[0] if lanes else None,
                    "rel_s": round(p.s - ego.s, 2), "speed": 0.0})
    return out


def default_tools(env_kind: str) -> dict[str, Tool]:
    if env_kind == "agent_world":
        return {"orb": Tool("orb", "Predicted damage for every monster on this floor (needs the orb).",
                            {"type": "object", "properties": {}}, _orb_tool)}
    return {"detect_objects": Tool("detect_objects", "List nearby road users and obstacles.",
                                   {"type": "object", "properties": {}},
                                   lambda env, args: detect_objects(env.scene))}


# ---------------------------------------------------------------------------
# records


@dataclass
class EpisodeStep:
    observation: str
    raw: str
    thought: str
    action: Optional[str]          # canonical call text, None for a no-op
    events: list
    tool_calls: list = field(default_factory=list)
    reprompts: int = 0

    def to_json(self) -> dict:
        return {"observation": self.observation, "raw": self.raw, "thought": self.thought,
                "action": self.action, "events": [dict(e) for e in self.events],
                "tool_calls": self.tool_calls, "reprompts": self.reprompts}

    @classmethod
    def from_json(cls, d: dict) -> "EpisodeStep":
        return cls(d["observation"], d["raw"], d["thought"], d["action"], list(d["events"]),
                   list(d.get("tool_calls", [])), int(d.get("reprompts", 0)))


# fields that annotation adds later and that therefore stay out of the uid
_MUTABLE = ("uid", "tag", "surprise", "surprise_flagged")


@dataclass
class EpisodeRecord:
    env_kind: str
    task_id: str
    fidelity: str
    seed: int
    env_spec: dict
    steps: list[EpisodeStep]
    outcome: str
    refinement_round: int = 0
    parent_episode: Optional[str] = None
    tag: Optional[str] = None
    surprise: Optional[int] = None
    surprise_flagged: bool = False
    meta: dict = field(default_factory=dict)
    uid: str = ""

    def __post_init__(self) -> None:
        if self.outcome not in OUTCOMES:
            raise ValueError(f"bad outcome {self.outcome!r}")
        if self.refinement_round > 0 and not self.parent_episode:
            raise ValueError("a refinement needs its parent episode")
        if self.surprise is not None and not 1 <= self.surprise <= 10:
            raise ValueError("surprise lies in [1, 10]")
        if not self.uid:
            self.uid = self.content_hash()

    def content_hash(self) -> str:
        d = self.to_json()
        for k in _MUTABLE:
            d.pop(k)
        return content_hash(d, 24)

    @property
    def actions(self) -> list[Optional[str]]:
        return [s.action for s in self.steps]

    @property
    def ood(self) -> bool:
        return bool(self.env_spec.get("scenario", {}).get("template") in _ood_templates())

    def to_json(self) -> dict:
        return {"uid": self.uid, "env_kind": self.env_kind, "task_id": self.task_id,
                "fidelity": self.fidelity, "seed": self.seed, "env_spec": self.env_spec,
                "steps": [s.to_json() for s in self.steps], "outcome": self.outcome,
                "refinement_round": self.refinement_round, "parent_episode": self.parent_episode,
                "tag": self.tag, "surprise": self.surprise, "surprise_flagged": self.surprise_flagged,
                "meta": self.meta}

    @classmethod
    def from_json(cls, d: dict) -> "EpisodeRecord":
        d = dict(d)
        d["steps"] = [EpisodeStep.from_json(s) for s in d["steps"]]
        return cls(**d)

    def digest(self, max_steps: int = 30) -> str:
        """Compact plan-and-outcome summary used in prompts."""
        lines = [f"Environment: {self.env_kind} ({self.fidelity}), task {self.task_id}",
                 f"Outcome: {self.outcome} after {len(self.steps)} steps"]
        for i, s in enumerate(self.steps[:max_steps]):
            kinds = ",".join(sorted({e["kind"] for e in s.events})) or "-"
            lines.append(f"{i}: {s.action or 'no-op'} -> {kinds}")
        if len(self.steps) > max_steps:
            lines.append(f"... {len(self.steps) - max_steps} more steps")
        return "\n".join(lines)


def _ood_templates():
    from worldqa.urban_driving.scenarios import OOD
    return OOD


class EpisodeAborted(GatewayExhausted):
    """The backend gave up mid-episode; ``record`` holds the partial episode."""

    def __init__(self, message: str, record: EpisodeRecord):
        super().__init__(message)
        self.record = record
        self.chain = [record]


# ---------------------------------------------------------------------------
# memory


class MemoryWindow:
    """FIFO window over the most recent (observation digest, action, events)."""

    def __init__(self, capacity: int = 8):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity) if capacity else deque(maxlen=0)

    def push(self, observation: str, action: Optional[str], events: Sequence) -> None:
        kinds = tuple(e["kind"] for e in events)
        self._items.append((content_hash(observation, 12), action, kinds))

    @property
    def retained(self) -> list[tuple]:
        return list(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def render(self, first_index: int) -> str:
        lines = []
        start = first_index - len(self._items)
        for i, (_, action, kinds) in enumerate(self._items):
            lines.append(f"step {start + i}: {action or 'no-op'} -> {', '.join(kinds) or 'nothing happened'}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# prompting

SYSTEM_PROMPTS = {
    "agent_world": (
        "You control a warrior in a grid tower. Actions: move(up|down|left|right), "
        "use_shovel(direction), use_wing(), trade(attack|defense|life), inspect_orb(), "
        "or the skill go_to(row, col). Think briefly, then end with one call, e.g. 'Action: move(up)'."
    ),
    "driving": (
        "You drive the ego vehicle. Actions: lane_left(), lane_right(), faster(), slower(), idle(), "
        "or the skill lane_change(lane_id). Think briefly, then end with one call, e.g. 'Action: idle()'."
    ),
}
ACT_HEADER = "[act]"
REPROMPT = "Your reply contained no valid action ({reason}). Reply again and end with exactly one action call."


def _act_prompt(env: Env, obs: ObservationText, memory: MemoryWindow, index: int,
                tools: dict[str, Tool], preface: Optional[str], tool_log: list) -> str:
    parts = [f"{ACT_HEADER} step {index}", f"Goal: {env.goal_text()}"]
    if preface:
        parts.append("Critique of a previous attempt:\n" + preface)
    if len(memory):
        parts.append("Recent steps:\n" + memory.render(index))
    if tools:
        parts.append("Tools (call as name()):\n" + "\n".join(f"- {t.name}: {t.description}"
                                                           for t in tools.values()))
    for name, _, output in tool_log:
        parts.append(f"Tool {name} returned: {output}")
    parts.append("Observation:\n" + obs.text)
    return "\n\n".join(parts)


def _thought(raw: str) -> str:
    text = raw.strip()
    cut = text.lower().rfind("action:")
    return text[:cut].strip() if cut > 0 else text


def run_episode(env: Env, llm: Gateway, tools: Optional[dict[str, Tool]] = None, memory: int = 8,
                max_steps: int = 50, *, preface: Optional[str] = None, episode_seed: int = 0,
                refinement_round: int = 0, parent: Optional[str] = None, temperature: float = 0.0,
                max_tool_calls: int = 2) -> EpisodeRecord:
    """Run one episode from ``env``'s current (freshly reset) state."""
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    tools = default_tools(env.env_kind) if tools is None else tools
    skills = default_skills(env.env_kind)
    window = MemoryWindow(memory)
    steps: list[EpisodeStep] = []
    system = ChatMessage("system", SYSTEM_PROMPTS[env.env_kind])
    meta: dict = {"episode_seed": episode_seed}
    if preface:
        meta["critique"] = preface

    def record(outcome: str) -> EpisodeRecord:
        return EpisodeRecord(env.env_kind, env.task_id, env.fidelity, env.seed, env.spec(), steps,
                             outcome, refinement_round, parent, meta=dict(meta))

    try:
        for i in range(max_steps):
            if env.status != "ongoing":
                break
            obs = env.observe()
            tool_log: list = []
            reprompts = 0
            action = None
            while True:
                prompt = _act_prompt(env, obs, window, i, tools, preface, tool_log)
                messages = [system, ChatMessage("user", prompt)]
                md = {"purpose": "act", "env": env, "step": i, "episode_seed": episode_seed,
                      "refinement_round": refinement_round}
                raw = llm.ask(messages, temperature=temperature, metadata=md)[0]
                try:
                    action = parse_action(raw, env.env_kind, skills)
                except UnparseableAction as e:
                    messages += [ChatMessage("assistant", raw or "(empty)"),
                                 ChatMessage("user", REPROMPT.format(reason=e.reason))]
                    reprompts += 1
                    raw2 = llm.ask(messages, temperature=temperature, metadata={**md, "reprompt": True})[0]
                    raw = raw + "\n---\n" + raw2
                    try:
                        action = parse_action(raw2, env.env_kind, skills)
                    except UnparseableAction:
                        action = None
                if isinstance(action, SkillCall) and action.name in tools and len(tool_log) < max_tool_calls:
                    output = tools[action.name](env, {})
                    tool_log.append((action.name, {}, output))
                    continue
                break
            if action is None or (isinstance(action, SkillCall) and action.name in tools):
                events = env.noop()
                rendered = None
            else:
                events = env.apply(action)
                rendered = action.render()
            step_rec = EpisodeStep(obs.text, raw, _thought(raw), rendered, [dict(e) for e in events],
                                   [{"name": n, "input": a, "output": o} for n, a, o in tool_log], reprompts)
            steps.append(step_rec)
            window.push(obs.text, rendered, events)
    except GatewayExhausted as e:
        meta["gateway_exhausted"] = True
        raise EpisodeAborted(str(e), record("Budget")) from e
    status = env.status
    outcome = "Success" if status == "success" else "Failure" if status == "failure" else "Budget"
    return record(outcome)


def replay_episode(record: EpisodeRecord) -> tuple[list[list[dict]], str, Env]:
    """Re-simulate ``record``'s actions; returns (events per step, status, final env)."""
    env = make_env(record.env_spec)
    skills = default_skills(env.env_kind)
    log_ = []
    for s in record.steps:
        if s.action is None:
            events = env.noop()
        else:
            events = env.apply(parse_action(s.action, env.env_kind, skills))
        log_.append([dict(e) for e in events])
    return log_, env.status, env


def replay_matches(record: EpisodeRecord) -> bool:
    events, status, _ = replay_episode(record)
    expected = {"Success": "success", "Failure": "failure"}.get(record.outcome)
    same_events = events == [s.events for s in record.steps]
    return same_events and (expected is None or status == expected)


# ---------------------------------------------------------------------------
# refinement and voting

CRITIQUE_HEADER = "[critique]"


def critique_prompt(prior: EpisodeRecord, goal: str) -> str:
    failures = []
    for i, s in enumerate(prior.steps):
        for e in s.events:
            if e["kind"] in ("PlayerDied", "CombatInfeasible", "IllegalMove", "Collision", "OffRoad",
                             "SkillFailed", "TradeRejected", "NoOp"):
                failures.append(f"step {i}: {e['kind']}")
    plan = ", ".join(a or "no-op" for a in prior.actions) or "(no actions)"
    return "\n".join([
        f"{CRITIQUE_HEADER} A previous attempt did not achieve the goal.",
        f"Goal: {goal}",
        f"Previous plan: {plan}",
        f"Outcome: {prior.outcome}",
        "Problems: " + ("; ".join(failures[:20]) if failures else "none recorded"),
        "Write a short critique and a better plan.",
    ])


def self_refine(env_spec: dict, prior: EpisodeRecord, llm: Gateway, **run_kw) -> EpisodeRecord:
    """Critique ``prior`` and run a fresh episode with the critique prepended."""
    env = make_env(env_spec)
    prompt = critique_prompt(prior, env.goal_text())
    critique = llm.ask(prompt, metadata={"purpose": "critique", "env": env, "prior": prior})[0].strip()
    run_kw.setdefault("episode_seed", derive_seed(prior.meta.get("episode_seed", 0), "refine",
                                                  prior.refinement_round + 1))
    return run_episode(env, llm, preface=critique or "(no critique)",
                       refinement_round=prior.refinement_round + 1, parent=prior.uid, **run_kw)


class NoExtractableAnswer(ValueError):
    pass


_ANSWER = re.compile(r"answer\s*(?:is)?\s*[:\-]?\s*\(?([A-Z])\)?(?![A-Za-z])", re.IGNORECASE)
_BARE = re.compile(r"^\s*\(?([A-Z])\)?[.)]?\s*$")


def extract_choice(text: str) -> Optional[str]:
    """Choice letter from a reply: the last "Answer: X", else a bare letter."""
    found = _ANSWER.findall(text)
    if found:
        return found[-1].upper()
    m = _BARE.match(text)
    return m.group(1) if m else None


def extract_word(*words: str) -> Callable[[str], Optional[str]]:
    """Extractor for a closed vocabulary: the last listed word in the reply."""
    pat = re.compile(r"\b(" + "|".join(re.escape(w) for w in words) + r")\b", re.IGNORECASE)

    def extract(text: str) -> Optional[str]:
        found = pat.findall(text)
        return found[-1].lower() if found else None
    return extract


@dataclass
class VoteResult:
    answer: str
    counts: dict
    tie: bool = False
    failed: int = 0

    def __iter__(self):
        return iter((self.answer, self.counts))


def self_consistency(prompt: Union[str, list], n: int, llm: Gateway,
                     extractor: Callable[[str], Optional[str]] = extract_choice,
                     temperature: float = 0.7, metadata: Optional[dict] = None) -> VoteResult:
    """Majority over ``n`` samples; ties go to the lexicographically smallest answer."""
    if n < 1:
        raise ValueError("n must be >= 1")
    replies = llm.ask(prompt, n=n, temperature=temperature, metadata=metadata or {})
    votes = [extractor(r) for r in replies]
    counts = Counter(v for v in votes if v is not None)
    if not counts:
        raise NoExtractableAnswer(f"none of {n} samples yielded an answer")
    top = max(counts.values())
    leaders = sorted(a for a, c in counts.items() if c == top)
    return VoteResult(leaders[0], dict(sorted(counts.items())), len(leaders) > 1,
                      sum(v is None for v in votes))


# ---------------------------------------------------------------------------
# sampling


def collect_one(spec: dict, index: int, llm: Gateway, refine_depth: int = 0, *, max_steps: int = 50,
                master_seed: int = 0, memory: int = 8) -> list[EpisodeRecord]:
    """Root episode ``index`` on ``spec`` plus its refinement chain.

    ``EpisodeAborted`` carries the partial chain in its ``chain`` attribute.
    """
    seed = derive_seed(master_seed, "episode", index)
    chain: list[EpisodeRecord] = []
    try:
        rec = run_episode(make_env(spec), llm, memory=memory, max_steps=max_steps, episode_seed=seed)
        chain.append(rec)
        while rec.outcome != "Success" and rec.refinement_round < refine_depth:
            rec = self_refine(spec, rec, llm, memory=memory, max_steps=max_steps)
            chain.append(rec)
    except EpisodeAborted as e:
        e.chain = chain + [e.record]
        raise
    return chain


def sample_experiences(env_specs: Sequence[dict], budget: int, llm: Gateway, refine_depth: int = 0,
                       store=None, *, max_steps: int = 50, master_seed: int = 0, memory: int = 8
                       ) -> list[EpisodeRecord]:
    """Round-robin ``budget`` root episodes; failures spawn up to ``refine_depth`` refinements.

    Every episode is returned, and appended to ``store`` when one is given.
    On gateway exhaustion the partial episodes are stored before re-raising.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if not env_specs:
        raise ValueError("no environments to sample")
    out: list[EpisodeRecord] = []

    def keep(recs: list[EpisodeRecord]) -> None:
        out.extend(recs)
        if store is not None:
            for r in recs:
                store.append(r)

    for i in range(budget):
        try:
            chain = collect_one(env_specs[i % len(env_specs)], i, llm, refine_depth, max_steps=max_steps,
                                master_seed=master_seed, memory=memory)
        except EpisodeAborted as e:
            keep(e.chain)
            raise
        keep(chain)
        log.info("episode %d: %s", i, chain[-1].outcome)
    return out
