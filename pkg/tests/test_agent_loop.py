from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from worldqa.agent_loop import (
    AgentWorldEnv, DrivingEnv, EpisodeAborted, EpisodeRecord, MemoryWindow, NoExtractableAnswer, collect_one,
    critique_prompt, detect_objects, extract_choice, extract_word, make_env, replay_matches, run_episode,
    sample_experiences, self_consistency,
)
from worldqa.agent_world.types import (
    EMPTY, SPAWN, WALL, Fidelity, Inventory, Stats, TaskSpec, WorldState,
)
from worldqa.experience_store import ExperienceStore
from worldqa.llm_gateway import Gateway, Rule, ScriptedBackend, TransientError
from worldqa.textio import SkillCall
from worldqa.urban_driving.scenarios import ScenarioSpec


def corridor(n=4, fidelity="perfect"):
    row = (SPAWN,) + (EMPTY,) * (n - 1)
    state = WorldState(floors=((row,),), current_floor=0, player_pos=(0, 0), player_stats=Stats(10, 5, 100),
                       inventory=Inventory(), monsters={}, fidelity=Fidelity(fidelity))
    return state, TaskSpec("corridor", "reach_tile", (0, 0, n - 1), "walk to the end")


def corridor_spec(n=4):
    return AgentWorldEnv(*corridor(n)).spec()


def scripted(*rules, **kw):
    return Gateway(ScriptedBackend(list(rules), **kw), sleep=lambda s: None)


RIGHT = Rule("[act]", "Thought: keep going.\nAction: move(right)", "prefix")
LEFT = Rule("[act]", "Action: move(left)", "prefix")


# ---------------------------------------------------------------------------
# extraction and voting


@pytest.mark.parametrize("text,want", [
    ("Answer: B", "B"),
    ("I think the answer is (C).", "C"),
    ("Answer: A ... on reflection, Answer: D", "D"),
    (" b) ", None),
    ("(A)", "A"),
    ("no letter here", None),
])
def test_extract_choice(text, want):
    assert extract_choice(text) == want


def test_extract_word_takes_last_vocabulary_hit():
    ex = extract_word("yes", "no")
    assert ex("No wait, YES.") == "yes"
    assert ex("maybe") is None
    assert ex("nobody") is None


@given(st.lists(st.sampled_from("ABCD"), min_size=1, max_size=12))
def test_vote_is_majority_with_smallest_label_on_ties(letters):
    llm = scripted(Rule("q", [f"Answer: {c}" for c in letters]))
    res = self_consistency("q", len(letters), llm)
    counts = {c: letters.count(c) for c in set(letters)}
    top = max(counts.values())
    assert res.answer == min(c for c, k in counts.items() if k == top)
    assert res.counts == dict(sorted(counts.items()))
    assert res.tie == (sum(k == top for k in counts.values()) > 1)


def test_vote_counts_failures_and_raises_when_empty():
    res = self_consistency("q", 3, scripted(Rule("q", ["Answer: A", "shrug", "Answer: A"])))
    assert (res.answer, res.failed) == ("A", 1)
    answer, counts = res
    assert counts == {"A": 2}
    with pytest.raises(NoExtractableAnswer):
        self_consistency("q", 4, scripted(Rule("q", "shrug")))
    with pytest.raises(ValueError):
        self_consistency("q", 0, scripted(Rule("q", "Answer: A")))


# ---------------------------------------------------------------------------
# memory


@given(st.integers(0, 6), st.integers(0, 20))
def test_memory_window_keeps_most_recent(capacity, pushes):
    m = MemoryWindow(capacity)
    for i in range(pushes):
        m.push(f"obs {i}", f"a{i}", [{"kind": "Moved"}])
    assert len(m) == min(capacity, pushes)
    assert [a for _, a, _ in m.retained] == [f"a{i}" for i in range(pushes - len(m), pushes)]


def test_memory_window_render_and_validation():
    m = MemoryWindow(2)
    m.push("o", None, [])
    m.push("o", "move(up)", [{"kind": "Moved"}])
    assert m.render(5) == "step 3: no-op -> nothing happened\nstep 4: move(up) -> Moved"
    with pytest.raises(ValueError):
        MemoryWindow(-1)


# ---------------------------------------------------------------------------
# episodes


def test_episode_reaches_goal_and_replays():
    rec = run_episode(AgentWorldEnv(*corridor(4)), scripted(RIGHT))
    assert rec.outcome == "Success"
    assert rec.actions == ["move(right)"] * 3
    assert rec.steps[0].thought == "Thought: keep going."
    assert replay_matches(rec)
    assert EpisodeRecord.from_json(rec.to_json()) == rec
    assert rec.uid == rec.content_hash()


def test_episode_budget_and_failure_outcomes():
    rec = run_episode(AgentWorldEnv(*corridor(4)), scripted(LEFT), max_steps=5)
    assert rec.outcome == "Budget" and len(rec.steps) == 5
    assert all(s.events[0]["kind"] == "IllegalMove" for s in rec.steps)
    assert replay_matches(rec)
    with pytest.raises(ValueError):
        run_episode(AgentWorldEnv(*corridor(4)), scripted(LEFT), max_steps=0)


def test_unparseable_reply_gets_one_reprompt_then_noop():
    llm = scripted(Rule("[act]", "hmm", "prefix"), Rule("no valid action", "still thinking"))
    rec = run_episode(AgentWorldEnv(*corridor(4)), llm, max_steps=2)
    assert [s.action for s in rec.steps] == [None, None]
    assert all(s.reprompts == 1 and s.events == [{"kind": "NoOp"}] for s in rec.steps)
    recovered = scripted(Rule("[act]", "hmm", "prefix"), Rule("no valid action", "Action: move(right)"))
    rec = run_episode(AgentWorldEnv(*corridor(2)), recovered)
    assert rec.outcome == "Success" and rec.steps[0].reprompts == 1


def test_skill_expands_to_moves_and_failed_skill_is_reported():
    rec = run_episode(AgentWorldEnv(*corridor(5)), scripted(Rule("[act]", "Action: go_to(0, 4)", "prefix")))
    assert rec.outcome == "Success" and len(rec.steps) == 1
    assert [e["kind"] for e in rec.steps[0].events].count("Moved") == 4
    state, task = corridor(3)
    walled = AgentWorldEnv(replace(state, floors=(((SPAWN, WALL, EMPTY),),)), task)
    events = walled.apply(SkillCall("go_to", (0, 2)))
    assert events[0]["kind"] == "SkillFailed" and walled.state.turn == 1


def test_tool_calls_are_logged_and_bounded():
    state, task = corridor(3)
    llm = scripted(Rule("Tool orb returned", "Action: move(right)"), Rule("[act]", "Action: orb()", "prefix"))
    rec = run_episode(AgentWorldEnv(state, task), llm, max_steps=1)
    assert rec.steps[0].tool_calls[0]["name"] == "orb"
    assert "error" in rec.steps[0].tool_calls[0]["output"]
    greedy = run_episode(AgentWorldEnv(state, task), scripted(Rule("[act]", "Action: orb()", "prefix")),
                         max_steps=1, max_tool_calls=2)
    assert len(greedy.steps[0].tool_calls) == 2 and greedy.steps[0].action is None


def test_driving_episode_replays():
    spec = DrivingEnv(ScenarioSpec("VehicleFollowing", 3, "perfect")).spec()
    rec = run_episode(make_env(spec), scripted(Rule("[act]", "Action: idle()", "prefix")), max_steps=4)
    assert rec.env_kind == "driving" and len(rec.steps) <= 4
    assert replay_matches(rec)
    env = make_env(spec)
    assert all(o["id"] != "ego" for o in detect_objects(env.scene))
    with pytest.raises(ValueError):
        make_env({"env_kind": "flight"})


def test_replay_detects_tampering():
    rec = run_episode(AgentWorldEnv(*corridor(4)), scripted(RIGHT))
    rec.steps[1].action = "move(left)"
    assert not replay_matches(rec)


# ---------------------------------------------------------------------------
# refinement and sampling


def test_failed_episode_spawns_refinement_chain():
    llm = scripted(Rule("[critique]", "Go right instead.", "prefix"),
                   Rule("Critique of a previous attempt", "Action: move(right)"), LEFT)
    chain = collect_one(corridor_spec(3), 0, llm, refine_depth=2, max_steps=3)
    assert [r.outcome for r in chain] == ["Budget", "Success"]
    assert chain[1].parent_episode == chain[0].uid and chain[1].refinement_round == 1
    assert chain[1].meta["critique"] == "Go right instead."
    prompt = critique_prompt(chain[0], "walk")
    assert "IllegalMove" in prompt and "move(left)" in prompt


def test_refinement_depth_is_respected():
    llm = scripted(Rule("[critique]", "Try again.", "prefix"), LEFT)
    chain = collect_one(corridor_spec(3), 0, llm, refine_depth=2, max_steps=2)
    assert [r.refinement_round for r in chain] == [0, 1, 2]


class DiesAfter:
    name = "dies"

    def __init__(self, ok):
        self.ok = ok

    def complete(self, req):
        if self.ok <= 0:
            raise TransientError("503", 503)
        self.ok -= 1
        return ["Action: move(left)"] * req.n


def test_gateway_exhaustion_keeps_partial_chain(tmp_path):
    store = ExperienceStore(tmp_path / "exp.jsonl")
    llm = Gateway(DiesAfter(5), sleep=lambda s: None)
    with pytest.raises(EpisodeAborted) as err:
        sample_experiences([corridor_spec(3)], 3, llm, store=store, max_steps=2)
    # episodes 0 and 1 use two calls each; episode 2 dies on its second step
    assert [r.outcome for r in err.value.chain] == ["Budget"]
    assert len(err.value.record.steps) == 1 and err.value.record.meta["gateway_exhausted"]
    assert len(store) == 3


def test_sample_experiences_round_robin_and_validation():
    specs = [corridor_spec(2), corridor_spec(3)]
    out = sample_experiences(specs, 4, scripted(RIGHT))
    assert [r.task_id for r in out] == ["corridor"] * 4
    assert [len(r.steps) for r in out] == [1, 2, 1, 2]
    assert len({r.meta["episode_seed"] for r in out}) == 4
    with pytest.raises(ValueError):
        sample_experiences(specs, 0, scripted(RIGHT))
    with pytest.raises(ValueError):
        sample_experiences([], 1, scripted(RIGHT))


def test_record_validation():
    rec = run_episode(AgentWorldEnv(*corridor(2)), scripted(RIGHT))
    d = rec.to_json()
    for bad in ({"outcome": "Win"}, {"refinement_round": 1}, {"surprise": 11}):
        with pytest.raises(ValueError):
            EpisodeRecord.from_json({**d, **bad})
