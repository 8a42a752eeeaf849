from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from worldqa.agent_loop import AgentWorldEnv, DrivingEnv, run_episode
from worldqa.agent_world.types import (
    EMPTY, SPAWN, Fidelity, Inventory, Monster, MonsterKind, Stats, TaskSpec, WorldState, monster_ref,
)
from worldqa.annotator import (
    KINDS, REGISTRY, SCALES, InstructionSample, NoveltyFilter, ReplayMismatch, SeedTemplate, SlotResolutionFailure,
    TemplatePool, Thresholds, bootstrap_templates, filter_novelty, generate_counterfactual,
    generate_plan_comparison, generate_qa, load_seed_pool, verify_against_sim,
)
from worldqa.annotator.generate import parse_draft
from worldqa.experience_store import ExperienceStore
from worldqa.llm_gateway import Gateway, Rule, ScriptedBackend, TransientError
from worldqa.urban_driving.scenarios import ScenarioSpec


def scripted(*rules, **kw):
    return Gateway(ScriptedBackend(list(rules), **kw), sleep=lambda s: None)


def arena(attack=15):
    m = Monster(MonsterKind.NORMAL, Stats(attack, 5, 50), reward_gold=10, reward_exp=7, pos=(0, 1))
    state = WorldState(floors=(((SPAWN, monster_ref("M1"), EMPTY),),), current_floor=0, player_pos=(0, 0),
                       player_stats=Stats(10, 5, 100), inventory=Inventory(), monsters={"M1": m},
                       fidelity=Fidelity.PERFECT)
    return AgentWorldEnv(state, TaskSpec("arena", "reach_tile", (0, 0, 2), "cross the arena"))


def episode(env, *actions):
    return run_episode(env, Gateway(ScriptedBackend(transcript=[f"Action: {a}" for a in actions])),
                       max_steps=len(actions))


WRONG = Rule("[draft]", "Question: what?\nAnswer: Z\nRationale: no idea", "prefix")
EXPLAIN = Rule("[explain]", "The simulator replay shows it.", "prefix")


def pool_template(qclass):
    return next(t for t in load_seed_pool() if t.question_class == qclass)


# ---------------------------------------------------------------------------
# templates and samples


def test_seed_pool_matches_registry():
    pool = load_seed_pool()
    assert len(pool) == 13
    for t in pool:
        qc = REGISTRY[t.question_class]
        assert (t.env_kind, t.kind, t.temporal_scale) == (qc.env_kind, qc.kind, qc.temporal_scale)
        assert t.skeleton.endswith("?") and t.provenance == "seed"
    assert {t.kind for t in pool} == set(KINDS)
    assert TemplatePool.from_json(pool.to_json()).to_json() == pool.to_json()
    with pytest.raises(ValueError):
        pool.add(next(iter(pool)))


def test_template_validation_and_fill():
    t = SeedTemplate("x", "agent_world", "MultipleChoice", "Step", "aw.combat_damage", "Fight {monster} at {life}?")
    assert t.slots == ["monster", "life"]
    assert t.fill({"monster": "M1", "life": 3}) == "Fight M1 at 3?"
    with pytest.raises(SlotResolutionFailure):
        t.fill({"monster": "M1"})
    for bad in ({"kind": "Essay"}, {"temporal_scale": "Epoch"}, {"env_kind": "sea"}):
        with pytest.raises(ValueError):
            replace(t, **bad)


sample_st = st.builds(
    InstructionSample, env_kind=st.sampled_from(["agent_world", "driving"]), kind=st.sampled_from(KINDS),
    temporal_scale=st.sampled_from(SCALES), question=st.text(min_size=1, max_size=30),
    answer=st.sampled_from(["A", "B", "yes"]), question_class=st.just("aw.combat_damage"),
    context=st.one_of(st.none(), st.lists(st.text(min_size=1, max_size=8), min_size=2, max_size=4)),
    surprise=st.integers(1, 10), weight=st.floats(0.1, 2.0))


@given(sample_st)
def test_sample_json_round_trip_and_stable_id(s):
    again = InstructionSample.from_json(s.to_json())
    assert again == s
    fresh = InstructionSample.from_json({**s.to_json(), "id": ""})
    assert fresh.id == s.id


def test_answer_text_resolves_letters():
    s = InstructionSample("agent_world", "MultipleChoice", "Step", "q?", "B", "aw.combat_damage", ["10", "20"])
    assert s.labels == ["A", "B"] and s.answer_text() == "20"
    assert s.context_text == "A: 10 B: 20"
    with pytest.raises(ValueError):
        InstructionSample("agent_world", "Essay", "Step", "q?", "B", "c")


def test_parse_draft_joins_rationale_lines():
    d = parse_draft("Question: Why?\nanswer : B\nRationale: first\n  second\n")
    assert d == {"question": "Why?", "answer": "B", "rationale": "first second"}


# ---------------------------------------------------------------------------
# grounding, verification, correction


def test_combat_question_is_corrected_and_verified():
    rec = episode(arena(), "move(right)", "move(right)")
    [s] = generate_qa([rec], pool_template("aw.combat_damage"), scripted(WRONG))
    assert s.verified and s.meta["corrected"] and s.answer in s.labels
    # 10 exchanges at 5 damage each kill M1; it strikes back for 15 - 5 each time
    assert s.answer_text() == "100"
    assert s.source_episodes == [rec.uid]
    tampered = replace(s, answer=next(l for l in s.labels if l != s.answer))
    assert not verify_against_sim(tampered)
    assert not verify_against_sim(replace(s, question_class="no.such.class"))


def test_correct_draft_is_kept_as_is():
    def honest(req):
        return f"Question: {req.metadata['question']}\nAnswer: {req.metadata['gold']}"
    rec = episode(arena(), "move(right)", "move(right)")
    [s] = generate_qa([rec], pool_template("aw.combat_damage"), scripted(default="d", handlers={"d": honest}))
    assert s.verified and "corrected" not in s.meta and s.meta["drafted_answer"] == s.answer


def test_generate_qa_checks_env_and_missing_slots():
    rec = episode(arena(), "move(left)")
    with pytest.raises(ValueError):
        generate_qa([rec], pool_template("dr.last_lane"), scripted(WRONG))
    with pytest.raises(KeyError):
        generate_qa([rec], replace(pool_template("aw.combat_damage"), question_class="nope"), scripted(WRONG))
    quiet = replace(arena().initial, monsters={}, floors=(((SPAWN, EMPTY, EMPTY),),))
    rec2 = episode(AgentWorldEnv(quiet, arena().task), "move(right)")
    with pytest.raises(SlotResolutionFailure):
        generate_qa([rec2], pool_template("aw.combat_damage"), scripted(WRONG))
    assert generate_qa([rec2], pool_template("aw.combat_damage"), scripted(WRONG), on_missing="skip") == []


def test_rationale_gets_an_explanation_after_correction():
    rec = episode(arena(), "move(right)", "move(right)")
    [s] = generate_qa([rec], pool_template("aw.next_action_rationale"), scripted(WRONG, EXPLAIN))
    assert s.verified and s.rationale == "The simulator replay shows it."


def test_counterfactual_matches_branch_replay():
    rec = episode(arena(), "move(right)", "move(right)")
    s = generate_counterfactual(rec, scripted(WRONG))
    assert s.kind == "Counterfactual" and s.verified
    assert (s.meta["step"], s.meta["alt"]) == (1, "move(left)")
    assert s.answer_text() == "The goal would not yet be reached"
    # a lethal monster in a single row leaves no legal alternative anywhere
    doomed = episode(arena(attack=40), "move(right)")
    assert doomed.outcome == "Failure" and generate_counterfactual(doomed, scripted(WRONG)) is None
    rec.steps[0].events = [{"kind": "Moved"}]
    with pytest.raises(ReplayMismatch):
        generate_counterfactual(rec, scripted(WRONG))


def test_driving_questions_verify():
    env = DrivingEnv(ScenarioSpec("VehicleFollowing", 2))
    rec = episode(env, "faster()", "lane_left()", "idle()", "slower()")
    for qclass in ("dr.last_lane", "dr.collision_query", "dr.future_movement", "dr.rationale_action"):
        for s in generate_qa([rec], pool_template(qclass), scripted(WRONG, EXPLAIN), on_missing="skip"):
            assert s.verified, qclass
            assert s.meta.get("kinematics") is None or len(s.meta["kinematics"]) == 8


# ---------------------------------------------------------------------------
# plan comparison


def test_plan_comparison_picks_the_successful_attempt():
    store = ExperienceStore()
    win = episode(arena(), "move(right)", "move(right)")
    lose = episode(arena(), "move(left)", "move(left)")
    store.set_tag(store.append(win), "fight the monster and walk right")
    store.set_tag(store.append(lose), "bump into the left wall")
    s = generate_plan_comparison("walk right", store, scripted(WRONG), k=5)
    assert s.verified and s.answer_text() == "fight the monster and walk right"
    assert sorted(s.source_episodes) == sorted([win.uid, lose.uid])
    assert generate_plan_comparison("walk", store, scripted(WRONG), k=1) is None
    assert generate_plan_comparison("walk", ExperienceStore(), scripted(WRONG)) is None


def test_plan_comparison_without_contrast_falls_back_to_judgment():
    store = ExperienceStore()
    a = episode(arena(), "move(right)", "move(right)")
    b = episode(arena(), "move(left)", "move(right)", "move(right)")
    store.set_tag(store.append(a), "two single steps")
    store.set_tag(store.append(b), "one skill call")
    s = generate_plan_comparison("steps", store, scripted(Rule("[draft]", "Answer: B", "prefix")))
    assert s.answer == "B" and s.meta["annotator_judgment"] and not s.verified


# ---------------------------------------------------------------------------
# novelty


def mc(question, answer="A", **kw):
    return InstructionSample("agent_world", "MultipleChoice", "Step", question, answer, "aw.combat_damage",
                             ["ten", "twenty"], **kw)


def test_near_duplicates_are_dropped_before_voting():
    f = NoveltyFilter(scripted(Rule("[novelty]", "novel", "prefix")))
    assert f.admit(mc("How much damage does M1 deal to you?"))
    assert f.admit(mc("how much  damage does m1 deal to you?")).reason == "NearDuplicate"
    assert f.admit(mc("Which key opens the red door on floor two?")).keep
    assert len(f.kept) == 2


def test_llm_vote_can_reject_and_failures_are_flagged():
    votes = scripted(Rule("[novelty]", ["redundant", "novel", "redundant"], "prefix"))
    d = filter_novelty(mc("a fresh question?"), [mc("an old question about keys")], votes,
                       Thresholds(vote_n=3))
    assert (d.keep, d.reason) == (False, "LlmJudged")

    class Down:
        name = "down"

        def complete(self, req):
            raise TransientError("503", 503)
    f = NoveltyFilter(Gateway(Down(), sleep=lambda s: None))
    s = mc("a fresh question?")
    assert f.admit(s).flags == ("vote_skipped",) and s.meta["novelty_flags"] == ["vote_skipped"]


def test_easy_driving_samples_are_down_weighted():
    def drive(q, kin):
        return InstructionSample("driving", "MultipleChoice", "Step", q, "A", "dr.future_movement", ["x", "y"],
                                 meta={"kinematics": kin})
    f = NoveltyFilter()
    base = list(np.eye(8)[0])
    assert f.admit(drive("What will car 3 do next?", base)).flags == ()
    s = drive("Is the cyclist about to turn left?", [x + 0.001 for x in base])
    assert f.admit(s).flags == ("easy",) and s.weight == 0.5
    far = drive("Will the bus pull out from the stop?", list(np.eye(8)[1]))
    assert f.admit(far).flags == () and far.weight == 1.0


# ---------------------------------------------------------------------------
# bootstrapping


BOOT_REPLY = "\n".join([
    '{"question_class": "aw.combat_damage", "skeleton": "Facing {monster} with {life} life, what damage follows?"}',
    '{"question_class": "aw.combat_damage", "skeleton": "Uses an unknown {slot} here?"}',
    '{"question_class": "nope", "skeleton": "Anything?"}',
    'not json at all',
    '{"question_class": "aw.item_priority", "skeleton": "To grow your {stat}, what should you grab first?"}',
    '{"question_class": "aw.item_priority", "skeleton": "No question mark for {stat}"}',
])


def test_bootstrap_admits_only_well_formed_templates():
    pool = load_seed_pool()
    grown = bootstrap_templates(pool, scripted(Rule("[bootstrap]", BOOT_REPLY, "prefix")), rounds=1, per_round=5)
    new = [t for t in grown if t.provenance != "seed"]
    assert [t.question_class for t in new] == ["aw.combat_damage", "aw.item_priority"]
    assert [t.id for t in new] == ["boot1.0", "boot1.1"] and new[0].provenance == "bootstrapped:1"
    assert len(pool) == 13
    again = bootstrap_templates(grown, scripted(Rule("[bootstrap]", BOOT_REPLY, "prefix")), rounds=1)
    assert len(again) == len(grown)


def test_bootstrap_validation_and_outage():
    with pytest.raises(ValueError):
        bootstrap_templates(TemplatePool(), scripted(), rounds=1)
    with pytest.raises(ValueError):
        bootstrap_templates(load_seed_pool(), scripted(), rounds=-1)

    class Down:
        name = "down"

        def complete(self, req):
            raise TransientError("503", 503)
    assert len(bootstrap_templates(load_seed_pool(), Gateway(Down(), sleep=lambda s: None), rounds=2)) == 13


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_generated_samples_always_verify(seed):
    rec = episode(arena(attack=6 + seed % 40), "move(right)", "move(right)")
    for t in load_seed_pool().for_env("agent_world"):
        if t.kind == "PlanComparison":
            continue
        for s in generate_qa([rec], t, scripted(WRONG, EXPLAIN), seed=seed, on_missing="skip"):
            assert s.verified, t.id

