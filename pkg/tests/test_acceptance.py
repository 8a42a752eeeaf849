"""Acceptance checks, one test group per criterion.

The terminal summary prints one PASS/FAIL line per criterion (see
``conftest.py``).
"""
import json
import random
import subprocess
import sys
import time
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest

from oracles import (
    cosine_rank, first_pick_probability, idm_equilibrium_gap, largest_remainder,
    simulate_combat, simulate_combat_grid,
)
from worldqa.agent_loop import NoExtractableAnswer, extract_choice, make_env, replay_matches, self_consistency
from worldqa.agent_loop import EpisodeRecord
from worldqa.agent_world.combat import resolve_combat, resolve_combat_arrays
from worldqa.agent_world.engine import SUCCESS, replay
from worldqa.agent_world.examples import reference_task, reference_world
from worldqa.agent_world.generate import WorldConfig, default_task, generate_world
from worldqa.agent_world.solver import validate_solvable
from worldqa.agent_world.types import Fidelity, MonsterKind, Stats, fidelity_violations, tile_args, tile_kind
from worldqa.annotator import InstructionSample, verify_against_sim
from worldqa.annotator.classes import trajectory
from worldqa.datasets import (
    DatasetManifest, dedup, dedup_key, load_dataset, recount, validate_record, weighted_order,
)
from worldqa.demo_handlers import make_actor, make_demo_handler
from worldqa.evaluator import SuiteTask, eval_qa, eval_task_completion, load_suite
from worldqa.experience_store import ExperienceStore, HashingEmbedder
from worldqa.llm_gateway import Gateway, ScriptedBackend
from worldqa.textio import render_agent_world
from worldqa.urban_driving.idm import IdmParams
from worldqa.urban_driving.scenarios import NOMINAL, OOD, TEMPLATES, ScenarioSpec, spawn_scenario
from worldqa.urban_driving.scene import LaneGeometry, TrafficScene, VehicleState, step_scene

from conftest import ROOT, TESTS

criterion = pytest.mark.criterion


# ---------------------------------------------------------------------------
# 1. combat


@criterion(1, "combat oracle equivalence over 20^6 stats x {Normal, Vampire(0.1)}")
@pytest.mark.parametrize("vampire", [False, True], ids=["normal", "vampire"])
def test_c01_combat_exhaustive(vampire):
    t0 = time.perf_counter()
    vals, feasible, turns, traj = simulate_combat_grid(1, 20, vampire=vampire)
    n = len(vals)
    d, l, am = np.meshgrid(vals, vals, vals, indexing="ij")
    for ia, a in enumerate(vals):
        # every (dm, lm) for this attack, against every (d, l, am)
        dm = vals[:, None, None, None, None]
        lm = vals[None, :, None, None, None]
        f, t, r = resolve_combat_arrays(a, d[None, None], l[None, None], am[None, None], dm, lm, vampire)
        want_f = np.broadcast_to(feasible[ia][:, :, None, None, None], f.shape)
        assert np.array_equal(f, want_f)
        want_t = np.broadcast_to(turns[ia][:, :, None, None, None], t.shape)
        assert np.array_equal(np.where(f, t, 0), want_t)
        want_r = traj[turns[ia]]                      # (dm, lm, d, l, am)
        want_r = np.where(want_f, want_r, l[None, None])
        assert np.array_equal(r, want_r)
    assert n ** 6 == 64_000_000
    assert time.perf_counter() - t0 < 60


@criterion(1, "combat oracle equivalence over 20^6 stats x {Normal, Vampire(0.1)}")
def test_c01_combat_scalar_subset():
    rng = random.Random(1)
    for _ in range(20_000):
        a, d, l, am, dm, lm = (rng.randint(1, 20) for _ in range(6))
        vampire = rng.random() < 0.5
        feasible, turns, residual = simulate_combat(a, d, l, am, dm, lm, vampire)
        out = resolve_combat(Stats(a, d, l), Stats(am, dm, lm),
                             MonsterKind.VAMPIRE if vampire else MonsterKind.NORMAL)
        assert out.feasible == feasible
        if feasible:
            assert (out.turns, out.residual_life, out.damage_taken) == (turns, residual, l - residual)


# ---------------------------------------------------------------------------
# 2. reference tower


EXPECTED_ROWS = [
    "Row 1: (Player: P1), (Empty: E1), (Empty: E1),  (Wall: W1),  (Health Potion: H1)",
    "Row 2: (Empty: E1), (Empty: E1),  (Empty: E1), (Wall: W1), (Monster: M1)",
    "Row 3: (Empty: E1), (Empty: E1), (Monster: M2), (Empty: E1), (Empty: E1)",
    "Row 4: (Empty: E1), (Key: K1), (Empty: E1), (Monster: M3), (Empty: E1)",
    "Row 5: (Empty: E1), (Empty: E1), (Empty: E1), (Empty: E1), (Stairs: S1)",
]


@criterion(2, "reference map rendering and M1 combat example")
def test_c02_reference_rendering():
    obs = render_agent_world(reference_world(), reference_task())
    lines = obs.text.splitlines()
    for header in ("Status", "Your current backpack:", "Map Layout (Category: Description ID)",
                   "Description IDs and Thorough Descriptions"):
        assert header in lines
    rows = [ln for ln in lines if ln.startswith("Row ")]
    assert rows == [" ".join(r.split()) for r in EXPECTED_ROWS]
    for heading in ("Player (P1)", "Empty (E1)", "Wall (W1)", "Health Potion (H1)", "Red Key (K1)",
                    "Monster (M1)", "Monster (M2)", "Monster (M3)", "Stairs (S1)"):
        assert heading in lines
    assert {"Health: 535", "Attack: 12", "Defense: 8"} <= set(lines)


@criterion(2, "reference map rendering and M1 combat example")
def test_c02_reference_combat():
    out = resolve_combat(Stats(attack=10, defense=5, life=100), Stats(attack=15, defense=5, life=50))
    assert (out.turns, out.damage_taken, out.residual_life) == (10, 100, 0)
    assert out.survives and not out.lethal


# ---------------------------------------------------------------------------
# 3. determinism


@criterion(3, "determinism and replay across two processes")
def test_c03_two_process_replay():
    t0 = time.perf_counter()
    cmd = [sys.executable, str(TESTS / "determinism_probe.py"), "100"]
    procs = [subprocess.Popen(cmd, stdout=subprocess.PIPE, cwd=ROOT) for _ in range(2)]
    outs = [p.communicate(timeout=120)[0] for p in procs]
    assert all(p.returncode == 0 for p in procs)
    first, second = (json.loads(o) for o in outs)
    assert len(first["agent_world"]) == len(first["driving"]) == 100
    assert first == second
    # scripts are long enough to matter
    assert sum(len(x["hashes"]) for x in first["agent_world"]) > 1000
    assert time.perf_counter() - t0 < 30


# ---------------------------------------------------------------------------
# 4. fidelity containment


def _forbidden_tiles(state):
    n = len(state.floors)
    bad = []
    for f, grid in enumerate(state.floors):
        for row in grid:
            for t in row:
                kind = tile_kind(t)
                if kind in ("door", "key") and tile_args(t)[0] != "yellow":
                    bad.append(t)
                if kind in ("store", "altar", "item"):
                    bad.append(t)
                if kind == "stairs" and int(tile_args(t)[0]) < n:
                    bad.append(t)
    bad += [m for m, v in state.monsters.items() if v.kind not in (MonsterKind.NORMAL, MonsterKind.BOSS)]
    return bad


@criterion(4, "fidelity containment of imperfect worlds and scenarios")
def test_c04_imperfect_worlds():
    cfg = WorldConfig.imperfect()
    for seed in range(1000):
        state = generate_world(cfg, seed)
        assert state.fidelity is Fidelity.IMPERFECT
        assert len(state.floors) == 1
        assert fidelity_violations(state) == []
        assert _forbidden_tiles(state) == []


@criterion(4, "fidelity containment of imperfect worlds and scenarios")
def test_c04_imperfect_scenarios():
    for i in range(100):
        spec = ScenarioSpec(TEMPLATES[i % len(TEMPLATES)], seed=i, fidelity="imperfect")
        scene = spawn_scenario(spec)
        assert not scene.intersections and not scene.pedestrians and not scene.obstacles
        assert all(lane.intersection_id is None for lane in scene.lanes.values())


# ---------------------------------------------------------------------------
# 5. solvability


@criterion(5, "solvability of 100 perfect-fidelity worlds with replayed witnesses")
def test_c05_perfect_worlds_solvable():
    t0 = time.perf_counter()
    cfg = WorldConfig.perfect()
    for seed in range(100):
        state = generate_world(cfg, seed)
        task = default_task(state)
        res = validate_solvable(state, task)
        assert res
        _, _, terminal = replay(state, res.witness, task)
        assert terminal == SUCCESS
    assert time.perf_counter() - t0 < 300


# ---------------------------------------------------------------------------
# 6. IDM


def _road(length=1e5):
    return {0: LaneGeometry(0, length, 0.0)}


@criterion(6, "IDM equilibrium, platoon safety and hard-brake timing")
def test_c06_equilibrium_gap():
    v_lead = 20.0
    lead = VehicleState("lead", 0, 60.0, v_lead, fixed_speed=True)
    follower = VehicleState("f", 0, 0.0, 10.0)
    scene = TrafficScene(_road(), {"lead": lead, "f": follower}, dt=0.1, time_limit=1e9)
    for _ in range(3000):
        scene, _ = step_scene(scene)
    gap = scene.vehicles["lead"].s - scene.vehicles["lead"].length - scene.vehicles["f"].s
    want = idm_equilibrium_gap(v_lead)
    assert abs(gap - want) / want < 0.01
    assert scene.t == pytest.approx(300.0)


@criterion(6, "IDM equilibrium, platoon safety and hard-brake timing")
def test_c06_platoon_no_collisions():
    rng = random.Random(6)
    vehicles = {}
    for i in range(10):
        vid = f"v{i}"
        vehicles[vid] = VehicleState(vid, 0, 30.0 * (9 - i), rng.uniform(10.0, 25.0), idm=IdmParams())
    scene = TrafficScene(_road(), vehicles, dt=0.1, time_limit=1e9)
    for _ in range(1200):
        scene, events = step_scene(scene)
        assert not [e for e in events if e["kind"] == "Collision"]
        order = sorted(scene.vehicles.values(), key=lambda v: v.s)
        for back, front in zip(order, order[1:]):
            assert front.s - front.length - back.s > 0


@criterion(6, "IDM equilibrium, platoon safety and hard-brake timing")
@pytest.mark.parametrize("brake_time", [5.0, 3.7])
def test_c06_hard_brake_timing(brake_time):
    spec = ScenarioSpec("HardBraking", seed=0, overrides={"brake_time": brake_time, "decel": -6.0})
    scene = spawn_scenario(spec)
    fired = []
    for _ in range(100):
        scene, events = step_scene(scene)
        fired += [e for e in events if e["kind"] == "HardBrakeTriggered"]
    assert len(fired) == 1
    assert fired[0]["t"] == brake_time
    assert fired[0]["decel"] == -6.0


# ---------------------------------------------------------------------------
# 7. retrieval


WORDS = ("collect key yellow blue red door open defeat monster potion stairs wall dig trade "
         "attack defense health wasted steps success failure budget lane merge brake follow").split()


@criterion(7, "top-k retrieval equals brute-force cosine ranking")
def test_c07_retrieval_exact():
    rng = random.Random(7)
    store = ExperienceStore(embedder=HashingEmbedder())
    tags = []
    for i in range(1000):
        rec = EpisodeRecord("agent_world", f"t{i}", "perfect", i, {}, [], "Success")
        eid = store.append(rec)
        tags.append(store.set_tag(eid, " ".join(rng.choice(WORDS) for _ in range(rng.randint(3, 12)))))
    vectors = [list(map(float, HashingEmbedder()(t))) for t in tags]
    for q in range(5):
        query = " ".join(rng.choice(WORDS) for _ in range(6))
        qv = list(map(float, HashingEmbedder()(query)))
        for k in (1, 5, 50):
            got = store.retrieve(query, k)
            want_ids, want_sims = cosine_rank(qv, vectors, list(range(1000)), k)
            assert [i for i, _ in got] == want_ids
            assert [s for _, s in got] == pytest.approx(want_sims, abs=1e-12)


# ---------------------------------------------------------------------------
# 8. self-consistency


def _votes(replies, n=5):
    return Gateway(ScriptedBackend(transcript=[replies])), n


@criterion(8, "self-consistency majority and tie-break outcomes")
@pytest.mark.parametrize("replies, answer, counts, tie", [
    (["Answer: B", "Answer: A", "Answer: B", "Answer: C", "Answer: B"], "B", {"A": 1, "B": 3, "C": 1}, False),
    (["Answer: C", "Answer: A", "Answer: C", "Answer: A", "Answer: B"], "A", {"A": 2, "B": 1, "C": 2}, True),
    (["Answer: D", "no idea", "Answer: D", "???", "Answer: A"], "D", {"A": 1, "D": 2}, False),
    (["Answer: B", "Answer: B", "Answer: B", "Answer: B", "Answer: B"], "B", {"B": 5}, False),
    (["Answer: E", "Answer: D", "Answer: C", "Answer: B", "Answer: A"], "A",
     {"A": 1, "B": 1, "C": 1, "D": 1, "E": 1}, True),
])
def test_c08_votes(replies, answer, counts, tie):
    llm, n = _votes(replies)
    res = self_consistency("pick one", n, llm, extract_choice)
    assert (res.answer, res.counts, res.tie) == (answer, counts, tie)
    assert res.failed == sum(extract_choice(r) is None for r in replies)


@criterion(8, "self-consistency majority and tie-break outcomes")
def test_c08_no_votes():
    llm, n = _votes(["hmm", "unsure", "?", "pass", "no"])
    with pytest.raises(NoExtractableAnswer):
        self_consistency("pick one", n, llm, extract_choice)


# ---------------------------------------------------------------------------
# 9. verified-sample soundness (on the demo pipeline output)


def _emitted(demo_run):
    _, parts = load_dataset(demo_run["out"] / "dataset")
    return [s for p in parts.values() for s in p]


@criterion(9, "verified samples re-verify and factual branches replay exactly")
def test_c09_verified_samples(demo_run):
    samples = _emitted(demo_run)
    verified = [s for s in samples if s.verified]
    assert verified
    assert all(verify_against_sim(s) for s in verified)


@criterion(9, "verified samples re-verify and factual branches replay exactly")
def test_c09_counterfactual_factual_branches(demo_run):
    store = ExperienceStore(demo_run["out"] / "store")
    cfs = [s for s in _emitted(demo_run) if s.kind == "Counterfactual"]
    assert cfs
    for s in cfs:
        m = s.meta
        _, _, status = trajectory(m["env_spec"], m["actions"])
        assert status == m["factual_status"]
        for uid in s.source_episodes:
            rec = store.by_uid(uid)
            assert rec.actions == m["actions"]
            assert replay_matches(rec)


# ---------------------------------------------------------------------------
# 10. dataset hygiene


@criterion(10, "dataset hygiene: schema, split sizes, OOD isolation, dedup")
def test_c10_emitted_dataset(demo_run):
    root = demo_run["out"] / "dataset"
    manifest = DatasetManifest.from_json(json.loads((root / "manifest.json").read_text()))
    ids = {}
    for name in manifest.splits:
        lines = (root / f"{name}.jsonl").read_text().splitlines()
        for line in lines[1:]:
            rec = json.loads(line)
            validate_record(rec)
            ids.setdefault(name, []).append(rec)
    ratios = {"train": 0.7, "val": 0.1, "test": 0.2}
    sizes = dict(zip(ratios, largest_remainder(manifest.total, list(ratios.values()))))
    assert {k: len(v) for k, v in ids.items()} == sizes == manifest.splits
    assert not [r for r in ids["train"] if r["meta"]["ood"]]
    ood = [r for recs in ids.values() for r in recs if r["meta"]["ood"]]
    assert ood and all(r in ids[manifest.ood_split] for r in ood)
    samples = _emitted(demo_run)
    assert len({dedup_key(s) for s in samples}) == len(samples)


@criterion(10, "dataset hygiene: schema, split sizes, OOD isolation, dedup")
def test_c10_dedup_removes_exact_duplicates(demo_run):
    base = _emitted(demo_run)
    rng = random.Random(10)
    noisy = list(base)
    for s in rng.sample(base, 30):
        twin = InstructionSample(s.env_kind, s.kind, s.temporal_scale, "  " + s.question.upper() + " ",
                                 s.answer, s.question_class, s.context, id=s.id + "-dup")
        noisy.insert(rng.randrange(len(noisy) + 1), twin)
    out = dedup(noisy)
    assert len(out) == len(base)
    assert len({dedup_key(s) for s in out}) == len(out)


# ---------------------------------------------------------------------------
# 11. weighted ordering


@criterion(11, "weighted first-pick frequency matches 10/19")
def test_c11_first_pick_frequency():
    heavy = InstructionSample("agent_world", "MultipleChoice", "Step", "heavy?", "A", "x", ["a", "b"],
                              surprise=1, verified=True, weight=10.0)
    light = [InstructionSample("agent_world", "MultipleChoice", "Step", f"light {i}?", "A", "x", ["a", "b"],
                               surprise=1, verified=True, weight=1.0) for i in range(9)]
    pool = [heavy] + light
    n = 10_000
    hits = sum(weighted_order(pool, seed)[0].id == heavy.id for seed in range(n))
    want = first_pick_probability([10] + [1] * 9, 0)
    assert want == Fraction(10, 19)
    assert abs(hits / n - float(want)) <= 0.02


# ---------------------------------------------------------------------------
# 12. end-to-end smoke


@criterion(12, "end-to-end scripted pipeline smoke run")
def test_c12_pipeline_smoke(demo_run):
    assert demo_run["code"] == 0
    assert demo_run["seconds"] < 60
    samples = _emitted(demo_run)
    assert len(samples) >= 50
    assert {s.kind for s in samples} == {"MultipleChoice", "EpisodicMemory", "Rationale", "Counterfactual",
                                          "PlanComparison"}
    assert {"Step", "Plan"} <= {s.temporal_scale for s in samples}
    root = demo_run["out"] / "dataset"
    stored = DatasetManifest.from_json(json.loads((root / "manifest.json").read_text()))
    again = recount(root)
    assert again.counts == stored.counts and again.splits == stored.splits
    assert sum(stored.counts.values()) == len(samples)


# ---------------------------------------------------------------------------
# 13. evaluation harness


def _small_suite():
    return load_suite(ROOT / "configs" / "suite_42.json")[:5]


def _actor_gateway(actor):
    return Gateway(ScriptedBackend(handlers={"demo": make_demo_handler(actor)}, default="demo"))


@criterion(13, "evaluation harness: 100% solver, 60% partial solver, 100% answer key")
def test_c13_full_solver():
    section = eval_task_completion(_small_suite(), _actor_gateway(make_actor(0.0)), repeats=10, suite_seed=13)
    assert section.completion == 1.0
    assert all(t.repeats == 10 for t in section.tasks)


@criterion(13, "evaluation harness: 100% solver, 60% partial solver, 100% answer key")
def test_c13_partial_solver():
    suite = _small_suite()
    solved = {t.id for t in suite[:3]}
    actor = make_actor(0.0, solve=lambda task_id: task_id in solved)
    section = eval_task_completion(suite, _actor_gateway(actor), repeats=10, suite_seed=13)
    assert section.completion == pytest.approx(0.6, abs=1e-12)
    assert [t.mean for t in section.tasks] == [1.0, 1.0, 1.0, 0.0, 0.0]


@criterion(13, "evaluation harness: 100% solver, 60% partial solver, 100% answer key")
def test_c13_answer_key(demo_run):
    from worldqa.demo_handlers import demo_handlers

    llm = Gateway(ScriptedBackend(handlers=demo_handlers(), default="answer_key"))
    section = eval_qa(demo_run["out"] / "dataset", llm)
    assert section.overall.total > 0 and section.overall.accuracy == 1.0
    assert section.ood is not None and section.ood.accuracy == 1.0
    assert all(a.accuracy == 1.0 for a in section.per_kind.values())
