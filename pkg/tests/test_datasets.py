import json
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from oracles import largest_remainder
from worldqa.annotator import KINDS, SCALES, InstructionSample
from worldqa.common import derive_seed
from worldqa.datasets import (
    OodOverflow, RatioError, SchemaViolation, assign_splits, config_digest, count_samples, dedup, dedup_key,
    emit_dataset, from_record, load_dataset, order_weight, read_split, recount, split_sizes, to_record,
    validate_record, weighted_order,
)


def sample(i, *, kind="MultipleChoice", env="agent_world", ood=False, verified=True, surprise=5, **kw):
    ctx = ["left", "right", "up"] if kind != "Rationale" else None
    return InstructionSample(env, kind, "Step", f"question {i}?", "A" if ctx else f"because {i}",
                             "aw.combat_damage", ctx, surprise=surprise, verified=verified, ood=ood, **kw)


def pool(n, n_ood=0):
    kinds = ["MultipleChoice", "Rationale", "Counterfactual"]
    return [sample(i, kind=kinds[i % 3], env="driving" if i % 2 else "agent_world", ood=i < n_ood)
            for i in range(n)]


@st.composite
def percent_ratios(draw):
    cuts = sorted(draw(st.sets(st.integers(1, 99), min_size=1, max_size=4)))
    parts = [b - a for a, b in zip([0] + cuts, cuts + [100])]
    return {f"s{i}": p / 100 for i, p in enumerate(parts)}


# ---------------------------------------------------------------------------
# records


text = st.text(min_size=1, max_size=20)
sample_st = st.builds(
    InstructionSample, env_kind=st.sampled_from(["agent_world", "driving"]), kind=st.sampled_from(KINDS),
    temporal_scale=st.sampled_from(SCALES), question=text, answer=st.just("B"),
    question_class=st.just("dr.last_lane"), context=st.lists(text, min_size=2, max_size=5),
    rationale=st.one_of(st.none(), text), source_episodes=st.lists(text, max_size=3),
    surprise=st.integers(1, 10), surprise_flagged=st.booleans(), verified=st.booleans(), ood=st.booleans(),
    weight=st.floats(0.01, 4.0), meta=st.dictionaries(st.sampled_from("xyz"), st.integers()))


@given(sample_st)
def test_record_round_trip(s):
    rec = to_record(s)
    validate_record(rec)
    again = from_record(json.loads(json.dumps(rec)))
    assert again == s
    assert rec["meta"]["order_weight"] == pytest.approx(order_weight(s))


def test_validate_record_rejects_bad_records():
    good = to_record(sample(0))
    validate_record(good)
    bad = [
        {**good, "answer": "D"},
        {k: v for k, v in good.items() if k != "question"},
        {**good, "meta": {**good["meta"], "kind": "Essay"}},
        {**good, "meta": {**good["meta"], "surprise": 11}},
        {**good, "meta": {**good["meta"], "annotation": {"x": math.nan}}},
    ]
    for rec in bad:
        with pytest.raises(SchemaViolation):
            validate_record(rec)


def test_order_weight_halves_unverified():
    assert order_weight(sample(0, surprise=6)) == 6
    assert order_weight(sample(0, surprise=6, verified=False)) == 3
    assert order_weight(sample(0, surprise=6, weight=0.5)) == 3


# ---------------------------------------------------------------------------
# dedup and ordering


def test_dedup_ignores_case_and_whitespace():
    a = sample(1)
    twin = InstructionSample(a.env_kind, a.kind, "Plan", "  QUESTION   1? ", "A", "other", ["LEFT", "x", "y"])
    other = sample(2)
    assert dedup_key(a) == dedup_key(twin)
    assert dedup([a, twin, other]) == [a, other]


@given(st.lists(st.integers(1, 10), min_size=1, max_size=20), st.integers(0, 2**32), st.randoms())
def test_weighted_order_is_a_permutation_independent_of_input_order(surprises, seed, rnd):
    samples = [sample(i, surprise=s) for i, s in enumerate(surprises)]
    out = weighted_order(samples, seed)
    assert sorted(s.id for s in out) == sorted(s.id for s in samples)
    shuffled = list(samples)
    rnd.shuffle(shuffled)
    assert [s.id for s in weighted_order(shuffled, seed)] == [s.id for s in out]


def test_zero_weight_samples_come_last():
    samples = [sample(i, weight=0.0 if i < 3 else 1.0) for i in range(8)]
    out = weighted_order(samples, 5)
    assert all(s.weight == 0.0 for s in out[-3:])


# ---------------------------------------------------------------------------
# splits


@given(st.integers(0, 500), percent_ratios())
def test_split_sizes_match_largest_remainder(total, ratios):
    sizes = split_sizes(total, ratios)
    assert list(sizes.values()) == largest_remainder(total, list(ratios.values()))
    assert sum(sizes.values()) == total


def test_split_sizes_frozen_examples():
    assert split_sizes(10, {"train": 0.8, "val": 0.1, "test": 0.1}) == {"train": 8, "val": 1, "test": 1}
    # remainders 0.5 / 0.25 / 0.25: the single leftover goes to the largest remainder
    assert split_sizes(5, {"train": 0.5, "val": 0.25, "test": 0.25}) == {"train": 3, "val": 1, "test": 1}
    # equal remainders: earlier splits win
    assert split_sizes(2, {"a": 0.25, "b": 0.25, "c": 0.25, "d": 0.25}) == {"a": 1, "b": 1, "c": 0, "d": 0}


@pytest.mark.parametrize("ratios", [{}, {"train": 0.9}, {"train": 1.1, "test": -0.1}, {"train": 1.0, "test": 0}])
def test_bad_ratios_are_rejected(ratios):
    with pytest.raises(RatioError):
        split_sizes(10, ratios)


@settings(deadline=None)
@given(st.integers(1, 60), st.integers(0, 10), percent_ratios(), st.integers(0, 1000))
def test_assign_splits_partitions_and_pins_ood(n, n_ood, ratios, seed):
    samples = pool(n, min(n_ood, n))
    last = list(ratios)[-1]
    sizes = split_sizes(n, ratios)
    ood = sum(s.ood for s in samples)
    if ood > sizes[last]:
        with pytest.raises(OodOverflow):
            assign_splits(samples, ratios, seed, ood_split=last)
        return
    parts = assign_splits(samples, ratios, seed, ood_split=last)
    assert {k: len(v) for k, v in parts.items()} == sizes
    ids = [s.id for p in parts.values() for s in p]
    assert sorted(ids) == sorted(s.id for s in samples)
    assert all(not s.ood for name, p in parts.items() if name != last for s in p)
    assert parts == assign_splits(list(reversed(samples)), ratios, seed, ood_split=last)


def test_unknown_ood_split_is_rejected():
    with pytest.raises(RatioError):
        assign_splits(pool(10), {"train": 0.5, "val": 0.5}, 0)


def test_stratification_spreads_kinds():
    parts = assign_splits(pool(90), {"train": 0.8, "val": 0.1, "test": 0.1}, 3)
    for name, p in parts.items():
        counts = count_samples(p)
        assert len({k.split("|")[1] for k in counts}) == 3, name


# ---------------------------------------------------------------------------
# emission


def test_emit_load_recount(tmp_path):
    samples = pool(40, 3)
    m = emit_dataset(samples, {"train": 0.8, "val": 0.1, "test": 0.1}, 11, tmp_path, config_digest="abc")
    assert m.splits == {"train": 32, "val": 4, "test": 4} and m.total == 40
    again, parts = load_dataset(tmp_path / "manifest.json")
    assert again.to_json() == m.to_json() == recount(tmp_path).to_json()
    assert sorted(s.id for p in parts.values() for s in p) == sorted(s.id for s in samples)
    assert sum(s.ood for s in parts["test"]) == 3
    header, test = read_split(tmp_path / "test.jsonl")
    assert header["count"] == 4 and header["config_digest"] == "abc"
    assert [s.id for s in test] == [s.id for s in weighted_order(test, derive_seed(11, "test"))]


def test_emit_refuses_invalid_or_duplicate_samples(tmp_path):
    bad = sample(0)
    bad.answer = "Q"
    with pytest.raises(SchemaViolation):
        emit_dataset([bad], {"train": 1.0}, 0, tmp_path, ood_split="train")
    with pytest.raises(SchemaViolation):
        emit_dataset([sample(1), sample(1)], {"train": 1.0}, 0, tmp_path, ood_split="train")
    with pytest.raises(OodOverflow):
        emit_dataset(pool(10, 5), {"train": 0.8, "test": 0.2}, 0, tmp_path)


def test_tampered_split_file_is_detected(tmp_path):
    emit_dataset(pool(10), {"train": 0.8, "val": 0.1, "test": 0.1}, 0, tmp_path)
    lines = (tmp_path / "train.jsonl").read_text().splitlines()
    (tmp_path / "train.jsonl").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(SchemaViolation):
        load_dataset(tmp_path)


def test_config_digest_is_key_order_free():
    assert config_digest({"a": 1, "b": [2]}) == config_digest({"b": [2], "a": 1})
    assert config_digest({"a": 1}) != config_digest({"a": 2})


def test_empirical_first_pick_rate_is_weight_proportional():
    samples = [sample(i, surprise=10 if i == 0 else 1) for i in range(5)]
    rng = random.Random(0)
    hits = sum(weighted_order(samples, rng.randrange(2**32))[0].id == samples[0].id for _ in range(4000))
    assert abs(hits / 4000 - 10 / 14) < 0.03
