"""Grounded QA generation and simulator verification."""
from __future__ import annotations

import logging
import random
import re
from typing import Optional, Sequence

from worldqa.agent_loop import EpisodeRecord, extract_choice, make_env, replay_matches
from worldqa.annotator.classes import REGISTRY, Ctx, EnvFactory, Grounded, ReplayMismatch
from worldqa.annotator.samples import LABELS, InstructionSample, SeedTemplate, SlotResolutionFailure
from worldqa.common import content_hash, derive_seed
from worldqa.experience_store import EmptyStore
from worldqa.llm_gateway import Gateway

log = logging.getLogger(__name__)

DRAFT_HEADER = "[draft]"
FIX_HEADER = "[explain]"

DEFAULT_SKELETONS = {
    "aw.counterfactual_outcome": ("At step {step} you chose {action}. If you had chosen {alt} instead and then "
                                  "repeated the same remaining actions, how would the episode have ended?"),
    "dr.counterfactual": ("At t={t} s you chose {action}. Had you chosen {alt} instead and kept the rest of "
                          "your decisions, what would have happened?"),
    "aw.plan_comparison": "Which plan is better for the task: {goal}?",
    "dr.plan_comparison": "Which plan is better for the drive: {goal}?",
}


def _draft_prompt(template: SeedTemplate, question: str, options: Optional[list[str]], hint: str,
                  record: Optional[EpisodeRecord], rationale: bool) -> str:
    lines = [f"{DRAFT_HEADER} Turn this embodied experience into one question-answer item.",
             f"Kind: {template.kind}; temporal scale: {template.temporal_scale}",
             f"Question template: {question}"]
    if options:
        lines.append("Options:")
        lines += [f"{l}: {o}" for l, o in zip(LABELS, options)]
    if hint:
        lines.append(f"Simulator note: {hint}")
    if record is not None:
        lines += ["Episode summary:", record.digest()]
    want = '"Question: ...", "Answer: ..."' + (' and "Rationale: ..."' if rationale else "")
    lines.append(f"Reply with lines {want}." + (" Answer with the option letter." if options else ""))
    return "\n".join(lines)


_FIELD = re.compile(r"^\s*(Question|Answer|Rationale)\s*:\s*(.*)$", re.IGNORECASE)


def parse_draft(text: str) -> dict:
    out: dict[str, str] = {}
    current = None
    for line in text.splitlines():
        m = _FIELD.match(line)
        if m:
            current = m.group(1).lower()
            out[current] = m.group(2).strip()
        elif current == "rationale" and line.strip():
            out[current] += " " + line.strip()
    return out


def _normalize(text: str) -> str:
    return " ".join(text.strip().strip(".").split()).lower()


def _draft_answer(raw: Optional[str], options: Optional[list[str]]) -> Optional[str]:
    if raw is None:
        return None
    if not options:
        return raw.strip().rstrip(".") or None
    letter = extract_choice("Answer: " + raw)
    if letter and letter in LABELS[:len(options)]:
        return letter
    for l, o in zip(LABELS, options):
        if _normalize(raw) == _normalize(o):
            return l
    return None


def verify_against_sim(sample: InstructionSample, env_factory: EnvFactory = make_env) -> bool:
    """Recompute the answer by simulation; unknown classes are never verified."""
    qc = REGISTRY.get(sample.question_class)
    if qc is None or qc.truth is None:
        return False
    if sample.context and sample.answer not in sample.labels:
        return False
    try:
        truth = qc.truth(sample.meta, env_factory)
    except (ReplayMismatch, KeyError, IndexError, ValueError, TypeError) as e:
        log.warning("verification of %s failed: %s", sample.id, e)
        return False
    if truth is None:
        return False
    return _normalize(sample.answer_text()) == _normalize(truth)


def _finish(template: SeedTemplate, g: Grounded, records: Sequence[EpisodeRecord], llm: Gateway,
            env_factory: EnvFactory, ood: bool, digest_record: Optional[EpisodeRecord]) -> InstructionSample:
    """Draft with the annotator, then verify and correct against the simulator."""
    question = template.fill(g.slots)
    options, gold = g.labelled()
    rationale_wanted = template.kind == "Rationale"
    prompt = _draft_prompt(template, question, options, g.hint, digest_record, rationale_wanted)
    md = {"purpose": "draft", "template": template, "question": question, "options": options,
          "gold": gold, "hint": g.hint, "rationale": rationale_wanted}
    draft = parse_draft(llm.ask(prompt, metadata=md)[0])
    asked = draft.get("question", "")
    if asked and all(str(v) in asked for v in g.slots.values()):
        question = asked
    answer = _draft_answer(draft.get("answer"), options)
    sample = InstructionSample(
        env_kind=template.env_kind, kind=template.kind, temporal_scale=template.temporal_scale,
        question=question, answer=answer or "", question_class=template.question_class, context=options,
        rationale=draft.get("rationale") if rationale_wanted else None,
        source_episodes=[r.uid for r in records], ood=ood, template_id=template.id,
        meta={**g.meta, "drafted_answer": answer})
    sample.verified = verify_against_sim(sample, env_factory)
    qc = REGISTRY[template.question_class]
    if not sample.verified and qc.truth is not None and g.truth is not None:
        sample.answer = gold
        sample.meta["corrected"] = True
        if rationale_wanted:
            fix = (f"{FIX_HEADER} Explain in one or two sentences why the answer to this question is "
                   f"'{g.truth}'.\nQuestion: {question}\nSimulator note: {g.hint}")
            sample.rationale = llm.ask(fix, metadata={**md, "purpose": "explain"})[0].strip() or None
        sample.verified = verify_against_sim(sample, env_factory)
    sample.id = ""
    sample.__post_init__()
    return sample


def generate_qa(records: Sequence[EpisodeRecord], template: SeedTemplate, llm: Gateway, store=None, *,
                seed: int = 0, env_factory: EnvFactory = make_env, on_missing: str = "raise"
                ) -> list[InstructionSample]:
    """One sample per record, grounded by ``template.question_class``."""
    qc = REGISTRY.get(template.question_class)
    if qc is None:
        raise KeyError(f"unregistered question class {template.question_class!r}")
    out = []
    for rec in records:
        if rec.env_kind != template.env_kind:
            raise ValueError(f"template {template.id} is for {template.env_kind}, episode is {rec.env_kind}")
        rng = random.Random(derive_seed(seed, template.id, rec.uid))
        g = qc.ground(Ctx(rec, rng, store))
        if g is None:
            if on_missing == "raise":
                raise SlotResolutionFailure(f"{template.id}: nothing to ask about in episode {rec.uid}")
            continue
        out.append(_finish(template, g, [rec], llm, env_factory, rec.ood, rec))
    return out


def _default_template(qclass: str, env_kind: str, kind: str, pool=None) -> SeedTemplate:
    if pool is not None:
        for t in pool:
            if t.question_class == qclass:
                return t
    return SeedTemplate(f"default.{qclass}", env_kind, kind, REGISTRY[qclass].temporal_scale, qclass,
                        DEFAULT_SKELETONS[qclass])


def generate_counterfactual(record: EpisodeRecord, llm: Gateway, env_factory: EnvFactory = make_env, *,
                            seed: int = 0, template: Optional[SeedTemplate] = None, pool=None
                            ) -> Optional[InstructionSample]:
    """Re-simulate an untaken action; ``None`` when no step offers an alternative."""
    qclass = "aw.counterfactual_outcome" if record.env_kind == "agent_world" else "dr.counterfactual"
    template = template or _default_template(qclass, record.env_kind, "Counterfactual", pool)
    if not replay_matches(record):
        raise ReplayMismatch(f"episode {record.uid} does not replay to its recorded log")
    rng = random.Random(derive_seed(seed, template.id, record.uid))
    g = REGISTRY[qclass].ground(Ctx(record, rng))
    if g is None:
        return None
    return _finish(template, g, [record], llm, env_factory, record.ood, record)


def generate_plan_comparison(query: str, store, llm: Gateway, k: int = 5, *, filter=None, seed: int = 0,
                             template: Optional[SeedTemplate] = None, pool=None,
                             env_factory: EnvFactory = make_env) -> Optional[InstructionSample]:
    """Contrast two retrieved attempts at the same task; ``None`` when nothing contrasts."""
    if k < 2:
        return None
    try:
        hits = store.retrieve(query, k, filter)
    except EmptyStore:
        return None
    recs = [(eid, store.get(eid)) for eid, _ in hits]
    pair, grounded = None, True
    by_task: dict[str, list] = {}
    for eid, r in recs:
        by_task.setdefault(content_hash(r.env_spec), []).append((eid, r))
    for group in by_task.values():
        wins = [x for x in group if x[1].outcome == "Success"]
        losses = [x for x in group if x[1].outcome != "Success"]
        for w in wins:
            for lo in losses:
                if store.tag_of(w[0]) != store.tag_of(lo[0]):
                    pair = (w, lo)
                    break
            if pair:
                break
        if pair:
            break
    if pair is None:
        for group in by_task.values():
            wins = [x for x in group if x[1].outcome == "Success"]
            distinct = {store.tag_of(e): (e, r) for e, r in wins}
            if len(distinct) >= 2:
                pair, grounded = tuple(list(distinct.values())[:2]), False
                break
    if pair is None:
        return None
    env_kind = pair[0][1].env_kind
    qclass = "aw.plan_comparison" if env_kind == "agent_world" else "dr.plan_comparison"
    template = template or _default_template(qclass, env_kind, "PlanComparison", pool)
    rng = random.Random(derive_seed(seed, template.id, pair[0][1].uid, pair[1][1].uid))
    plans = list(pair)
    rng.shuffle(plans)
    options = [store.tag_of(e) or r.digest() for e, r in plans]
    goal = make_env(plans[0][1].env_spec).goal_text()
    meta = {"plans": [{"uid": r.uid, "env_spec": r.env_spec, "actions": r.actions} for _, r in plans],
            "options": options, "query": query}
    if grounded:
        truth = options[[r.outcome for _, r in plans].index("Success")]
        hint = "only one of these attempts reached the goal in the simulator"
    else:
        truth, hint = None, "both attempts reached the goal; judge by efficiency and risk"
    g = Grounded({"goal": goal}, truth, options, meta, hint)
    if truth is None:
        question = template.fill(g.slots)
        prompt = _draft_prompt(template, question, options, hint, None, False)
        draft = parse_draft(llm.ask(prompt, metadata={"purpose": "draft", "template": template, "question": question,
                                                      "options": options, "gold": None, "hint": hint,
                                                      "rationale": False})[0])
        answer = _draft_answer(draft.get("answer"), options) or "A"
        return InstructionSample(env_kind, "PlanComparison", template.temporal_scale, question, answer, qclass,
                                 options, None, [r.uid for _, r in plans], ood=any(r.ood for _, r in plans),
                                 template_id=template.id, meta={**meta, "annotator_judgment": True})
    return _finish(template, g, [r for _, r in plans], llm, env_factory, any(r.ood for _, r in plans), None)
