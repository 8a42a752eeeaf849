"""Self-instruct growth of the template pool."""
from __future__ import annotations

import json
import logging
import random

from worldqa.annotator.classes import REGISTRY
from worldqa.annotator.samples import SeedTemplate, TemplatePool
from worldqa.common import derive_seed
from worldqa.experience_store import HashingEmbedder
from worldqa.llm_gateway import Gateway, GatewayExhausted

log = logging.getLogger(__name__)

BOOTSTRAP_HEADER = "[bootstrap]"


def _prompt(exemplars: list[SeedTemplate], per_round: int) -> str:
    lines = [f"{BOOTSTRAP_HEADER} Here are question templates for embodied question answering, one JSON "
             f"object per line. Write {per_round} new templates in the same format. Reuse a question_class "
             "from the examples and only the slot names that class already uses.", "Examples:"]
    lines += [json.dumps({k: v for k, v in t.to_json().items() if k not in ("id", "provenance")}, sort_keys=True)
              for t in exemplars]
    return "\n".join(lines)


def _allowed_slots(pool: TemplatePool) -> dict[str, set]:
    out: dict[str, set] = {}
    for t in pool:
        out.setdefault(t.question_class, set()).update(t.slots)
    return out


def parse_templates(text: str, pool: TemplatePool, round_: int, start: int) -> list[SeedTemplate]:
    """Well-formed templates from a reply; malformed lines are dropped."""
    allowed = _allowed_slots(pool)
    out = []
    for line in text.splitlines():
        line = line.strip().strip(",")
        if not line.startswith("{"):
            continue
        try:
            d = json.loads(line)
            qc = REGISTRY[d["question_class"]]
            t = SeedTemplate(f"boot{round_}.{start + len(out)}", qc.env_kind, qc.kind, qc.temporal_scale,
                             qc.name, str(d["skeleton"]).strip(), f"bootstrapped:{round_}")
        except (ValueError, KeyError, TypeError):
            continue
        if d.get("kind", t.kind) != t.kind or d.get("env_kind", t.env_kind) != t.env_kind:
            continue
        try:
            slots = set(t.slots)
        except ValueError:
            continue
        if not slots <= allowed.get(t.question_class, set()) or not t.skeleton.endswith("?"):
            continue
        out.append(t)
    return out


def bootstrap_templates(pool: TemplatePool, llm: Gateway, rounds: int, per_round: int = 2, *,
                        seed: int = 0, exemplars: int = 3, s_max: float = 0.95) -> TemplatePool:
    """Grow ``pool`` by ``rounds`` of self-instruct; returns a new pool."""
    if not len(pool):
        raise ValueError("cannot bootstrap from an empty pool")
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    pool = pool.copy()
    emb = HashingEmbedder()
    vecs = [emb(t.skeleton) for t in pool]
    for r in range(1, rounds + 1):
        rng = random.Random(derive_seed(seed, "bootstrap", r))
        ids = sorted(pool.templates)
        picked = [pool.templates[i] for i in rng.sample(ids, min(exemplars, len(ids)))]
        try:
            reply = llm.ask(_prompt(picked, per_round), temperature=0.7,
                            metadata={"purpose": "bootstrap", "round": r, "exemplars": picked,
                                      "per_round": per_round, "pool": pool})[0]
        except GatewayExhausted as e:
            log.warning("bootstrap round %d aborted: %s", r, e)
            continue
        admitted = 0
        for t in parse_templates(reply, pool, r, 0):
            v = emb(t.skeleton)
            if any(t.skeleton == o.skeleton for o in pool) or any(float(v @ o) > s_max for o in vecs):
                continue
            t = SeedTemplate(f"boot{r}.{admitted}", t.env_kind, t.kind, t.temporal_scale, t.question_class,
                             t.skeleton, t.provenance)
            pool.add(t)
            vecs.append(v)
            admitted += 1
            if admitted >= per_round:
                break
        log.info("bootstrap round %d admitted %d templates", r, admitted)
    return pool
