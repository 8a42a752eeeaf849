"""Instruction samples, seed templates and the template pool."""
from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

from worldqa.common import content_hash

KINDS = ("MultipleChoice", "Rationale", "Counterfactual", "EpisodicMemory", "PlanComparison")
SCALES = ("Step", "Subgoal", "Plan")
LABELS = string.ascii_uppercase


class SlotResolutionFailure(LookupError):
    """The episode lacks an entity the template refers to."""


@dataclass(frozen=True)
class SeedTemplate:
    id: str
    env_kind: str
    kind: str
    temporal_scale: str
    question_class: str
    skeleton: str
    provenance: str = "seed"        # "seed" or "bootstrapped:<round>"

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.temporal_scale not in SCALES:
            raise ValueError(f"unknown temporal scale {self.temporal_scale!r}")
        if self.env_kind not in ("agent_world", "driving"):
            raise ValueError(f"unknown env kind {self.env_kind!r}")

    @property
    def slots(self) -> list[str]:
        return [name for _, name, _, _ in string.Formatter().parse(self.skeleton) if name]

    def fill(self, values: dict) -> str:
        missing = [s for s in self.slots if s not in values]
        if missing:
            raise SlotResolutionFailure(f"template {self.id}: unresolved slots {missing}")
        return self.skeleton.format(**values)

    def to_json(self) -> dict:
        return {"id": self.id, "env_kind": self.env_kind, "kind": self.kind,
                "temporal_scale": self.temporal_scale, "question_class": self.question_class,
                "skeleton": self.skeleton, "provenance": self.provenance}

    @classmethod
    def from_json(cls, d: dict) -> "SeedTemplate":
        return cls(**d)


@dataclass
class TemplatePool:
    templates: dict[str, SeedTemplate] = field(default_factory=dict)

    def add(self, t: SeedTemplate) -> None:
        if t.id in self.templates:
            raise ValueError(f"duplicate template id {t.id!r}")
        self.templates[t.id] = t

    def __len__(self) -> int:
        return len(self.templates)

    def __iter__(self):
        return iter(self.templates.values())

    def for_env(self, env_kind: str) -> list[SeedTemplate]:
        return [t for t in self.templates.values() if t.env_kind == env_kind]

    def copy(self) -> "TemplatePool":
        return TemplatePool(dict(self.templates))

    def to_json(self) -> list[dict]:
        return [t.to_json() for t in self.templates.values()]

    @classmethod
    def from_json(cls, rows: list[dict]) -> "TemplatePool":
        pool = cls()
        for r in rows:
            pool.add(SeedTemplate.from_json(r))
        return pool


def load_seed_pool(path: Optional[str] = None) -> TemplatePool:
    """The shipped pool, or one read from ``path``."""
    if path is None:
        text = resources.files("worldqa.annotator").joinpath("seed_pool.json").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    return TemplatePool.from_json(json.loads(text)["templates"])


@dataclass
class InstructionSample:
    env_kind: str
    kind: str
    temporal_scale: str
    question: str
    answer: str
    question_class: str
    context: Optional[list[str]] = None   # option texts, labelled A, B, C, ...
    rationale: Optional[str] = None
    source_episodes: list[str] = field(default_factory=list)
    surprise: int = 5
    surprise_flagged: bool = False
    verified: bool = False
    ood: bool = False
    weight: float = 1.0                   # extra multiplier (novelty down-weighting)
    template_id: str = ""
    meta: dict = field(default_factory=dict)
    id: str = ""

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.temporal_scale not in SCALES:
            raise ValueError(f"unknown temporal scale {self.temporal_scale!r}")
        if not self.id:
            self.id = content_hash([self.env_kind, self.kind, self.question, self.context, self.answer,
                                    self.source_episodes, self.template_id], 20)

    @property
    def labels(self) -> list[str]:
        return list(LABELS[:len(self.context)]) if self.context else []

    @property
    def context_text(self) -> Optional[str]:
        if not self.context:
            return None
        return " ".join(f"{l}: {o}" for l, o in zip(LABELS, self.context))

    def answer_text(self) -> str:
        """The answer with a choice letter resolved to its option."""
        if self.context and self.answer in self.labels:
            return self.context[self.labels.index(self.answer)]
        return self.answer

    def text(self) -> str:
        parts = [self.question]
        if self.context:
            parts.append(self.context_text)
        parts.append(self.answer_text())
        return "\n".join(parts)

    def to_json(self) -> dict:
        return {"id": self.id, "env_kind": self.env_kind, "kind": self.kind,
                "temporal_scale": self.temporal_scale, "question": self.question,
                "context": self.context, "answer": self.answer, "rationale": self.rationale,
                "question_class": self.question_class, "source_episodes": list(self.source_episodes),
                "surprise": self.surprise, "surprise_flagged": self.surprise_flagged,
                "verified": self.verified, "ood": self.ood, "weight": self.weight,
                "template_id": self.template_id, "meta": self.meta}

    @classmethod
    def from_json(cls, d: dict) -> "InstructionSample":
        return cls(**d)
