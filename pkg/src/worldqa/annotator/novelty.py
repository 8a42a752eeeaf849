"""Two-stage novelty filter.

Stage 1 drops a sample whose embedding is within ``s_max`` cosine of any
kept sample. Stage 2 asks the annotator, by majority vote, whether the
sample is novel. Driving samples also get an easiness check: if their
kinematic feature vector lies within ``d_min`` of a kept one, they stay but
their weight is halved.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from worldqa.agent_loop import NoExtractableAnswer, extract_word, self_consistency
from worldqa.annotator.samples import InstructionSample
from worldqa.experience_store import HashingEmbedder
from worldqa.llm_gateway import Gateway, GatewayError

log = logging.getLogger(__name__)

NOVELTY_HEADER = "[novelty]"
EASY_WEIGHT = 0.5


@dataclass
class Thresholds:
    s_max: float = 0.95
    d_min: float = 0.02
    vote_n: int = 5
    neighbours: int = 3


@dataclass(frozen=True)
class Decision:
    keep: bool
    reason: str = ""
    flags: tuple = ()

    def __bool__(self) -> bool:
        return self.keep


KEEP = Decision(True)


@dataclass
class NoveltyFilter:
    """Stateful admission queue; ``admit`` serializes decisions."""

    llm: Optional[Gateway] = None
    thresholds: Thresholds = field(default_factory=Thresholds)
    embedder: HashingEmbedder = field(default_factory=HashingEmbedder)
    kept: list[InstructionSample] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._vecs: list[np.ndarray] = []
        self._kin: list[np.ndarray] = []
        self._lock = threading.Lock()
        for s in list(self.kept):
            self._remember(s)

    def _remember(self, s: InstructionSample) -> None:
        self._vecs.append(self.embedder(s.text()))
        if s.meta.get("kinematics") is not None:
            self._kin.append(np.asarray(s.meta["kinematics"], dtype=float))

    def nearest(self, sample: InstructionSample, k: int = 1) -> list[tuple[int, float]]:
        if not self._vecs:
            return []
        sims = np.stack(self._vecs) @ self.embedder(sample.text())
        order = np.lexsort((np.arange(len(sims)), -sims))[:k]
        return [(int(i), float(sims[i])) for i in order]

    def decide(self, sample: InstructionSample) -> Decision:
        near = self.nearest(sample, self.thresholds.neighbours)
        if near and near[0][1] > self.thresholds.s_max:
            return Decision(False, "NearDuplicate")
        flags: list[str] = []
        if self.llm is not None:
            prompt = _vote_prompt(sample, [self.kept[i] for i, _ in near])
            try:
                vote = self_consistency(prompt, self.thresholds.vote_n, self.llm, extract_word("novel", "redundant"),
                                        metadata={"purpose": "novelty", "sample": sample,
                                                  "neighbours": [self.kept[i] for i, _ in near]})
                if vote.answer == "redundant":
                    return Decision(False, "LlmJudged")
            except (GatewayError, NoExtractableAnswer) as e:
                log.warning("novelty vote skipped: %s", e)
                flags.append("vote_skipped")
        if sample.env_kind == "driving" and sample.meta.get("kinematics") is not None and self._kin:
            kin = np.asarray(sample.meta["kinematics"], dtype=float)
            dist = min(float(np.linalg.norm(kin - k)) for k in self._kin)
            if dist <= self.thresholds.d_min:
                flags.append("easy")
        return Decision(True, "", tuple(flags))

    def admit(self, sample: InstructionSample) -> Decision:
        with self._lock:
            d = self.decide(sample)
            if d.keep:
                if "easy" in d.flags:
                    sample.weight *= EASY_WEIGHT
                if d.flags:
                    sample.meta["novelty_flags"] = list(d.flags)
                self.kept.append(sample)
                self._remember(sample)
            return d


def _vote_prompt(sample: InstructionSample, neighbours: list[InstructionSample]) -> str:
    lines = [f"{NOVELTY_HEADER} Is the new question-answer item novel compared with the existing ones? "
             "Think it through, then finish with one word: novel or redundant.", "New item:", sample.text()]
    if neighbours:
        lines.append("Most similar existing items:")
        lines += [f"- {n.question}" for n in neighbours]
    return "\n".join(lines)


def filter_novelty(sample: InstructionSample, kept: list[InstructionSample], llm: Optional[Gateway] = None,
                   thresholds: Optional[Thresholds] = None) -> Decision:
    """Stateless form: decide ``sample`` against ``kept``."""
    return NoveltyFilter(llm, thresholds or Thresholds(), kept=list(kept)).decide(sample)
