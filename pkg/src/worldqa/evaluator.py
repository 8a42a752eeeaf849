"""Evaluation harness: repeated task-completion runs, QA accuracy and reports.

Episode seeds are a pure function of the suite seed, the task id and the
repeat index (``derive_seed(suite_seed, task_id, repeat)``), so any single
run can be replayed. Completion is the unweighted mean over tasks of each
task's mean success over its repeats.
"""
from __future__ import annotations

import json
import logging
import re
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

from worldqa.agent_loop import AgentWorldEnv, extract_choice, make_env, run_episode
from worldqa.agent_world.solver import validate_solvable
from worldqa.common import derive_seed
from worldqa.datasets import load_dataset
from worldqa.llm_gateway import Gateway, GatewayError
from worldqa.urban_driving.scenarios import UnknownTemplate

log = logging.getLogger(__name__)


class EmptyDataset(ValueError):
    pass


class InvalidSuite(ValueError):
    pass


# ---------------------------------------------------------------------------
# task suites


@dataclass(frozen=True)
class SuiteTask:
    id: str
    env_spec: dict

    def to_json(self) -> dict:
        return {"id": self.id, "env_spec": self.env_spec}


def load_suite(path: Union[str, Path]) -> list[SuiteTask]:
    """Suite file: a JSON list (or ``{"tasks": [...]}``) of ``{"id", "env_spec"}``."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    rows = data["tasks"] if isinstance(data, dict) else data
    tasks = [SuiteTask(str(r["id"]), r["env_spec"]) for r in rows]
    ids = [t.id for t in tasks]
    if len(set(ids)) != len(ids):
        raise InvalidSuite("duplicate task ids in suite")
    return tasks


def certify(tasks: Sequence[SuiteTask]) -> None:
    """Every Agent World task must be solvable and every scenario must spawn."""
    for t in tasks:
        try:
            env = make_env(t.env_spec)
        except (KeyError, ValueError, UnknownTemplate) as e:
            raise InvalidSuite(f"task {t.id}: cannot build environment: {e}") from e
        if isinstance(env, AgentWorldEnv) and not validate_solvable(env.initial, env.task):
            raise InvalidSuite(f"task {t.id}: not solvable")


def episode_seed(suite_seed: int, task_id: str, repeat: int) -> int:
    return derive_seed(suite_seed, task_id, repeat)


@dataclass
class TaskResult:
    task_id: str
    outcomes: list[str]
    gateway_failures: int = 0

    @property
    def repeats(self) -> int:
        return len(self.outcomes)

    @property
    def successes(self) -> int:
        return sum(o == "Success" for o in self.outcomes)

    @property
    def mean(self) -> float:
        return self.successes / self.repeats if self.repeats else 0.0

    def to_json(self) -> dict:
        return {"task_id": self.task_id, "outcomes": self.outcomes, "successes": self.successes,
                "repeats": self.repeats, "mean": self.mean, "gateway_failures": self.gateway_failures}


@dataclass
class CompletionSection:
    suite: str
    tasks: list[TaskResult]
    repeats: int
    suite_seed: int = 0

    @property
    def completion(self) -> float:
        return sum(t.mean for t in self.tasks) / len(self.tasks) if self.tasks else 0.0

    def to_json(self) -> dict:
        return {"suite": self.suite, "repeats": self.repeats, "suite_seed": self.suite_seed,
                "completion": self.completion, "tasks": [t.to_json() for t in self.tasks]}

    @classmethod
    def from_json(cls, d: dict) -> "CompletionSection":
        tasks = [TaskResult(t["task_id"], list(t["outcomes"]), t.get("gateway_failures", 0)) for t in d["tasks"]]
        return cls(d["suite"], tasks, d["repeats"], d.get("suite_seed", 0))


def eval_task_completion(suite: Sequence[SuiteTask], llm: Gateway, repeats: int = 10, *, suite_seed: int = 0,
                         max_steps: int = 100, parallelism: int = 1, suite_name: str = "suite",
                         check: bool = True) -> CompletionSection:
    """Run every (task, repeat) once; gateway failures count as flagged failures."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if check:
        certify(suite)

    def one(job: tuple[int, int]) -> tuple[int, int, str, bool]:
        ti, r = job
        task = suite[ti]
        try:
            rec = run_episode(make_env(task.env_spec), llm, max_steps=max_steps,
                              episode_seed=episode_seed(suite_seed, task.id, r))
            return ti, r, rec.outcome, False
        except GatewayError as e:
            log.warning("task %s repeat %d: gateway failure: %s", task.id, r, e)
            return ti, r, "Failure", True

    jobs = [(ti, r) for ti in range(len(suite)) for r in range(repeats)]
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        done = list(pool.map(one, jobs))
    outcomes: dict[int, list] = defaultdict(lambda: [None] * repeats)
    flagged: dict[int, int] = defaultdict(int)
    for ti, r, outcome, failed in done:
        outcomes[ti][r] = outcome
        flagged[ti] += failed
    results = [TaskResult(t.id, outcomes[i], flagged[i]) for i, t in enumerate(suite)]
    return CompletionSection(suite_name, results, repeats, suite_seed)


# ---------------------------------------------------------------------------
# QA accuracy

QA_HEADER = "[qa]"
_ANSWER_LINE = re.compile(r"answer\s*(?:is)?\s*:\s*(.+)", re.IGNORECASE)


def _norm(text: str) -> str:
    return " ".join(text.strip().strip(".").split()).lower()


def extract_free_text(reply: str) -> Optional[str]:
    found = _ANSWER_LINE.findall(reply)
    return found[-1].strip() if found else (reply.strip() or None)


def qa_prompt(sample) -> str:
    lines = [f"{QA_HEADER} Question: {sample.question}"]
    if sample.context:
        lines.append(f"Context: {sample.context_text}")
        lines.append("Reply with 'Answer: <letter>'.")
    else:
        lines.append("Reply with 'Answer: <short answer>'.")
    return "\n".join(lines)


@dataclass
class Accuracy:
    correct: int = 0
    total: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def to_json(self) -> dict:
        return {"correct": self.correct, "total": self.total, "accuracy": self.accuracy}


@dataclass
class QaSection:
    dataset: str
    per_kind: dict[str, Accuracy]
    overall: Accuracy
    ood: Optional[Accuracy] = None

    def to_json(self) -> dict:
        return {"dataset": self.dataset, "per_kind": {k: v.to_json() for k, v in sorted(self.per_kind.items())},
                "overall": self.overall.to_json(), "ood": self.ood.to_json() if self.ood else None}

    @classmethod
    def from_json(cls, d: dict) -> "QaSection":
        acc = lambda x: Accuracy(x["correct"], x["total"])  # noqa: E731
        return cls(d["dataset"], {k: acc(v) for k, v in d["per_kind"].items()}, acc(d["overall"]),
                   acc(d["ood"]) if d.get("ood") else None)


def eval_qa(dataset_path: Union[str, Path], llm: Gateway,
            extractor: Callable[[str], Optional[str]] = extract_choice, *,
            splits: Optional[Sequence[str]] = None, name: Optional[str] = None) -> QaSection:
    """Prompt each sample; choice items compare labels, free-text items compare normalized text."""
    _, parts = load_dataset(dataset_path)
    samples = [s for n, p in parts.items() if splits is None or n in splits for s in p]
    if not samples:
        raise EmptyDataset(f"no samples in {dataset_path}")
    per_kind: dict[str, Accuracy] = defaultdict(Accuracy)
    overall, ood = Accuracy(), Accuracy()
    for s in samples:
        reply = llm.ask(qa_prompt(s), metadata={"purpose": "qa", "gold": s.answer, "sample": s})[0]
        if s.context:
            ok = extractor(reply) == s.answer
        else:
            got = extract_free_text(reply)
            ok = got is not None and _norm(got) == _norm(s.answer)
        bucket = ood if s.ood else overall
        for acc in (per_kind[s.kind], bucket):
            acc.total += 1
            acc.correct += int(ok)
    return QaSection(name or Path(dataset_path).name, dict(per_kind), overall, ood if ood.total else None)


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    model: str = "agent"
    completion: list[CompletionSection] = field(default_factory=list)
    qa: list[QaSection] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"model": self.model, "completion": [c.to_json() for c in self.completion],
                "qa": [q.to_json() for q in self.qa], "meta": self.meta}

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        return cls(d.get("model", "agent"), [CompletionSection.from_json(c) for c in d.get("completion", [])],
                   [QaSection.from_json(q) for q in d.get("qa", [])], dict(d.get("meta", {})))


def _pct(x: float) -> str:
    return f"{100 * x:.1f}"


def render_markdown(report: EvalReport) -> str:
    lines = [f"# Evaluation report: {report.model}", ""]
    if report.completion:
        lines += ["## Task completion (%)", "", "| Model | Suite | Tasks | Repeats | Completion |",
                  "|---|---|---|---|---|"]
        for c in report.completion:
            lines.append(f"| {report.model} | {c.suite} | {len(c.tasks)} | {c.repeats} | {_pct(c.completion)} |")
        lines.append("")
    else:
        lines += ["_No task-completion section in this report._", ""]
    if report.qa:
        lines += ["## QA accuracy (%)", "", "| Model | Dataset | Kind | N | Accuracy |", "|---|---|---|---|---|"]
        for q in report.qa:
            for kind, acc in sorted(q.per_kind.items()):
                lines.append(f"| {report.model} | {q.dataset} | {kind} | {acc.total} | {_pct(acc.accuracy)} |")
            lines.append(f"| {report.model} | {q.dataset} | all (in-distribution) | {q.overall.total} | "
                         f"{_pct(q.overall.accuracy)} |")
            if q.ood is not None:
                lines.append(f"| {report.model} | {q.dataset} | OOD | {q.ood.total} | {_pct(q.ood.accuracy)} |")
        lines.append("")
    else:
        lines += ["_No QA section in this report._", ""]
    if report.meta:
        lines += ["## Run metadata", ""] + [f"- {k}: {json.dumps(v, sort_keys=True)}"
                                            for k, v in sorted(report.meta.items())] + [""]
    return "\n".join(lines)


def emit_report(report: EvalReport, path: Union[str, Path], fmt: str = "json") -> Path:
    path = Path(path)
    if fmt == "json":
        text = json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"
    elif fmt in ("markdown", "markdown-table", "md"):
        text = render_markdown(report)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path
