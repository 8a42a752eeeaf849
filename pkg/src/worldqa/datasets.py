"""Instruction-dataset assembly: validation, dedup, splits, ordering, JSONL emission.

Each split is one JSONL file. Its first line is a header record naming the
format version, split, run seed and config digest; every following line is
one sample::

    {"id", "question", "context": [options] | null, "answer", "rationale"?, "meta": {...}}

``meta`` carries everything else about the sample (environment, kind,
temporal scale, verification and surprise) plus the raw ordering weight, so
a reader can rebuild the in-memory sample exactly.
"""
from __future__ import annotations

import json
import math
import random
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence, Union

import jsonschema

from worldqa.annotator.samples import KINDS, LABELS, SCALES, InstructionSample
from worldqa.common import content_hash, derive_seed

FORMAT = "worldqa.qa"
SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
UNVERIFIED_FACTOR = 0.5

RECORD_SCHEMA = {
    "type": "object",
    "required": ["id", "question", "context", "answer", "meta"],
    "additionalProperties": False,
    "properties": {
        "id": {"type": "string", "minLength": 1},
        "question": {"type": "string", "minLength": 1},
        "context": {"oneOf": [{"type": "null"},
                              {"type": "array", "minItems": 2, "maxItems": 26,
                               "items": {"type": "string", "minLength": 1}}]},
        "answer": {"type": "string", "minLength": 1},
        "rationale": {"type": "string"},
        "meta": {
            "type": "object",
            "required": ["env_kind", "kind", "temporal_scale", "question_class", "verified", "ood",
                         "surprise", "surprise_flagged", "weight", "source_episodes", "template_id",
                         "annotation", "order_weight"],
            "additionalProperties": False,
            "properties": {
                "env_kind": {"enum": ["agent_world", "driving"]},
                "kind": {"enum": list(KINDS)},
                "temporal_scale": {"enum": list(SCALES)},
                "question_class": {"type": "string"},
                "verified": {"type": "boolean"},
                "ood": {"type": "boolean"},
                "surprise": {"type": "integer", "minimum": 1, "maximum": 10},
                "surprise_flagged": {"type": "boolean"},
                "weight": {"type": "number", "minimum": 0},
                "order_weight": {"type": "number", "minimum": 0},
                "source_episodes": {"type": "array", "items": {"type": "string"}},
                "template_id": {"type": "string"},
                "annotation": {"type": "object"},
            },
        },
    },
}

HEADER_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "split", "count", "seed", "config_digest"],
    "properties": {
        "format": {"const": FORMAT},
        "version": {"const": SCHEMA_VERSION},
        "split": {"type": "string"},
        "count": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer"},
        "config_digest": {"type": "string"},
    },
}

_VALIDATOR = jsonschema.Draft202012Validator(RECORD_SCHEMA)


class SchemaViolation(ValueError):
    def __init__(self, sample_id: str, message: str):
        super().__init__(f"sample {sample_id}: {message}")
        self.sample_id = sample_id


class RatioError(ValueError):
    pass


class OodOverflow(RatioError):
    """More OOD samples than the evaluation split can hold."""


# ---------------------------------------------------------------------------
# records


def order_weight(sample: InstructionSample) -> float:
    """Selection weight: surprise, halved when unverified, times the sample's own weight."""
    return sample.surprise * (1.0 if sample.verified else UNVERIFIED_FACTOR) * sample.weight


def to_record(sample: InstructionSample) -> dict:
    rec = {"id": sample.id, "question": sample.question, "context": sample.context, "answer": sample.answer}
    if sample.rationale is not None:
        rec["rationale"] = sample.rationale
    rec["meta"] = {"env_kind": sample.env_kind, "kind": sample.kind, "temporal_scale": sample.temporal_scale,
                   "question_class": sample.question_class, "verified": sample.verified, "ood": sample.ood,
                   "surprise": sample.surprise, "surprise_flagged": sample.surprise_flagged,
                   "weight": sample.weight, "order_weight": order_weight(sample),
                   "source_episodes": list(sample.source_episodes), "template_id": sample.template_id,
                   "annotation": sample.meta}
    return rec


def from_record(rec: dict) -> InstructionSample:
    m = rec["meta"]
    return InstructionSample(
        env_kind=m["env_kind"], kind=m["kind"], temporal_scale=m["temporal_scale"], question=rec["question"],
        answer=rec["answer"], question_class=m["question_class"], context=rec["context"],
        rationale=rec.get("rationale"), source_episodes=list(m["source_episodes"]), surprise=m["surprise"],
        surprise_flagged=m["surprise_flagged"], verified=m["verified"], ood=m["ood"], weight=m["weight"],
        template_id=m["template_id"], meta=m["annotation"], id=rec["id"])


def validate_record(rec: dict) -> None:
    """Raise ``SchemaViolation`` unless ``rec`` is a well-formed sample record."""
    sid = str(rec.get("id", "?")) if isinstance(rec, dict) else "?"
    err = jsonschema.exceptions.best_match(_VALIDATOR.iter_errors(rec))
    if err is not None:
        where = "/".join(str(p) for p in err.absolute_path) or "record"
        raise SchemaViolation(sid, f"{where}: {err.message}")
    if rec["context"] is not None:
        labels = LABELS[:len(rec["context"])]
        if rec["answer"] not in labels:
            raise SchemaViolation(sid, f"answer {rec['answer']!r} is not one of the options {', '.join(labels)}")
    try:
        json.dumps(rec, allow_nan=False)
    except (TypeError, ValueError) as e:
        raise SchemaViolation(sid, f"not JSON-serializable: {e}") from None


def validate_samples(samples: Iterable[InstructionSample]) -> None:
    seen = set()
    for s in samples:
        validate_record(to_record(s))
        if s.id in seen:
            raise SchemaViolation(s.id, "duplicate sample id")
        seen.add(s.id)


# ---------------------------------------------------------------------------
# dedup and ordering


def _norm(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower())


def dedup_key(sample: InstructionSample) -> str:
    return content_hash([_norm(sample.question), _norm(sample.answer_text())], 32)


def dedup(samples: Sequence[InstructionSample]) -> list[InstructionSample]:
    """Drop exact duplicates by normalized question+answer; first occurrence wins."""
    seen = set()
    out = []
    for s in samples:
        k = dedup_key(s)
        if k not in seen:
            seen.add(k)
            out.append(s)
    return out


def weighted_order(samples: Sequence[InstructionSample], seed: int) -> list[InstructionSample]:
    """Weighted sampling without replacement, probability proportional to ``order_weight``.

    Each sample draws the key ``log(u) / w`` (the log of ``u ** (1/w)``) and
    samples are sorted by descending key. Input order does not matter: samples
    are first sorted by id, then draw ``u`` in turn from one seeded stream.
    """
    rng = random.Random(derive_seed(seed, "weighted_order"))
    keyed = []
    for s in sorted(samples, key=lambda s: s.id):
        u = 1.0 - rng.random()          # in (0, 1]
        w = order_weight(s)
        key = math.log(u) / w if w > 0 else -math.inf
        keyed.append((-key, s.id, s))
    keyed.sort(key=lambda x: (x[0], x[1]))
    return [s for _, _, s in keyed]


# ---------------------------------------------------------------------------
# splits


def split_sizes(total: int, ratios: dict[str, float]) -> dict[str, int]:
    """Largest-remainder rounding; equal remainders go to the earlier split (train first)."""
    check_ratios(ratios)
    names = list(ratios)
    # exact decimal arithmetic so equal remainders really compare equal
    exact = [total * Fraction(repr(ratios[n])) for n in names]
    sizes = [math.floor(x) for x in exact]
    left = total - sum(sizes)
    order = sorted(range(len(names)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[:left]:
        sizes[i] += 1
    return dict(zip(names, sizes))


def check_ratios(ratios: dict[str, float]) -> None:
    if not ratios:
        raise RatioError("no splits given")
    if any(not isinstance(v, (int, float)) or not v > 0 for v in ratios.values()):
        raise RatioError(f"split ratios must be positive: {ratios}")
    if abs(sum(ratios.values()) - 1.0) > 1e-9:
        raise RatioError(f"split ratios sum to {sum(ratios.values())!r}, not 1")


def _interleave(samples: Sequence[InstructionSample], seed: int) -> list[InstructionSample]:
    """Seeded shuffle within each (env_kind, kind) stratum, strata spread evenly."""
    strata: dict[tuple, list] = defaultdict(list)
    for s in sorted(samples, key=lambda s: s.id):
        strata[(s.env_kind, s.kind)].append(s)
    slots = []
    for key in sorted(strata):
        group = strata[key]
        random.Random(derive_seed(seed, "stratum", list(key))).shuffle(group)
        n = len(group)
        slots += [((i + 0.5) / n, key, s) for i, s in enumerate(group)]
    slots.sort(key=lambda x: (x[0], x[1]))
    return [s for _, _, s in slots]


def assign_splits(samples: Sequence[InstructionSample], ratios: dict[str, float], seed: int,
                  ood_split: str = "test") -> dict[str, list[InstructionSample]]:
    """Stratified assignment with exact largest-remainder sizes; OOD samples go to ``ood_split``."""
    sizes = split_sizes(len(samples), ratios)
    if ood_split not in sizes:
        raise RatioError(f"OOD split {ood_split!r} is not among the splits {list(sizes)}")
    ood = [s for s in samples if s.ood]
    if len(ood) > sizes[ood_split]:
        raise OodOverflow(f"{len(ood)} OOD samples do not fit the {sizes[ood_split]}-sample "
                          f"{ood_split!r} split")
    rest = _interleave([s for s in samples if not s.ood], seed)
    out: dict[str, list] = {}
    i = 0
    for name, size in sizes.items():
        take = size - (len(ood) if name == ood_split else 0)
        out[name] = rest[i:i + take] + (_interleave(ood, seed) if name == ood_split else [])
        i += take
    return out


# ---------------------------------------------------------------------------
# manifest and emission


def count_key(env_kind: str, kind: str, scale: str, verified: bool) -> str:
    return f"{env_kind}|{kind}|{scale}|{'verified' if verified else 'unverified'}"


def count_samples(samples: Iterable[InstructionSample]) -> dict[str, int]:
    c = Counter(count_key(s.env_kind, s.kind, s.temporal_scale, s.verified) for s in samples)
    return dict(sorted(c.items()))


@dataclass
class DatasetManifest:
    counts: dict[str, int]
    splits: dict[str, int]
    seed: int
    config_digest: str = ""
    files: dict[str, str] = field(default_factory=dict)
    ood_split: str = "test"
    version: int = SCHEMA_VERSION

    def __post_init__(self) -> None:
        total = sum(self.counts.values())
        if sum(self.splits.values()) != total:
            raise ValueError("split sizes do not sum to the sample count")

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_json(self) -> dict:
        return {"format": FORMAT + ".manifest", "version": self.version, "total": self.total,
                "counts": self.counts, "splits": self.splits, "seed": self.seed,
                "config_digest": self.config_digest, "files": self.files, "ood_split": self.ood_split}

    @classmethod
    def from_json(cls, d: dict) -> "DatasetManifest":
        return cls(dict(d["counts"]), dict(d["splits"]), int(d["seed"]), d.get("config_digest", ""),
                   dict(d.get("files", {})), d.get("ood_split", "test"), int(d.get("version", SCHEMA_VERSION)))


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, allow_nan=False)


def emit_dataset(samples: Sequence[InstructionSample], splits: dict[str, float], seed: int,
                 path: Union[str, Path], *, config_digest: str = "", ood_split: str = "test"
                 ) -> DatasetManifest:
    """Validate, split and write ``samples`` under directory ``path``."""
    check_ratios(splits)
    validate_samples(samples)
    parts = assign_splits(samples, splits, seed, ood_split)
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, part in parts.items():
        fname = f"{name}.jsonl"
        header = {"format": FORMAT, "version": SCHEMA_VERSION, "split": name, "count": len(part),
                  "seed": seed, "config_digest": config_digest}
        lines = [_dump(header)] + [_dump(to_record(s)) for s in weighted_order(part, derive_seed(seed, name))]
        (root / fname).write_text("\n".join(lines) + "\n", encoding="utf-8")
        files[name] = fname
    manifest = DatasetManifest(count_samples(samples), {n: len(p) for n, p in parts.items()}, seed,
                               config_digest, files, ood_split)
    (root / MANIFEST_NAME).write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    return manifest


def read_split(path: Union[str, Path]) -> tuple[dict, list[InstructionSample]]:
    """Header and samples of one split file; every record is re-validated."""
    with open(path, encoding="utf-8") as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise SchemaViolation("?", f"{path} is empty")
    header = json.loads(lines[0])
    try:
        jsonschema.validate(header, HEADER_SCHEMA)
    except jsonschema.ValidationError as e:
        raise SchemaViolation("header", f"{path}: {e.message}") from None
    samples = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        validate_record(rec)
        samples.append(from_record(rec))
    if len(samples) != header["count"]:
        raise SchemaViolation("header", f"{path}: header says {header['count']} records, found {len(samples)}")
    return header, samples


def load_dataset(path: Union[str, Path]) -> tuple[DatasetManifest, dict[str, list[InstructionSample]]]:
    root = Path(path)
    if root.is_file():
        root = root.parent
    manifest = DatasetManifest.from_json(json.loads((root / MANIFEST_NAME).read_text(encoding="utf-8")))
    return manifest, {name: read_split(root / fname)[1] for name, fname in manifest.files.items()}


def recount(path: Union[str, Path]) -> DatasetManifest:
    """Manifest rebuilt from the emitted files alone (for consistency checks)."""
    manifest, parts = load_dataset(path)
    every = [s for p in parts.values() for s in p]
    return DatasetManifest(count_samples(every), {n: len(p) for n, p in parts.items()}, manifest.seed,
                           manifest.config_digest, manifest.files, manifest.ood_split)


def config_digest(cfg) -> str:
    return content_hash(cfg, 16)
