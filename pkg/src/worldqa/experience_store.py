"""Episode memory: append-only log, tags, embeddings, retrieval, surprise.

On disk a store is a directory with two JSONL files, each opening with a
header line:

- ``episodes.jsonl``: ``{"format": "worldqa.episodes", "version": 1}`` then one
  ``{"episode_id": int, "record": EpisodeRecord}`` per line.
- ``sidecar.jsonl``: ``{"format": "worldqa.sidecar", "version": 1, "dim": d}``
  then ``{"episode_id", "tag", "embedding", "surprise", "surprise_flagged"}``
  lines. Later lines for the same id supersede earlier ones.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Protocol, Union

import numpy as np

from worldqa.agent_loop import EpisodeRecord
from worldqa.common import canonical_json
from worldqa.llm_gateway import Gateway, GatewayExhausted

FORMAT_VERSION = 1
TAG_LIMIT = 512
ELLIPSIS = "..."
DEFAULT_DIM = 256
DEFAULT_SURPRISE = 5


TIE_DECIMALS = 12  # similarities equal to this many decimals count as tied


class StoreError(RuntimeError):
    pass


class EmptyStore(StoreError):
    pass


class BackendUnavailable(RuntimeError):
    pass


class TaggingFailed(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# embeddings


class Embedder(Protocol):
    dim: int

    def __call__(self, text: str) -> np.ndarray: ...


_TOKEN = re.compile(r"[a-z0-9]+")


class HashingEmbedder:
    """Signed feature hashing of lowercase words and word bigrams, L2-normalized."""

    def __init__(self, dim: int = DEFAULT_DIM, bigrams: bool = True):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.dim = dim
        self.bigrams = bigrams

    def __call__(self, text: str) -> np.ndarray:
        words = _TOKEN.findall(text.lower())
        if not words:
            raise ValueError("cannot embed text without tokens")
        tokens = words + ([f"{a} {b}" for a, b in zip(words, words[1:])] if self.bigrams else [])
        v = np.zeros(self.dim, dtype=np.float64)
        for tok in tokens:
            h = int.from_bytes(hashlib.blake2b(tok.encode(), digest_size=8).digest(), "little")
            v[h % self.dim] += 1.0 if (h >> 63) & 1 else -1.0
        n = np.linalg.norm(v)
        if n == 0:
            # every token cancelled out; fall back to an unsigned count
            for tok in tokens:
                h = int.from_bytes(hashlib.blake2b(tok.encode(), digest_size=8).digest(), "little")
                v[h % self.dim] += 1.0
            n = np.linalg.norm(v)
        return v / n


class HttpEmbedder:
    """Remote embedding service speaking the common ``/embeddings`` format."""

    def __init__(self, url: str, model: str, dim: int, post=None):
        import requests
        self.url, self.model, self.dim = url, model, dim
        self._post = post or requests.post

    def __call__(self, text: str) -> np.ndarray:
        try:
            resp = self._post(self.url, json={"model": self.model, "input": text}, timeout=30)
            resp.raise_for_status()
            v = np.asarray(resp.json()["data"][0]["embedding"], dtype=np.float64)
        except Exception as e:  # network, HTTP or payload shape
            raise BackendUnavailable(str(e)) from e
        if v.shape != (self.dim,):
            raise BackendUnavailable(f"expected dim {self.dim}, got {v.shape}")
        return v / np.linalg.norm(v)


def embed(text: str, embedder: Optional[Embedder] = None) -> np.ndarray:
    if not text or not text.strip():
        raise ValueError("empty text")
    return (embedder or HashingEmbedder())(text)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


# ---------------------------------------------------------------------------
# surprise


@dataclass(frozen=True)
class SurpriseScore:
    value: int
    flagged: bool = False

    def __post_init__(self) -> None:
        if not 1 <= self.value <= 10:
            raise ValueError("surprise lies in [1, 10]")


SURPRISE_RUBRIC = (
    "[surprise] Rate from 1 to 10 how surprising or difficult the following item is for an agent "
    "that learned only from a simplified simulator (1 = routine, 10 = very surprising). "
    "Reply with a single integer.\n\n{text}"
)


def _parse_score(reply: str) -> Optional[int]:
    m = re.fullmatch(r"\s*(?:score\s*[:=]?\s*)?(\d{1,2})\s*\.?\s*", reply, re.IGNORECASE)
    if not m:
        return None
    v = int(m.group(1))
    return v if 1 <= v <= 10 else None


def score_surprise(item, llm: Gateway, metadata: Optional[dict] = None) -> SurpriseScore:
    """One rubric call; a bad reply gets one retry, then the neutral default, flagged."""
    text = item.digest() if hasattr(item, "digest") else str(item)
    md = {"purpose": "surprise", "item": item, **(metadata or {})}
    prompt = SURPRISE_RUBRIC.format(text=text)
    for attempt in range(2):
        try:
            reply = llm.ask(prompt, metadata={**md, "attempt": attempt})[0]
        except GatewayExhausted:
            break
        v = _parse_score(reply)
        if v is not None:
            return SurpriseScore(v)
    return SurpriseScore(DEFAULT_SURPRISE, flagged=True)


# ---------------------------------------------------------------------------
# tagging

TAG_PROMPT = (
    "[tag] Summarize in one sentence the strategy this agent followed and its outcome, "
    "for example 'firstly get the yellow keys, open the door with the key, grab the hammers'.\n\n{digest}"
)


def trim_tag(text: str) -> str:
    text = " ".join(text.split())
    if len(text) > TAG_LIMIT:
        text = text[:TAG_LIMIT - len(ELLIPSIS)].rstrip() + ELLIPSIS
    return text


# ---------------------------------------------------------------------------
# store


@dataclass
class _Side:
    tag: Optional[str] = None
    embedding: Optional[np.ndarray] = None
    surprise: Optional[int] = None
    surprise_flagged: bool = False


class ExperienceStore:
    """Append-only episode log with a tag/embedding sidecar.

    Writes are serialized by a lock; readers get list snapshots and never
    see a half-written record. ``root=None`` keeps everything in memory.
    """

    def __init__(self, root: Union[str, Path, None] = None, embedder: Optional[Embedder] = None):
        self.embedder = embedder or HashingEmbedder()
        self.dim = self.embedder.dim
        self.root = Path(root) if root is not None else None
        self._lock = threading.Lock()
        self._records: list[EpisodeRecord] = []
        self._by_uid: dict[str, int] = {}
        self._side: dict[int, _Side] = {}
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            self._load()

    # -- persistence --------------------------------------------------------
    @property
    def episodes_path(self) -> Path:
        return self.root / "episodes.jsonl"

    @property
    def sidecar_path(self) -> Path:
        return self.root / "sidecar.jsonl"

    def _write(self, path: Path, header: dict, row: dict) -> None:
        try:
            new = not path.exists()
            with path.open("a", encoding="utf-8") as f:
                if new:
                    f.write(canonical_json(header) + "\n")
                f.write(canonical_json(row) + "\n")
                f.flush()
        except OSError as e:
            raise StoreError(f"{path}: {e}") from e

    def _load(self) -> None:
        if self.episodes_path.exists():
            with self.episodes_path.open(encoding="utf-8") as f:
                header = json.loads(f.readline())
                _check_header(header, "worldqa.episodes", self.episodes_path)
                for line in f:
                    if not line.strip():
                        continue
                    row = json.loads(line)
                    rec = EpisodeRecord.from_json(row["record"])
                    if row["episode_id"] != len(self._records):
                        raise StoreError(f"{self.episodes_path}: non-contiguous id {row['episode_id']}")
                    self._by_uid[rec.uid] = len(self._records)
                    self._records.append(rec)
        if self.sidecar_path.exists():
            with self.sidecar_path.open(encoding="utf-8") as f:
                header = json.loads(f.readline())
                _check_header(header, "worldqa.sidecar", self.sidecar_path)
                if header.get("dim") != self.dim:
                    raise StoreError(f"{self.sidecar_path}: dim {header.get('dim')} != {self.dim}")
                for line in f:
                    if line.strip():
                        row = json.loads(line)
                        self._side[row["episode_id"]] = _Side(
                            row["tag"], None if row["embedding"] is None else np.asarray(row["embedding"]),
                            row["surprise"], row.get("surprise_flagged", False))
            for eid, side in self._side.items():
                rec = self._records[eid]
                rec.tag, rec.surprise, rec.surprise_flagged = side.tag, side.surprise, side.surprise_flagged

    def _persist_side(self, eid: int) -> None:
        if self.root is None:
            return
        s = self._side[eid]
        self._write(self.sidecar_path, {"format": "worldqa.sidecar", "version": FORMAT_VERSION, "dim": self.dim},
                    {"episode_id": eid, "tag": s.tag,
                     "embedding": None if s.embedding is None else [float(x) for x in s.embedding],
                     "surprise": s.surprise, "surprise_flagged": s.surprise_flagged})

    # -- records ------------------------------------------------------------
    def append(self, record: EpisodeRecord) -> int:
        with self._lock:
            if record.uid in self._by_uid:
                return self._by_uid[record.uid]
            eid = len(self._records)
            if self.root is not None:
                self._write(self.episodes_path, {"format": "worldqa.episodes", "version": FORMAT_VERSION},
                            {"episode_id": eid, "record": record.to_json()})
            self._records.append(record)
            self._by_uid[record.uid] = eid
            if record.tag or record.surprise is not None:
                self._side[eid] = _Side(record.tag, embed(record.tag, self.embedder) if record.tag else None,
                                        record.surprise, record.surprise_flagged)
                self._persist_side(eid)
            return eid

    def get(self, eid: int) -> EpisodeRecord:
        return self._records[eid]

    def id_of(self, uid: str) -> int:
        return self._by_uid[uid]

    def by_uid(self, uid: str) -> EpisodeRecord:
        return self._records[self._by_uid[uid]]

    def __len__(self) -> int:
        return len(self._records)

    def records(self) -> list[EpisodeRecord]:
        with self._lock:
            return list(self._records)

    # -- annotation ---------------------------------------------------------
    def set_tag(self, eid: int, tag: str) -> str:
        tag = trim_tag(tag)
        if not tag:
            raise ValueError("empty tag")
        vec = embed(tag, self.embedder)
        with self._lock:
            side = self._side.setdefault(eid, _Side())
            side.tag, side.embedding = tag, vec
            self._records[eid].tag = tag
            self._persist_side(eid)
        return tag

    def set_surprise(self, eid: int, score: SurpriseScore) -> None:
        with self._lock:
            side = self._side.setdefault(eid, _Side())
            side.surprise, side.surprise_flagged = score.value, score.flagged
            rec = self._records[eid]
            rec.surprise, rec.surprise_flagged = score.value, score.flagged
            self._persist_side(eid)

    def tag_experience(self, eid: int, llm: Gateway) -> str:
        """Ask the annotator for a strategy-and-outcome tag (one retry on empty)."""
        rec = self._records[eid]
        if not rec.steps:
            raise ValueError("cannot tag an episode without steps")
        prompt = TAG_PROMPT.format(digest=rec.digest())
        for attempt in range(2):
            reply = llm.ask(prompt, metadata={"purpose": "tag", "record": rec, "attempt": attempt})[0]
            tag = trim_tag(reply)
            if tag and _TOKEN.search(tag.lower()):
                return self.set_tag(eid, tag)
        raise TaggingFailed(f"annotator returned an empty tag for episode {eid}")

    def score_episode(self, eid: int, llm: Gateway) -> SurpriseScore:
        score = score_surprise(self._records[eid], llm)
        self.set_surprise(eid, score)
        return score

    def tag_of(self, eid: int) -> Optional[str]:
        side = self._side.get(eid)
        return side.tag if side else None

    # -- retrieval ----------------------------------------------------------
    def retrieve(self, query: str, k: int, filter: Union[dict, Callable, None] = None
                 ) -> list[tuple[int, float]]:
        """Exact top-``k`` by cosine over tagged episodes; ties go to the lower id."""
        if k < 1:
            raise ValueError("k must be >= 1")
        pred = _predicate(filter)
        with self._lock:
            ids = [eid for eid, s in sorted(self._side.items())
                   if s.embedding is not None and pred(self._records[eid])]
            if not ids:
                raise EmptyStore("no tagged episodes match the filter")
            mat = np.stack([self._side[eid].embedding for eid in ids])
        q = embed(query, self.embedder)
        sims = mat @ q
        # rank on rounded scores so float noise cannot split a true tie;
        # lexsort: last key is primary, negated for descending order
        order = np.lexsort((np.asarray(ids), -np.round(sims, TIE_DECIMALS)))[:k]
        return [(ids[i], float(sims[i])) for i in order]


def _predicate(filter) -> Callable[[EpisodeRecord], bool]:
    if filter is None:
        return lambda r: True
    if callable(filter):
        return filter
    fields = dict(filter)
    for key in fields:
        if key not in ("env_kind", "outcome", "fidelity", "task_id"):
            raise ValueError(f"unsupported filter key {key!r}")

    def pred(r: EpisodeRecord) -> bool:
        for key, want in fields.items():
            got = getattr(r, key)
            if isinstance(want, (list, tuple, set)) and got not in want:
                return False
            if not isinstance(want, (list, tuple, set)) and got != want:
                return False
        return True
    return pred


def _check_header(header: dict, fmt: str, path: Path) -> None:
    if header.get("format") != fmt:
        raise StoreError(f"{path}: not a {fmt} file")
    if header.get("version") != FORMAT_VERSION:
        raise StoreError(f"{path}: unsupported version {header.get('version')}")


def kinematic_features(scene) -> np.ndarray:
    """Unit feature vector of a driving scene, standing in for a scene encoder."""
    from worldqa.urban_driving.scene import leader_of
    ego = scene.ego
    if ego is None:
        v = np.zeros(8)
        v[0] = 1.0
        return v
    lead, gap, lead_v = leader_of(scene, ego)
    gap = min(gap, 200.0) if math.isfinite(gap) else 200.0
    lead_v = lead_v if lead is not None else ego.v
    lane = scene.lanes[ego.lane_id]
    n_near = sum(1 for o in scene.vehicles.values() if o.id != ego.id and abs(o.s - ego.s) < 60.0)
    feats = np.array([
        ego.v / 30.0, gap / 200.0, (ego.v - lead_v) / 30.0, len(scene.lanes) / 4.0,
        n_near / 10.0, float(bool(scene.intersections)), float(bool(scene.pedestrians or scene.obstacles)),
        abs(lane.curvature_at(ego.s)) * 100.0,
    ])
    n = np.linalg.norm(feats)
    return feats / n if n else feats
