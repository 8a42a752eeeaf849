"""Command-line entry point: ``worldqa <subcommand>``.

Subcommands are thin orchestrations of the package modules::

    gen-world   write one generated Agent World task as an env spec
    collect     run the actor and store episodes
    annotate    tag and score episodes, grow templates, generate samples
    filter      dedup and novelty-filter samples
    emit        write the JSONL splits and manifest
    eval        task completion over a suite and/or QA accuracy on a dataset
    replay      re-simulate a stored episode and check its event log
    pipeline    collect, annotate, filter and emit in one run

Exit codes: 0 success, 2 config error, 3 gateway exhaustion, 4 validation failure.
"""
from __future__ import annotations

import argparse
import importlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from worldqa.agent_loop import AgentWorldEnv, EpisodeRecord, collect_one, replay_matches
from worldqa.agent_world.examples import reference_task, reference_world
from worldqa.agent_world.generate import GenerationExhausted, WorldConfig, default_task, generate_world
from worldqa.annotator import (
    InstructionSample, NoveltyFilter, ReplayMismatch, Thresholds, bootstrap_templates, generate_counterfactual,
    generate_plan_comparison, generate_qa, load_seed_pool,
)
from worldqa.annotator.samples import TemplatePool
from worldqa.common import canonical_json, content_hash
from worldqa.datasets import RatioError, SchemaViolation, check_ratios, dedup, emit_dataset
from worldqa.evaluator import (
    EmptyDataset, EvalReport, InvalidSuite, emit_report, eval_qa, eval_task_completion, load_suite,
)
from worldqa.experience_store import ExperienceStore, TaggingFailed, score_surprise
from worldqa.llm_gateway import Gateway, GatewayExhausted, UsageLedger, build_backend
from worldqa.urban_driving.scenarios import TEMPLATES, ScenarioSpec

log = logging.getLogger("worldqa")

EXIT_OK, EXIT_CONFIG, EXIT_GATEWAY, EXIT_VALIDATION = 0, 2, 3, 4
DEFAULT_HANDLERS = "worldqa.demo_handlers:demo_handlers"


class ConfigError(ValueError):
    def __init__(self, key: str, message: str, path: Optional[str] = None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{key}: {message}")
        self.key = key


class ValidationFailure(RuntimeError):
    pass


SURPRISE_STAGES = ("after_filter", "before_filter")


# ---------------------------------------------------------------------------
# config


@dataclass
class RunConfig:
    environments: list[dict]
    seed: int = 0
    output_dir: str = "out"
    backends: dict = field(default_factory=lambda: {"actor": {"kind": "scripted", "default": "demo"},
                                                    "annotator": {"kind": "scripted", "default": "demo"}})
    handlers: str = DEFAULT_HANDLERS
    handler_args: dict = field(default_factory=dict)
    budgets: dict = field(default_factory=dict)
    filter: dict = field(default_factory=dict)
    splits: dict = field(default_factory=lambda: {"train": 0.8, "val": 0.1, "test": 0.1})
    ood_split: str = "test"
    surprise_stage: str = "after_filter"
    parallelism: int = 4
    source: Optional[str] = None
    raw: dict = field(default_factory=dict)

    BUDGET_DEFAULTS = {"episodes": 8, "refine_depth": 1, "bootstrap_rounds": 1, "bootstrap_per_round": 2,
                       "max_steps": 40, "memory": 8, "plan_k": 20}

    def budget(self, name: str) -> int:
        return int(self.budgets.get(name, self.BUDGET_DEFAULTS[name]))

    @property
    def digest(self) -> str:
        """Hash of the config minus where outputs go."""
        return content_hash({k: v for k, v in self.raw.items() if k != "output_dir"}, 16)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    @classmethod
    def from_dict(cls, d: dict, source: Optional[str] = None) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__ if f not in ("source", "raw")}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown config key", source)
        if not d.get("environments"):
            raise ConfigError("environments", "at least one environment is required", source)
        cfg = cls(**{k: v for k, v in d.items() if k in known}, source=source, raw=json.loads(canonical_json(d)))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        src = self.source
        if not isinstance(self.seed, int):
            raise ConfigError("seed", "must be an integer", src)
        for k, v in self.budgets.items():
            if k not in self.BUDGET_DEFAULTS:
                raise ConfigError(f"budgets.{k}", "unknown budget", src)
            if not isinstance(v, int) or v < 0 or (k in ("episodes", "max_steps") and v < 1):
                raise ConfigError(f"budgets.{k}", "must be a positive integer", src)
        try:
            check_ratios(self.splits)
        except RatioError as e:
            raise ConfigError("splits", str(e), src) from None
        if self.ood_split not in self.splits:
            raise ConfigError("ood_split", f"{self.ood_split!r} is not a split", src)
        if self.surprise_stage not in SURPRISE_STAGES:
            raise ConfigError("surprise_stage", f"must be one of {SURPRISE_STAGES}", src)
        for role in ("actor", "annotator"):
            if role not in self.backends:
                raise ConfigError(f"backends.{role}", "missing backend", src)
        try:
            Thresholds(**self.filter)
        except TypeError as e:
            raise ConfigError("filter", str(e), src) from None
        for i, env in enumerate(self.environments):
            _check_env(env, f"environments[{i}]", self._base, src)

    @property
    def _base(self) -> Path:
        return Path(self.source).parent if self.source else Path(".")


def _check_env(env: dict, key: str, base: Path, src) -> None:
    kind = env.get("env_kind")
    if kind not in ("agent_world", "driving"):
        raise ConfigError(f"{key}.env_kind", "must be agent_world or driving", src)
    if "spec_path" in env and not (base / env["spec_path"]).exists():
        raise ConfigError(f"{key}.spec_path", f"file not found: {env['spec_path']}", src)
    if kind == "driving" and "spec_path" not in env:
        for t in env.get("templates", ()):
            if t not in TEMPLATES:
                raise ConfigError(f"{key}.templates", f"unknown scenario template {t!r}", src)
        if not env.get("templates"):
            raise ConfigError(f"{key}.templates", "list at least one scenario template", src)
    if kind == "agent_world" and "spec_path" not in env and env.get("source") != "reference":
        try:
            WorldConfig.from_json(env.get("world_config", {}))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{key}.world_config", str(e), src) from None


def load_config(path: str, output_dir: Optional[str] = None) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError("config", f"file not found: {path}")
    try:
        d = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"invalid JSON: {e}", path) from None
    if output_dir:
        d["output_dir"] = output_dir
    elif os.environ.get("WORLDQA_OUTPUT_DIR"):
        d["output_dir"] = os.environ["WORLDQA_OUTPUT_DIR"]
    return RunConfig.from_dict(d, str(p))


def env_specs(cfg: RunConfig) -> list[dict]:
    """Every environment the config names, expanded to env specs."""
    specs = []
    for env in cfg.environments:
        if "spec_path" in env:
            specs.append(json.loads((cfg._base / env["spec_path"]).read_text(encoding="utf-8")))
        elif env["env_kind"] == "agent_world" and env.get("source") == "reference":
            specs.append(AgentWorldEnv(reference_world(), reference_task()).spec())
        elif env["env_kind"] == "agent_world":
            wc = WorldConfig.from_json(env.get("world_config", {}))
            for seed in env.get("seeds", [0]):
                specs.append(world_spec(wc, seed))
        else:
            for t in env["templates"]:
                for seed in env.get("seeds", [0]):
                    sc = ScenarioSpec(t, seed, env.get("fidelity", "perfect"), dict(env.get("overrides", {})),
                                      time_limit=float(env.get("time_limit", 30.0)))
                    specs.append({"env_kind": "driving", "scenario": sc.to_json(),
                                  "decision_ticks": int(env.get("decision_ticks", 10))})
    return specs


def world_spec(wc: WorldConfig, seed: int) -> dict:
    state = generate_world(wc, seed)
    task = default_task(state)
    task = type(task)(f"{wc.fidelity}-{seed}", task.goal, task.target, task.description)
    return AgentWorldEnv(state, task).spec()


def load_handlers(ref: str, **kw) -> dict:
    mod, _, fn = ref.partition(":")
    try:
        return getattr(importlib.import_module(mod), fn)(**kw)
    except (ImportError, AttributeError) as e:
        raise ConfigError("handlers", f"cannot load {ref!r}: {e}") from None


def gateways(cfg: RunConfig, ledger: Optional[UsageLedger] = None) -> tuple[Gateway, Gateway]:
    ledger = ledger or UsageLedger()
    handlers = None
    out = []
    for role in ("actor", "annotator"):
        b = cfg.backends[role]
        if b.get("kind", "scripted") == "scripted" and handlers is None:
            handlers = load_handlers(cfg.handlers, **cfg.handler_args)
        try:
            backend = build_backend(b, handlers)
        except (KeyError, ValueError) as e:
            raise ConfigError(f"backends.{role}", str(e), cfg.source) from None
        out.append(Gateway(backend, b.get("model", "scripted"), ledger, parallelism=max(1, cfg.parallelism),
                           name=role))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# stages


def _paths(cfg: RunConfig) -> dict[str, Path]:
    o = cfg.out
    return {"store": o / "store", "templates": o / "templates.json", "samples": o / "samples.jsonl",
            "filtered": o / "filtered.jsonl", "dataset": o / "dataset", "run": o / "run.json"}


def _header(cfg: RunConfig, fmt: str, **extra) -> dict:
    return {"format": fmt, "version": 1, "seed": cfg.seed, "config_digest": cfg.digest, **extra}


def write_samples(path: Path, samples: list[InstructionSample], header: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [canonical_json(header)] + [canonical_json(s.to_json()) for s in samples]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_samples(path: Path) -> list[InstructionSample]:
    if not path.exists():
        raise ConfigError("samples", f"file not found: {path} (run the previous stage first)")
    lines = path.read_text(encoding="utf-8").splitlines()
    return [InstructionSample.from_json(json.loads(ln)) for ln in lines[1:] if ln.strip()]


def stage_collect(cfg: RunConfig, actor: Gateway) -> ExperienceStore:
    root = _paths(cfg)["store"]
    for name in ("episodes.jsonl", "sidecar.jsonl"):   # a collect run starts a fresh store
        if (root / name).exists():
            (root / name).unlink()
    store = ExperienceStore(root)
    specs = env_specs(cfg)
    n = cfg.budget("episodes")
    kw = dict(max_steps=cfg.budget("max_steps"), master_seed=cfg.seed, memory=cfg.budget("memory"))

    def job(i: int) -> list[EpisodeRecord]:
        return collect_one(specs[i % len(specs)], i, actor, cfg.budget("refine_depth"), **kw)

    with ThreadPoolExecutor(max_workers=max(1, cfg.parallelism)) as pool:
        chains = list(pool.map(job, range(n)))
    for chain in chains:
        for rec in chain:
            store.append(rec)
    log.info("collected %d episodes from %d environments", len(store), len(specs))
    return store


def stage_annotate(cfg: RunConfig, annotator: Gateway, store: ExperienceStore) -> list[InstructionSample]:
    paths = _paths(cfg)
    for eid in range(len(store)):
        rec = store.get(eid)
        if not rec.steps:
            continue
        try:
            store.tag_experience(eid, annotator)
        except TaggingFailed as e:
            log.warning("episode %d left untagged: %s", eid, e)
        store.score_episode(eid, annotator)
    pool = bootstrap_templates(load_seed_pool(), annotator, cfg.budget("bootstrap_rounds"),
                               cfg.budget("bootstrap_per_round"), seed=cfg.seed)
    paths["templates"].write_text(json.dumps({"templates": pool.to_json(), **_header(cfg, "worldqa.templates")},
                                             indent=2) + "\n", encoding="utf-8")
    samples = annotate_records(cfg, annotator, store, pool)
    write_samples(paths["samples"], samples, _header(cfg, "worldqa.samples"))
    log.info("annotated %d samples with %d templates", len(samples), len(pool))
    return samples


def annotate_records(cfg: RunConfig, annotator: Gateway, store: ExperienceStore,
                     pool: TemplatePool) -> list[InstructionSample]:
    records = [r for r in store.records() if r.steps]
    direct = [t for t in pool if t.kind not in ("Counterfactual", "PlanComparison")]

    def for_template(t) -> list[InstructionSample]:
        recs = [r for r in records if r.env_kind == t.env_kind]
        return generate_qa(recs, t, annotator, store, seed=cfg.seed, on_missing="skip")

    def for_record(r: EpisodeRecord) -> list[InstructionSample]:
        s = generate_counterfactual(r, annotator, seed=cfg.seed, pool=pool)
        return [s] if s is not None else []

    with ThreadPoolExecutor(max_workers=max(1, cfg.parallelism)) as ex:
        batches = list(ex.map(for_template, direct)) + list(ex.map(for_record, records))
    samples = [s for b in batches for s in b]
    groups: dict[str, list[int]] = {}
    for eid in range(len(store)):
        groups.setdefault(content_hash(store.get(eid).env_spec, 16), []).append(eid)
    for key, eids in sorted(groups.items(), key=lambda kv: kv[1][0]):
        tagged = [e for e in eids if store.tag_of(e)]
        if len(tagged) < 2:
            continue
        spec = store.get(tagged[0]).env_spec
        s = generate_plan_comparison(store.tag_of(tagged[0]), store, annotator, cfg.budget("plan_k"),
                                     filter=lambda r, spec=spec: r.env_spec == spec, seed=cfg.seed, pool=pool)
        if s is not None:
            samples.append(s)
    if cfg.surprise_stage == "before_filter":
        _score(annotator, samples)
    return samples


def _score(annotator: Gateway, samples: list[InstructionSample]) -> None:
    for s in samples:
        score = score_surprise(s.text(), annotator, {"item": s})
        s.surprise, s.surprise_flagged = score.value, score.flagged


def stage_filter(cfg: RunConfig, annotator: Gateway, samples: list[InstructionSample]) -> list[InstructionSample]:
    unique = dedup(samples)
    nf = NoveltyFilter(annotator, Thresholds(**cfg.filter))
    reasons: dict[str, int] = {}
    kept = []
    for s in unique:
        d = nf.admit(s)
        if d.keep:
            kept.append(s)
        else:
            reasons[d.reason] = reasons.get(d.reason, 0) + 1
    if cfg.surprise_stage == "after_filter":
        _score(annotator, kept)
    write_samples(_paths(cfg)["filtered"], kept, _header(cfg, "worldqa.samples"))
    log.info("filter kept %d of %d (%d exact duplicates, dropped %s)", len(kept), len(samples),
             len(samples) - len(unique), reasons or "none")
    return kept


def stage_emit(cfg: RunConfig, samples: list[InstructionSample]):
    manifest = emit_dataset(samples, cfg.splits, cfg.seed, _paths(cfg)["dataset"], config_digest=cfg.digest,
                            ood_split=cfg.ood_split)
    log.info("emitted %d samples: %s", manifest.total, manifest.splits)
    return manifest


def _write_run(cfg: RunConfig, ledger: UsageLedger, **info) -> Path:
    path = _paths(cfg)["run"]
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {**_header(cfg, "worldqa.run"), "usage": ledger.snapshot(), **info}
    path.write_text(json.dumps(body, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_world(args) -> int:
    wc = WorldConfig.from_json(json.loads(Path(args.world_config).read_text())) if args.world_config else None
    if wc is None:
        wc = WorldConfig.perfect() if args.fidelity == "perfect" else WorldConfig.imperfect()
    elif wc.fidelity != args.fidelity:
        raise ConfigError("fidelity", f"--fidelity {args.fidelity} disagrees with the world config")
    spec = world_spec(wc, args.seed)
    out = Path(args.out or f"world-{args.fidelity}-{args.seed}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(spec, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(out)
    return EXIT_OK


def cmd_collect(args) -> int:
    cfg = load_config(args.config, args.out)
    ledger = UsageLedger()
    actor, _ = gateways(cfg, ledger)
    store = stage_collect(cfg, actor)
    run = _write_run(cfg, ledger, episodes=len(store))
    print(store.root)
    print(run)
    return EXIT_OK


def cmd_annotate(args) -> int:
    cfg = load_config(args.config, args.out)
    ledger = UsageLedger()
    _, annotator = gateways(cfg, ledger)
    store = ExperienceStore(_paths(cfg)["store"])
    if not len(store):
        raise ConfigError("store", f"no episodes in {store.root} (run collect first)", cfg.source)
    stage_annotate(cfg, annotator, store)
    print(_paths(cfg)["samples"])
    return EXIT_OK


def cmd_filter(args) -> int:
    cfg = load_config(args.config, args.out)
    _, annotator = gateways(cfg)
    stage_filter(cfg, annotator, read_samples(_paths(cfg)["samples"]))
    print(_paths(cfg)["filtered"])
    return EXIT_OK


def cmd_emit(args) -> int:
    cfg = load_config(args.config, args.out)
    stage_emit(cfg, read_samples(_paths(cfg)["filtered"]))
    print(_paths(cfg)["dataset"] / "manifest.json")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    t0 = time.monotonic()
    cfg = load_config(args.config, args.out)
    ledger = UsageLedger()
    actor, annotator = gateways(cfg, ledger)
    store = stage_collect(cfg, actor)
    samples = stage_annotate(cfg, annotator, store)
    kept = stage_filter(cfg, annotator, samples)
    manifest = stage_emit(cfg, kept)
    run = _write_run(cfg, ledger, episodes=len(store), annotated=len(samples), kept=len(kept),
                     manifest=manifest.to_json(), seconds=round(time.monotonic() - t0, 2))
    paths = _paths(cfg)
    for p in (paths["store"], paths["templates"], paths["samples"], paths["filtered"], paths["dataset"], run):
        print(p)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.out) if args.config else None
    if cfg is not None:
        actor, annotator = gateways(cfg)
    else:
        handlers = load_handlers(DEFAULT_HANDLERS, noise=args.noise)
        actor = Gateway(build_backend({"kind": "scripted", "default": "demo"}, handlers), name="actor")
        annotator = Gateway(build_backend({"kind": "scripted", "default": "answer_key"}, handlers), name="qa")
    report = EvalReport(model=args.model, meta={"repeats": args.repeats, "suite_seed": args.seed,
                                                "backends": [actor.name, annotator.name],
                                                "config_digest": cfg.digest if cfg else None})
    if not args.suite and not args.dataset:
        raise ConfigError("eval", "give --suite and/or --dataset")
    if args.suite:
        suite = load_suite(args.suite)
        report.completion.append(eval_task_completion(
            suite, actor, args.repeats, suite_seed=args.seed, max_steps=args.max_steps,
            parallelism=args.parallelism, suite_name=Path(args.suite).stem))
    if args.dataset:
        report.qa.append(eval_qa(args.dataset, annotator))
    out = Path(args.report)
    if out.is_dir():
        out = out / "report.json"
    emit_report(report, out, "json")
    md = emit_report(report, out.with_suffix(".md"), "markdown")
    print(out)
    print(md)
    return EXIT_OK


def _find_episode(store: ExperienceStore, ident: str) -> EpisodeRecord:
    if ident.isdigit() and int(ident) < len(store):
        return store.get(int(ident))
    try:
        return store.by_uid(ident)
    except KeyError:
        raise ConfigError("episode", f"no episode {ident!r} in {store.root}") from None


def cmd_replay(args) -> int:
    root = Path(args.store) if args.store else _paths(load_config(args.config, args.out))["store"]
    if not (root / "episodes.jsonl").exists():
        raise ConfigError("store", f"no episode log at {root}")
    rec = _find_episode(ExperienceStore(root), args.episode)
    if not replay_matches(rec):
        raise ValidationFailure(f"episode {rec.uid}: replayed event log differs from the stored one")
    print(f"episode {rec.uid}: {len(rec.steps)} steps replay exactly ({rec.outcome})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="worldqa", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=True):
        sp.add_argument("--config", required=required, help="run config (JSON)")
        sp.add_argument("--out", help="override output_dir")
        return sp

    g = sub.add_parser("gen-world", help="generate one Agent World task")
    g.add_argument("--fidelity", choices=("perfect", "imperfect"), default="imperfect")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--world-config", help="WorldConfig JSON")
    g.add_argument("--out", help="output file")
    g.set_defaults(fn=cmd_gen_world)
    for name, fn, text in (("collect", cmd_collect, "run the actor and store episodes"),
                           ("annotate", cmd_annotate, "tag, score and annotate stored episodes"),
                           ("filter", cmd_filter, "dedup and novelty-filter samples"),
                           ("emit", cmd_emit, "write dataset splits and manifest"),
                           ("pipeline", cmd_pipeline, "collect, annotate, filter and emit")):
        with_config(sub.add_parser(name, help=text)).set_defaults(fn=fn)
    e = with_config(sub.add_parser("eval", help="evaluate task completion and QA accuracy"), required=False)
    e.add_argument("--suite", help="task suite JSON")
    e.add_argument("--dataset", help="emitted dataset directory")
    e.add_argument("--repeats", type=int, default=10)
    e.add_argument("--seed", type=int, default=0, help="suite seed")
    e.add_argument("--max-steps", type=int, default=100)
    e.add_argument("--parallelism", type=int, default=4)
    e.add_argument("--noise", type=float, default=0.0, help="demo actor noise when no config is given")
    e.add_argument("--model", default="demo-oracle")
    e.add_argument("--report", default="report.json", help="report path (.json; a .md twin is written next to it)")
    e.set_defaults(fn=cmd_eval)
    r = with_config(sub.add_parser("replay", help="re-simulate a stored episode"), required=False)
    r.add_argument("episode", help="episode id or uid")
    r.add_argument("--store", help="store directory")
    r.set_defaults(fn=cmd_replay)
    return p


class _Formatter(logging.Formatter):
    LEVELS = {"WARNING": "warn", "INFO": "info", "ERROR": "error", "DEBUG": "debug", "CRITICAL": "error"}

    def format(self, record: logging.LogRecord) -> str:
        return f"{self.LEVELS.get(record.levelname, record.levelname.lower())} {record.name}: {record.getMessage()}"


def _setup_logging(verbose: bool) -> None:
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(_Formatter())
    root = logging.getLogger()
    root.handlers[:] = [h]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.fn(args)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except GatewayExhausted as e:
        log.error("gateway exhausted: %s", e)
        return EXIT_GATEWAY
    except (SchemaViolation, RatioError, ValidationFailure, ReplayMismatch, InvalidSuite, EmptyDataset,
            GenerationExhausted) as e:
        log.error("validation failure: %s", e)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
