"""Grounded instruction-data generation from recorded episodes."""
from worldqa.annotator.bootstrap import bootstrap_templates
from worldqa.annotator.classes import REGISTRY, Grounded, QuestionClass, ReplayMismatch
from worldqa.annotator.generate import (
    generate_counterfactual, generate_plan_comparison, generate_qa, verify_against_sim,
)
from worldqa.annotator.novelty import Decision, NoveltyFilter, Thresholds, filter_novelty
from worldqa.annotator.samples import (
    KINDS, SCALES, InstructionSample, SeedTemplate, SlotResolutionFailure, TemplatePool, load_seed_pool,
)
