"""Shared domain types, pipeline configuration, and seeded randomness."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from enum import Enum

import numpy as np

MAX_SEED = 2**64 - 1

DEFAULT_REFLECTION_STATEMENT = (
    "Do you think the explanation supports the answers? (Yes or No)"
)


class TaskKind(str, Enum):
    FREE_FORM = "free_form"
    CLOSED_SET_BOOLEAN = "closed_set_boolean"
    CLOSED_SET_CHOICE = "closed_set_choice"


class ScoreTerm(str, Enum):
    DRAFT = "draft"
    SELF_CONSISTENCY = "self_consistency"
    SELF_REFLECTION = "self_reflection"


class VerificationContextMode(str, Enum):
    RATIONALE_ONLY = "rationale_only"
    DOCUMENTS_ONLY = "documents_only"
    RATIONALE_AND_DOCUMENTS = "rationale_and_documents"


class SamplingMode(str, Enum):
    MULTI_PERSPECTIVE = "multi_perspective"
    RANDOM_NO_CLUSTER = "random_no_cluster"
    SAME_CLUSTER = "same_cluster"


class SelectionMode(str, Enum):
    ARGMAX = "argmax"
    RANDOM = "random"


ALL_SCORE_TERMS = frozenset(
    {ScoreTerm.DRAFT, ScoreTerm.SELF_CONSISTENCY, ScoreTerm.SELF_REFLECTION}
)


@dataclass(frozen=True)
class Query:
    """A posed task: open question, boolean claim, or multiple choice.

    ``gold_answers`` exists for evaluation only; drafting and verification
    never see it (the pipeline scrubs it before building prompts).
    """

    id: str
    text: str
    task_kind: TaskKind = TaskKind.FREE_FORM
    choices: tuple[tuple[str, str], ...] | None = None
    gold_answers: tuple[str, ...] = ()

    def scrubbed(self) -> "Query":
        """Copy with gold answers removed, safe to hand to prompt builders."""
        if not self.gold_answers:
            return self
        return replace(self, gold_answers=())


@dataclass(frozen=True)
class Document:
    """One retrieved evidence document."""

    id: str
    title: str
    text: str


@dataclass(frozen=True)
class PipelineConfig:
    """All pipeline hyperparameters.

    Defaults follow the standard profile: 5 drafts, 2 clusters, top 10
    documents. ``musique_profile`` gives the multi-hop profile (10, 6, 15).
    """

    num_drafts: int = 5
    num_clusters: int = 2
    top_n: int = 10
    reflection_statement: str = DEFAULT_REFLECTION_STATEMENT
    verification_context_mode: VerificationContextMode = (
        VerificationContextMode.RATIONALE_ONLY
    )
    score_terms: frozenset[ScoreTerm] = ALL_SCORE_TERMS
    sampling_mode: SamplingMode = SamplingMode.MULTI_PERSPECTIVE
    selection_mode: SelectionMode = SelectionMode.ARGMAX
    length_normalize_logprobs: bool = False
    rng_seed: int = 0
    # Defaults target a local mock server (`draftrag mock-serve --port 8080`).
    drafter_endpoints: tuple[str, ...] = ("http://127.0.0.1:8080/generate",)
    verifier_endpoint: str = "http://127.0.0.1:8080/generate"
    embedding_endpoint: str = "http://127.0.0.1:8080/embed"
    request_timeout_ms: int = 30_000

    @classmethod
    def musique_profile(cls, **overrides) -> "PipelineConfig":
        base = dict(num_drafts=10, num_clusters=6, top_n=15)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = dict(raw)
        if "verification_context_mode" in kwargs:
            kwargs["verification_context_mode"] = VerificationContextMode(
                kwargs["verification_context_mode"]
            )
        if "score_terms" in kwargs:
            kwargs["score_terms"] = frozenset(
                ScoreTerm(t) for t in kwargs["score_terms"]
            )
        if "sampling_mode" in kwargs:
            kwargs["sampling_mode"] = SamplingMode(kwargs["sampling_mode"])
        if "selection_mode" in kwargs:
            kwargs["selection_mode"] = SelectionMode(kwargs["selection_mode"])
        if "drafter_endpoints" in kwargs:
            kwargs["drafter_endpoints"] = tuple(kwargs["drafter_endpoints"])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "num_drafts": self.num_drafts,
            "num_clusters": self.num_clusters,
            "top_n": self.top_n,
            "reflection_statement": self.reflection_statement,
            "verification_context_mode": self.verification_context_mode.value,
            "score_terms": sorted(t.value for t in self.score_terms),
            "sampling_mode": self.sampling_mode.value,
            "selection_mode": self.selection_mode.value,
            "length_normalize_logprobs": self.length_normalize_logprobs,
            "rng_seed": self.rng_seed,
            "drafter_endpoints": list(self.drafter_endpoints),
            "verifier_endpoint": self.verifier_endpoint,
            "embedding_endpoint": self.embedding_endpoint,
            "request_timeout_ms": self.request_timeout_ms,
        }


class ConfigError(Exception):
    """Raised when a config file cannot even be parsed into a PipelineConfig."""


class DataError(Exception):
    """Malformed or inconsistent data (bad embeddings, unresolvable doc ids)."""


class PipelineError(Exception):
    """A pipeline stage failed in a way that invalidates the whole run."""


def validate_config(cfg: PipelineConfig) -> list[str]:
    """Return every invariant violation; an empty list means the config is valid.

    Validation reports, it never raises.
    """
    violations: list[str] = []
    if cfg.num_drafts < 1:
        violations.append("num_drafts must be ≥ 1")
    if cfg.num_clusters < 1:
        violations.append("num_clusters must be ≥ 1")
    if cfg.top_n < 1:
        violations.append("top_n must be ≥ 1")
    if cfg.num_clusters > cfg.top_n:
        violations.append(
            f"num_clusters must satisfy k ≤ n "
            f"(got k={cfg.num_clusters}, n={cfg.top_n})"
        )
    if not cfg.reflection_statement:
        violations.append("reflection_statement must be non-empty")
    if not cfg.drafter_endpoints:
        violations.append("drafter_endpoints must be non-empty")
    if not cfg.verifier_endpoint:
        violations.append("verifier_endpoint must be set")
    if not cfg.embedding_endpoint:
        violations.append("embedding_endpoint must be set")
    if cfg.request_timeout_ms < 1:
        violations.append("request_timeout_ms must be positive")
    if not (0 <= cfg.rng_seed <= MAX_SEED):
        violations.append("rng_seed must be an unsigned 64-bit integer")
    return violations


@dataclass
class StageTimings:
    """Wall-clock milliseconds per pipeline stage. Excluded from determinism."""

    embed_ms: float = 0.0
    cluster_ms: float = 0.0
    sample_ms: float = 0.0
    draft_ms: float = 0.0
    verify_ms: float = 0.0
    total_ms: float = 0.0

    def to_dict(self) -> dict:
        return {
            "embed_ms": self.embed_ms,
            "cluster_ms": self.cluster_ms,
            "sample_ms": self.sample_ms,
            "draft_ms": self.draft_ms,
            "verify_ms": self.verify_ms,
            "total_ms": self.total_ms,
        }


# All randomness flows through PCG64 streams built here. PCG64 streams are
# frozen by numpy's reproducibility policy, so identical seeds give identical
# draws across platforms and runs.


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic random stream for an unsigned 64-bit seed."""
    if not (0 <= seed <= MAX_SEED):
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def derive_rng(seed: int, *labels: str) -> np.random.Generator:
    """Independent substream keyed by (seed, labels).

    Substreams let stages (clustering, sampling, selection) draw independently
    so adding draws to one stage never perturbs another.
    """
    entropy = [seed]
    for label in labels:
        digest = hashlib.sha256(label.encode("utf-8")).digest()
        entropy.append(int.from_bytes(digest[:8], "big"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
