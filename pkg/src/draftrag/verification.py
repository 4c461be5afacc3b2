"""Verifier-side scoring: one echo pass per draft, score combination, selection.

The verifier never generates text. For each draft we build a prompt laying
out the question, the answer, its supporting context, a reflection statement,
and the literal affirmation "Yes", then ask the verifier endpoint for the
log-probabilities of the prompt's own tokens (echo scoring). The
self-consistency score aggregates the answer/context spans; the
self-reflection score aggregates the trailing affirmation.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .backend import EndpointDescriptor, MalformedResponseError, TransportError, dispatch
from .core import (
    DEFAULT_REFLECTION_STATEMENT,
    Document,
    PipelineError,
    Query,
    ScoreTerm,
    SelectionMode,
    VerificationContextMode,
)
from .drafting import (
    DraftCandidate,
    Span,
    evidence_block,
    instruction_text,
    parse_token_payload,
    resolve_docs,
    sequence_logprob,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReflectionStatement:
    """The statement prompting the verifier to affirm or reject a draft."""

    text: str = DEFAULT_REFLECTION_STATEMENT
    expected_affirmation: str = "Yes"

    def __post_init__(self):
        if not self.text:
            raise ValueError("reflection statement must be non-empty")


@dataclass(frozen=True)
class VerifyPrompt:
    """Assembled verifier prompt plus the byte spans to score.

    ``consistency_spans`` cover the answer and its context (rationale,
    documents, or both, depending on the mode); ``affirmation_span`` covers
    the trailing affirmation token(s).
    """

    text: str
    consistency_spans: tuple[Span, ...]
    affirmation_span: Span


@dataclass(frozen=True)
class VerificationResult:
    subset_index: int
    rho_sc_log: float
    rho_sr_log: float
    rho_final_log: float
    dropped: bool = False
    drop_reason: str | None = None


class _PromptBuilder:
    """Accumulates prompt pieces while tracking byte offsets."""

    def __init__(self):
        self._parts: list[str] = []
        self._cursor = 0

    def add(self, piece: str) -> Span:
        start = self._cursor
        self._parts.append(piece)
        self._cursor += len(piece.encode("utf-8"))
        return Span(start, self._cursor)

    @property
    def text(self) -> str:
        return "".join(self._parts)


def build_verify_prompt(
    query: Query,
    candidate: DraftCandidate,
    docs_by_id: Mapping[str, Document],
    mode: VerificationContextMode,
    reflection: ReflectionStatement,
) -> VerifyPrompt:
    """Lay out [question, answer, context, reflection, "Yes"] with known spans.

    Labeled section markers keep the span boundaries unambiguous. The
    context is the draft's rationale by default; the documents-only mode
    swaps in the subset's evidence block, and the combined mode includes
    both (answer, then evidence, then rationale).
    """
    b = _PromptBuilder()
    b.add(f"## Instruction: {instruction_text(query)}\n")
    b.add("## Response: ")
    answer_span = b.add(candidate.answer)
    spans = [answer_span]

    if mode in (
        VerificationContextMode.DOCUMENTS_ONLY,
        VerificationContextMode.RATIONALE_AND_DOCUMENTS,
    ):
        docs = resolve_docs(candidate.subset_doc_ids, docs_by_id)
        b.add("\n## Evidence: \n")
        spans.append(b.add(evidence_block(docs)))
    if mode in (
        VerificationContextMode.RATIONALE_ONLY,
        VerificationContextMode.RATIONALE_AND_DOCUMENTS,
    ):
        b.add("\n## Rationale: ")
        spans.append(b.add(candidate.rationale))

    b.add(f"\n{reflection.text}\n")
    affirmation_span = b.add(reflection.expected_affirmation)
    return VerifyPrompt(
        text=b.text,
        consistency_spans=tuple(spans),
        affirmation_span=affirmation_span,
    )


def score_candidate(
    prompt: VerifyPrompt,
    endpoint: EndpointDescriptor,
    timeout_ms: int,
    normalize: bool = False,
) -> tuple[float, float]:
    """Echo-score one prompt: returns (self-consistency, self-reflection) logs.

    Exactly one verifier request is issued per call.
    """
    body = dispatch(
        endpoint,
        {
            "prompt": prompt.text,
            "max_tokens": 0,
            "temperature": 0,
            "logprobs": True,
            "echo": True,
        },
        timeout_ms,
    )
    tokens = parse_token_payload(body.get("tokens"), endpoint.url)
    rho_sc = sum(
        sequence_logprob(tokens, span, normalize) for span in prompt.consistency_spans
    )
    rho_sr = sequence_logprob(tokens, prompt.affirmation_span, normalize)
    return float(rho_sc), float(rho_sr)


def combine_scores(
    rho_draft_log: float,
    rho_sc_log: float,
    rho_sr_log: float,
    score_terms: frozenset[ScoreTerm],
) -> float:
    """Product of the enabled score terms, computed as a sum of logs.

    Disabling terms reproduces the scoring ablations (a disabled term acts
    as probability 1).
    """
    total = 0.0
    if ScoreTerm.DRAFT in score_terms:
        total += rho_draft_log
    if ScoreTerm.SELF_CONSISTENCY in score_terms:
        total += rho_sc_log
    if ScoreTerm.SELF_REFLECTION in score_terms:
        total += rho_sr_log
    return total


def select_best(
    scored: Sequence[tuple[int, float]],
    selection_mode: SelectionMode,
    rng: np.random.Generator,
) -> int:
    """Pick the winning subset index.

    argmax takes the highest final score, ties broken by the lowest subset
    index; random picks uniformly (the no-verification ablation).
    """
    if not scored:
        raise PipelineError("no surviving candidates to select from")
    if selection_mode is SelectionMode.RANDOM:
        return scored[int(rng.integers(len(scored)))][0]
    return min(scored, key=lambda item: (-item[1], item[0]))[0]


def verify_candidates(
    query: Query,
    candidates: Sequence[DraftCandidate],
    docs_by_id: Mapping[str, Document],
    mode: VerificationContextMode,
    reflection: ReflectionStatement,
    endpoint: EndpointDescriptor,
    timeout_ms: int,
    score_terms: frozenset[ScoreTerm],
    normalize: bool = False,
) -> list[VerificationResult]:
    """Score every candidate, one echo request each, up to m in flight.

    When neither verifier-side term is enabled no requests are issued and
    the final score reduces to the enabled drafter term. Endpoint failures
    mark the affected candidate dropped instead of failing the batch.
    """
    needs_verifier = bool(
        score_terms & {ScoreTerm.SELF_CONSISTENCY, ScoreTerm.SELF_REFLECTION}
    )
    if not needs_verifier:
        return [
            VerificationResult(
                subset_index=c.subset_index,
                rho_sc_log=0.0,
                rho_sr_log=0.0,
                rho_final_log=combine_scores(c.rho_draft_log, 0.0, 0.0, score_terms),
            )
            for c in candidates
        ]

    def one(candidate: DraftCandidate) -> VerificationResult:
        prompt = build_verify_prompt(query, candidate, docs_by_id, mode, reflection)
        rho_sc, rho_sr = score_candidate(prompt, endpoint, timeout_ms, normalize)
        return VerificationResult(
            subset_index=candidate.subset_index,
            rho_sc_log=rho_sc,
            rho_sr_log=rho_sr,
            rho_final_log=combine_scores(
                candidate.rho_draft_log, rho_sc, rho_sr, score_terms
            ),
        )

    results: list[VerificationResult] = []
    with ThreadPoolExecutor(max_workers=max(1, len(candidates))) as pool:
        futures = [pool.submit(one, c) for c in candidates]
        for candidate, future in zip(candidates, futures):
            try:
                results.append(future.result())
            except (TransportError, MalformedResponseError) as exc:
                logger.warning(
                    "verification for subset %d dropped: %s",
                    candidate.subset_index,
                    exc,
                )
                results.append(
                    VerificationResult(
                        subset_index=candidate.subset_index,
                        rho_sc_log=0.0,
                        rho_sr_log=0.0,
                        rho_final_log=float("-inf"),
                        dropped=True,
                        drop_reason=str(exc),
                    )
                )
    results.sort(key=lambda r: r.subset_index)
    return results
