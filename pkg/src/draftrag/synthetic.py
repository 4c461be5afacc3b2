"""Rigged synthetic fixtures: datasets paired with mock scripts.

The generator replays the pipeline's deterministic stages (mock embeddings,
clustering, subset sampling) for a given config, so it knows exactly which
draft prompts the pipeline will issue. It scripts those prompts so that
every subset containing the record's gold document yields a gold-bearing
draft with strictly higher logprobs on all three score terms, while the
remaining subsets yield wrong answers with much lower ones. Argmax selection
must then recover the gold answer on every record; random selection must
not.
"""

from __future__ import annotations

from dataclasses import dataclass

from .clustering import EmbeddingVector, embedding_input, kmeans_cluster, sample_subsets
from .core import Document, PipelineConfig, Query, derive_rng
from .drafting import DraftCandidate, build_draft_prompt, parse_draft
from .harness import DatasetRecord
from .mock_server import MockScript, embed_vector, uniform_tokens
from .verification import ReflectionStatement, build_verify_prompt

GOLD_TOKEN_LOGPROB = -0.05
WRONG_TOKEN_LOGPROB = -2.5
GOLD_ECHO_LOGPROB = -0.02
WRONG_ECHO_LOGPROB = -1.0

_MAX_SALT_TRIES = 500


@dataclass
class RiggedFixture:
    records: list[DatasetRecord]
    script: MockScript
    config: PipelineConfig


def _gold_answer(i: int) -> str:
    return f"Zephyrine-{i}"


def _wrong_answer(i: int) -> str:
    return f"Morvale-{i}"


def _build_record(i: int, salt: int, distractors: int) -> DatasetRecord:
    gold, wrong = _gold_answer(i), _wrong_answer(i)
    docs = [
        Document(
            id=f"q{i}-d0",
            title=f"Charting Register {i}",
            text=(
                f"The register of expedition {i} confirms the charted "
                f"location is {gold}. Entry {salt}."
            ),
        )
    ]
    for j in range(1, distractors + 1):
        docs.append(
            Document(
                id=f"q{i}-d{j}",
                title=f"Disputed Atlas {i}-{j}",
                text=(
                    f"A disputed atlas claims the charted location is {wrong}. "
                    f"Annotation {i}-{j} revision {salt}."
                ),
            )
        )
    query = Query(
        id=f"rigged-{i:03d}",
        text=f"What is the charted location recorded by expedition {i}?",
        gold_answers=(gold,),
    )
    return DatasetRecord(query=query, documents=tuple(docs))


def _replay_sampling(record: DatasetRecord, cfg: PipelineConfig, embed_dims: int):
    """Mirror the pipeline's embed, cluster, and sample stages exactly."""
    query = record.query.scrubbed()
    docs = list(record.documents[: cfg.top_n])
    vectors = [
        EmbeddingVector(
            tuple(embed_vector(query.text, embedding_input(d), embed_dims))
        ).normalized()
        for d in docs
    ]
    k = min(cfg.num_clusters, len(docs))
    clusters = kmeans_cluster(
        [d.id for d in docs], vectors, k, derive_rng(cfg.rng_seed, "kmeans", query.id)
    )
    return sample_subsets(
        clusters,
        cfg.num_drafts,
        cfg.sampling_mode,
        derive_rng(cfg.rng_seed, "sampling", query.id),
    )


def _script_record(
    script: MockScript, record: DatasetRecord, plan, cfg: PipelineConfig
) -> None:
    query = record.query.scrubbed()
    docs_by_id = {d.id: d for d in record.documents}
    gold_id = record.documents[0].id
    i = int(record.query.id.rsplit("-", 1)[1])
    reflection = ReflectionStatement(text=cfg.reflection_statement)

    for subset in plan.subsets:
        has_gold = gold_id in subset.member_doc_ids
        answer_name = _gold_answer(i) if has_gold else _wrong_answer(i)
        source = "register" if has_gold else "atlas"
        rationale = f"The {source} states that the charted location is {answer_name}."
        answer = f"The charted location is {answer_name}."
        completion = f"## Rationale: {rationale}\n## Response: {answer}"
        token_lp = GOLD_TOKEN_LOGPROB if has_gold else WRONG_TOKEN_LOGPROB

        prompt = build_draft_prompt(query, subset, docs_by_id)
        script.script_completion(prompt, completion, uniform_tokens(completion, token_lp))

        parsed = parse_draft(completion)
        candidate = DraftCandidate(
            subset_index=subset.subset_index,
            subset_doc_ids=subset.member_doc_ids,
            raw_completion=completion,
            rationale=parsed.rationale,
            answer=parsed.answer,
            rationale_span=parsed.rationale_span,
            answer_span=parsed.answer_span,
            completion_tokens=(),
            rho_draft_log=0.0,
        )
        verify_prompt = build_verify_prompt(
            query, candidate, docs_by_id, cfg.verification_context_mode, reflection
        )
        echo_lp = GOLD_ECHO_LOGPROB if has_gold else WRONG_ECHO_LOGPROB
        script.script_echo(
            verify_prompt.text, uniform_tokens(verify_prompt.text, echo_lp)
        )


def make_rigged_fixture(
    cfg: PipelineConfig,
    num_records: int = 20,
    distractors: int = 3,
    require_contrast: bool = True,
) -> RiggedFixture:
    """Build a dataset plus mock script rigged for the given config.

    With ``require_contrast`` each record is salted until the sampled
    subsets include at least one subset with the gold document and one
    without, so argmax and random selection can disagree; without it a
    record only needs at least one gold-bearing subset.
    """
    script = MockScript()
    records: list[DatasetRecord] = []
    for i in range(num_records):
        for salt in range(_MAX_SALT_TRIES):
            record = _build_record(i, salt, distractors)
            plan = _replay_sampling(record, cfg, script.embed_dims)
            gold_id = record.documents[0].id
            with_gold = [s for s in plan.subsets if gold_id in s.member_doc_ids]
            without_gold = [s for s in plan.subsets if gold_id not in s.member_doc_ids]
            if with_gold and (without_gold or not require_contrast):
                _script_record(script, record, plan, cfg)
                records.append(record)
                break
        else:
            raise RuntimeError(
                f"could not rig record {i} within {_MAX_SALT_TRIES} salts"
            )
    return RiggedFixture(records=records, script=script, config=cfg)
