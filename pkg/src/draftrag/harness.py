"""Dataset ingestion, the end-to-end pipeline, evaluation, and experiments.

Two pipeline modes share one evaluation judge:

- ``run_speculative``: embed, cluster, sample subsets, draft in parallel,
  echo-score each draft with the verifier, select the best answer;
- ``run_standard_baseline``: one generation call over all top-n documents,
  no verification (the latency/accuracy reference point).

Records are processed one at a time so per-stage wall-clock timings reflect
single-case latency rather than batching effects.
"""

from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .backend import EndpointDescriptor, EndpointRole, TransportError, dispatch
from .clustering import embed_documents, kmeans_cluster, sample_subsets
from .core import (
    DataError,
    Document,
    PipelineConfig,
    PipelineError,
    Query,
    ScoreTerm,
    SelectionMode,
    StageTimings,
    TaskKind,
    derive_rng,
)
from .drafting import (
    DraftBatch,
    evidence_block,
    generate_drafts,
    instruction_text,
    parse_token_payload,
)
from .verification import (
    ReflectionStatement,
    select_best,
    verify_candidates,
)

logger = logging.getLogger(__name__)

STANDARD_PROMPT_HEADER = (
    "Below is an instruction that describes a task. "
    "Write a response that appropriately completes the request. "
)


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class DatasetRecord:
    """One pre-retrieved dataset entry: the query plus ranked documents."""

    query: Query
    documents: tuple[Document, ...]


@dataclass
class PipelineResult:
    """Outcome of one pipeline run over a single record."""

    query_id: str
    mode: str
    final_answer: str
    winning_subset_index: int
    candidates: list[dict]
    timings: StageTimings
    notices: list[str] = field(default_factory=list)

    def to_dict(self, include_timings: bool = True) -> dict:
        out = {
            "query_id": self.query_id,
            "mode": self.mode,
            "final_answer": self.final_answer,
            "winning_subset_index": self.winning_subset_index,
            "candidates": self.candidates,
            "notices": self.notices,
        }
        if include_timings:
            out["timings"] = self.timings.to_dict()
        return out


@dataclass
class EvalSummary:
    """Aggregate accuracy and latency for one experiment configuration."""

    name: str
    mode: str
    accuracy: float
    evaluated: int
    correct: int
    failures: int
    per_record: list[dict]
    latency: dict
    config: dict

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "mode": self.mode,
            "accuracy": self.accuracy,
            "evaluated": self.evaluated,
            "correct": self.correct,
            "failures": self.failures,
            "per_record": self.per_record,
            "latency": self.latency,
            "config": self.config,
        }


@dataclass
class PipelineBackends:
    drafters: list[EndpointDescriptor]
    verifier: EndpointDescriptor
    embedder: EndpointDescriptor


def make_backends(cfg: PipelineConfig) -> PipelineBackends:
    return PipelineBackends(
        drafters=[
            EndpointDescriptor(url, EndpointRole.DRAFTER)
            for url in cfg.drafter_endpoints
        ],
        verifier=EndpointDescriptor(cfg.verifier_endpoint, EndpointRole.VERIFIER),
        embedder=EndpointDescriptor(cfg.embedding_endpoint, EndpointRole.EMBEDDER),
    )


# ---------------------------------------------------------------------------
# Dataset loading


_TASK_KINDS = {k.value for k in TaskKind}


def _parse_record(obj: dict, line_no: int) -> DatasetRecord:
    def fail(msg: str) -> DatasetError:
        return DatasetError(f"line {line_no}: {msg}")

    if not isinstance(obj, dict):
        raise fail("record is not a JSON object")
    qid = obj.get("id")
    if not isinstance(qid, str) or not qid:
        raise fail('missing or empty "id"')
    question = obj.get("question")
    if not isinstance(question, str) or not question:
        raise fail('missing or empty "question"')
    kind_raw = obj.get("task_kind", TaskKind.FREE_FORM.value)
    if kind_raw not in _TASK_KINDS:
        raise fail(f'unknown task_kind "{kind_raw}"')
    kind = TaskKind(kind_raw)

    choices_raw = obj.get("choices")
    if kind is TaskKind.CLOSED_SET_CHOICE:
        if not choices_raw:
            raise fail("closed_set_choice record requires choices")
        try:
            choices = tuple((str(lbl), str(txt)) for lbl, txt in choices_raw)
        except (TypeError, ValueError):
            raise fail("choices must be (label, text) pairs")
    elif choices_raw:
        raise fail("choices are only allowed for closed_set_choice records")
    else:
        choices = None

    answers = obj.get("answers")
    if not isinstance(answers, list):
        raise fail('missing "answers" list')

    docs_raw = obj.get("documents")
    if not isinstance(docs_raw, list):
        raise fail('missing "documents" list')
    docs: list[Document] = []
    seen_ids: set[str] = set()
    for j, d in enumerate(docs_raw):
        if not isinstance(d, dict):
            raise fail(f"document {j} is not an object")
        did = d.get("id")
        text = d.get("text")
        if not isinstance(did, str) or not did:
            raise fail(f"document {j} missing id")
        if did in seen_ids:
            raise fail(f'duplicate document id "{did}"')
        if not isinstance(text, str) or not text:
            raise fail(f'document "{did}" has empty text')
        seen_ids.add(did)
        docs.append(Document(id=did, title=str(d.get("title", "")), text=text))

    return DatasetRecord(
        query=Query(
            id=qid,
            text=question,
            task_kind=kind,
            choices=choices,
            gold_answers=tuple(str(a) for a in answers),
        ),
        documents=tuple(docs),
    )


def load_dataset(path: str | Path) -> list[DatasetRecord]:
    """Load a line-delimited JSON dataset, validating every record.

    Errors carry the offending line number; duplicate query ids are
    rejected. An empty file loads as an empty list with a warning.
    """
    path = Path(path)
    records: list[DatasetRecord] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {line_no}: invalid JSON ({exc.msg})")
            record = _parse_record(obj, line_no)
            qid = record.query.id
            if qid in seen:
                raise DatasetError(
                    f'line {line_no}: duplicate query id "{qid}" (first seen on '
                    f"line {seen[qid]})"
                )
            seen[qid] = line_no
            records.append(record)
    if not records:
        logger.warning("dataset %s is empty", path)
    return records


def write_dataset(records: Sequence[DatasetRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {
                "id": rec.query.id,
                "question": rec.query.text,
                "task_kind": rec.query.task_kind.value,
                "answers": list(rec.query.gold_answers),
                "documents": [
                    {"id": d.id, "title": d.title, "text": d.text}
                    for d in rec.documents
                ],
            }
            if rec.query.choices is not None:
                obj["choices"] = [list(pair) for pair in rec.query.choices]
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Pipeline


class _StageClock:
    def __init__(self):
        self.timings = StageTimings()
        self._t0 = time.perf_counter()

    def stage(self, name: str):
        return _StageTimer(self.timings, name)

    def finish(self) -> StageTimings:
        self.timings.total_ms = (time.perf_counter() - self._t0) * 1000.0
        return self.timings


class _StageTimer:
    def __init__(self, timings: StageTimings, name: str):
        self._timings = timings
        self._name = name

    def __enter__(self):
        self._start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = (time.perf_counter() - self._start) * 1000.0
        setattr(self._timings, f"{self._name}_ms", elapsed)
        if exc is not None and not isinstance(exc, PipelineError):
            raise PipelineError(f"{self._name} stage failed: {exc}") from exc
        return False


def _candidate_rows(batch: DraftBatch, verifications) -> list[dict]:
    by_index = {v.subset_index: v for v in (verifications or [])}
    rows = []
    for c in batch.candidates:
        v = by_index.get(c.subset_index)
        rows.append(
            {
                "subset_index": c.subset_index,
                "member_doc_ids": list(c.subset_doc_ids),
                "answer": c.answer,
                "rationale": c.rationale,
                "rho_draft_log": c.rho_draft_log,
                "rho_sc_log": v.rho_sc_log if v and not v.dropped else None,
                "rho_sr_log": v.rho_sr_log if v and not v.dropped else None,
                "rho_final_log": v.rho_final_log if v and not v.dropped else None,
                "dropped": bool(v.dropped) if v else False,
                "drop_reason": v.drop_reason if v else None,
            }
        )
    for d in batch.dropped:
        rows.append(
            {
                "subset_index": d.subset_index,
                "member_doc_ids": None,
                "answer": None,
                "rationale": None,
                "rho_draft_log": None,
                "rho_sc_log": None,
                "rho_sr_log": None,
                "rho_final_log": None,
                "dropped": True,
                "drop_reason": d.reason,
            }
        )
    rows.sort(key=lambda r: r["subset_index"])
    return rows


def run_speculative(
    record: DatasetRecord, cfg: PipelineConfig, backends: PipelineBackends
) -> PipelineResult:
    """Full draft-then-verify pipeline over one record.

    Deterministic (modulo timings) given the config seed and mock backends.
    Gold answers are scrubbed from the query before any prompt is built.
    """
    query = record.query.scrubbed()
    notices: list[str] = []
    docs = list(record.documents[: cfg.top_n])
    if len(record.documents) < cfg.top_n:
        notices.append(
            f"short retrieval: {len(record.documents)} documents < top_n {cfg.top_n}"
        )
    if not docs:
        raise PipelineError(f"record {query.id} has no documents")
    docs_by_id = {d.id: d for d in docs}

    clock = _StageClock()
    with clock.stage("embed"):
        vectors = embed_documents(
            docs, query, backends.embedder, cfg.request_timeout_ms
        )

    k = cfg.num_clusters
    if k > len(docs):
        notices.append(f"num_clusters clamped from {k} to {len(docs)}")
        k = len(docs)
    with clock.stage("cluster"):
        clusters = kmeans_cluster(
            [d.id for d in docs],
            vectors,
            k,
            derive_rng(cfg.rng_seed, "kmeans", query.id),
        )

    with clock.stage("sample"):
        plan = sample_subsets(
            clusters,
            cfg.num_drafts,
            cfg.sampling_mode,
            derive_rng(cfg.rng_seed, "sampling", query.id),
        )
    notices.extend(plan.notices)

    with clock.stage("draft"):
        batch = generate_drafts(
            query,
            plan.subsets,
            docs_by_id,
            backends.drafters,
            cfg.request_timeout_ms,
            normalize=cfg.length_normalize_logprobs,
        )
    for d in batch.dropped:
        notices.append(f"draft {d.subset_index} dropped: {d.reason}")

    verifications = None
    if cfg.selection_mode is SelectionMode.RANDOM:
        # The no-verification ablation: skip the verifier entirely.
        scored = [(c.subset_index, 0.0) for c in batch.candidates]
    else:
        with clock.stage("verify"):
            verifications = verify_candidates(
                query,
                batch.candidates,
                docs_by_id,
                cfg.verification_context_mode,
                ReflectionStatement(text=cfg.reflection_statement),
                backends.verifier,
                cfg.request_timeout_ms,
                cfg.score_terms,
                normalize=cfg.length_normalize_logprobs,
            )
        for v in verifications:
            if v.dropped:
                notices.append(
                    f"verification {v.subset_index} dropped: {v.drop_reason}"
                )
        scored = [
            (v.subset_index, v.rho_final_log) for v in verifications if not v.dropped
        ]

    winner = select_best(
        scored, cfg.selection_mode, derive_rng(cfg.rng_seed, "selection", query.id)
    )
    final_answer = next(
        c.answer for c in batch.candidates if c.subset_index == winner
    )

    return PipelineResult(
        query_id=query.id,
        mode="speculative",
        final_answer=final_answer,
        winning_subset_index=winner,
        candidates=_candidate_rows(batch, verifications),
        timings=clock.finish(),
        notices=notices,
    )


def build_standard_prompt(query: Query, docs: Sequence[Document]) -> str:
    """Single-call baseline prompt: all retrieved documents in rank order."""
    blocks = "\n\n".join(
        f"[{i}] {doc.title}\n{doc.text}" for i, doc in enumerate(docs, 1)
    )
    return (
        f"{STANDARD_PROMPT_HEADER}\n"
        f"\n"
        f"### Evidence:\n"
        f"{blocks}\n"
        f"\n"
        f"### Instruction: {instruction_text(query)}\n"
        f"\n"
        f"### Response:"
    )


def run_standard_baseline(
    record: DatasetRecord, cfg: PipelineConfig, backends: PipelineBackends
) -> PipelineResult:
    """One generation call over all top-n documents, no verification."""
    query = record.query.scrubbed()
    notices: list[str] = []
    docs = list(record.documents[: cfg.top_n])
    if len(record.documents) < cfg.top_n:
        notices.append(
            f"short retrieval: {len(record.documents)} documents < top_n {cfg.top_n}"
        )
    if not docs:
        raise PipelineError(f"record {query.id} has no documents")

    clock = _StageClock()
    with clock.stage("draft"):
        prompt = build_standard_prompt(query, docs)
        body = dispatch(
            backends.verifier,
            {
                "prompt": prompt,
                "max_tokens": 512,
                "temperature": 0,
                "logprobs": True,
            },
            cfg.request_timeout_ms,
        )
        text = body.get("text")
        if not isinstance(text, str):
            raise TransportError(
                backends.verifier.url, 'response lacks a "text" field'
            )
        parse_token_payload(body.get("tokens", []), backends.verifier.url)

    answer = text.strip()
    return PipelineResult(
        query_id=query.id,
        mode="standard",
        final_answer=answer,
        winning_subset_index=0,
        candidates=[
            {
                "subset_index": 0,
                "member_doc_ids": [d.id for d in docs],
                "answer": answer,
                "rationale": None,
                "rho_draft_log": None,
                "rho_sc_log": None,
                "rho_sr_log": None,
                "rho_final_log": None,
                "dropped": False,
                "drop_reason": None,
            }
        ],
        timings=clock.finish(),
        notices=notices,
    )


# ---------------------------------------------------------------------------
# Evaluation


def _normalize(text: str) -> str:
    return " ".join(text.casefold().split())


_TRUE_WORDS = ("true", "yes")
_FALSE_WORDS = ("false", "no")


def _first_standalone(text: str, words: Sequence[str]) -> tuple[int, str] | None:
    best: tuple[int, str] | None = None
    for word in words:
        match = re.search(rf"(?<!\w){re.escape(word)}(?!\w)", text, re.IGNORECASE)
        if match and (best is None or match.start() < best[0]):
            best = (match.start(), word)
    return best


def extract_boolean_verdict(text: str) -> str | None:
    """First standalone true/yes or false/no word, mapped to true/false."""
    hit = _first_standalone(text, _TRUE_WORDS + _FALSE_WORDS)
    if hit is None:
        return None
    return "true" if hit[1] in _TRUE_WORDS else "false"


def extract_choice_label(text: str, labels: Sequence[str]) -> str | None:
    """Earliest standalone occurrence of any choice label, case-insensitive."""
    earliest: tuple[int, str] | None = None
    for label in labels:
        match = re.search(rf"(?<!\w){re.escape(label)}(?!\w)", text, re.IGNORECASE)
        if match and (earliest is None or match.start() < earliest[0]):
            earliest = (match.start(), label)
    return earliest[1] if earliest else None


def evaluate_answer(prediction: str, query: Query) -> bool:
    """Shared judge for both pipeline modes.

    Free-form answers count when any gold answer is contained in the
    prediction after casefolding and whitespace collapsing. Closed-set
    answers are extracted from the prediction and matched exactly.
    """
    gold = [g for g in query.gold_answers if g.strip()]
    if not gold:
        return False
    if query.task_kind is TaskKind.FREE_FORM:
        pred = _normalize(prediction)
        return any(_normalize(g) in pred for g in gold)
    if query.task_kind is TaskKind.CLOSED_SET_BOOLEAN:
        verdict = extract_boolean_verdict(prediction)
        gold_verdicts = {extract_boolean_verdict(g) for g in gold}
        return verdict is not None and verdict in gold_verdicts
    labels = [label for label, _ in (query.choices or ())]
    picked = extract_choice_label(prediction, labels)
    return picked is not None and any(
        picked.casefold() == g.strip().casefold() for g in gold
    )


# ---------------------------------------------------------------------------
# Experiments


def latency_stats(timings: Sequence[StageTimings]) -> dict:
    stages = ["embed_ms", "cluster_ms", "sample_ms", "draft_ms", "verify_ms", "total_ms"]
    out: dict[str, dict[str, float]] = {}
    for stage in stages:
        values = np.array([getattr(t, stage) for t in timings], dtype=np.float64)
        if values.size == 0:
            out[stage] = {"mean": 0.0, "p50": 0.0, "p95": 0.0}
        else:
            out[stage] = {
                "mean": float(values.mean()),
                "p50": float(np.percentile(values, 50)),
                "p95": float(np.percentile(values, 95)),
            }
    return out


_RUNNERS: dict[str, Callable] = {
    "speculative": run_speculative,
    "standard": run_standard_baseline,
}


def run_experiment(
    records: Sequence[DatasetRecord],
    cfg: PipelineConfig,
    mode: str = "speculative",
    backends: PipelineBackends | None = None,
    name: str | None = None,
    out_dir: str | Path | None = None,
) -> EvalSummary:
    """Run every record under one mode, sequentially (no batching).

    Per-record failures are recorded and excluded from accuracy rather than
    aborting the experiment. With ``out_dir`` set, writes
    ``{name}.results.jsonl``, ``{name}.summary.json``, and
    ``{name}.config.json``.
    """
    if mode not in _RUNNERS:
        raise ValueError(f"unknown mode {mode!r}; expected speculative or standard")
    runner = _RUNNERS[mode]
    backends = backends or make_backends(cfg)
    name = name or mode

    results: list[PipelineResult] = []
    per_record: list[dict] = []
    correct = 0
    failures = 0
    for record in records:
        try:
            result = runner(record, cfg, backends)
        except (PipelineError, TransportError, DataError) as exc:
            failures += 1
            per_record.append(
                {"query_id": record.query.id, "correct": None, "error": str(exc)}
            )
            logger.warning("record %s failed: %s", record.query.id, exc)
            continue
        ok = evaluate_answer(result.final_answer, record.query)
        correct += int(ok)
        per_record.append(
            {
                "query_id": record.query.id,
                "correct": ok,
                "final_answer": result.final_answer,
            }
        )
        results.append(result)

    evaluated = len(results)
    summary = EvalSummary(
        name=name,
        mode=mode,
        accuracy=correct / evaluated if evaluated else 0.0,
        evaluated=evaluated,
        correct=correct,
        failures=failures,
        per_record=per_record,
        latency=latency_stats([r.timings for r in results]),
        config=cfg.to_dict(),
    )
    if out_dir is not None:
        write_experiment(Path(out_dir), name, summary, results)
    return summary


def write_experiment(
    out_dir: Path, name: str, summary: EvalSummary, results: Sequence[PipelineResult]
) -> dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "results": out_dir / f"{name}.results.jsonl",
        "summary": out_dir / f"{name}.summary.json",
        "config": out_dir / f"{name}.config.json",
    }
    with open(paths["results"], "w", encoding="utf-8") as fh:
        for result in results:
            fh.write(json.dumps(result.to_dict(), sort_keys=True) + "\n")
    paths["summary"].write_text(
        json.dumps(summary.to_dict(), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    paths["config"].write_text(
        json.dumps(summary.config, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return paths


def ablation_grid(cfg: PipelineConfig) -> list[tuple[str, PipelineConfig]]:
    """Named config variants: sampling strategies, score-term removals,
    random selection, and verification-context modes."""
    from .core import SamplingMode, VerificationContextMode

    all_terms = cfg.score_terms
    return [
        ("baseline", cfg),
        (
            "sampling_random_no_cluster",
            replace(cfg, sampling_mode=SamplingMode.RANDOM_NO_CLUSTER),
        ),
        (
            "sampling_same_cluster",
            replace(cfg, sampling_mode=SamplingMode.SAME_CLUSTER),
        ),
        (
            "score_wo_draft",
            replace(cfg, score_terms=frozenset(all_terms - {ScoreTerm.DRAFT})),
        ),
        (
            "score_wo_self_consistency",
            replace(
                cfg, score_terms=frozenset(all_terms - {ScoreTerm.SELF_CONSISTENCY})
            ),
        ),
        (
            "score_wo_self_reflection",
            replace(
                cfg, score_terms=frozenset(all_terms - {ScoreTerm.SELF_REFLECTION})
            ),
        ),
        ("selection_random", replace(cfg, selection_mode=SelectionMode.RANDOM)),
        (
            "context_documents_only",
            replace(
                cfg,
                verification_context_mode=VerificationContextMode.DOCUMENTS_ONLY,
            ),
        ),
        (
            "context_rationale_and_documents",
            replace(
                cfg,
                verification_context_mode=(
                    VerificationContextMode.RATIONALE_AND_DOCUMENTS
                ),
            ),
        ),
    ]


def run_ablations(
    records: Sequence[DatasetRecord],
    cfg: PipelineConfig,
    backends: PipelineBackends | None = None,
    variants: Sequence[str] | None = None,
    out_dir: str | Path | None = None,
) -> list[EvalSummary]:
    grid = ablation_grid(cfg)
    if variants is not None:
        known = {name for name, _ in grid}
        unknown = sorted(set(variants) - known)
        if unknown:
            raise ValueError(f"unknown ablation variants: {', '.join(unknown)}")
        grid = [(name, c) for name, c in grid if name in set(variants)]
    return [
        run_experiment(
            records,
            variant_cfg,
            mode="speculative",
            backends=backends,
            name=name,
            out_dir=out_dir,
        )
        for name, variant_cfg in grid
    ]


def run_sweep(
    records: Sequence[DatasetRecord],
    cfg: PipelineConfig,
    backends: PipelineBackends | None = None,
    m_values: Sequence[int] = (),
    subset_sizes: Sequence[int] = (),
    out_dir: str | Path | None = None,
) -> list[EvalSummary]:
    """Draft-count and subset-size sweeps (one summary per grid point)."""
    summaries = []
    for m in m_values:
        summaries.append(
            run_experiment(
                records,
                replace(cfg, num_drafts=m),
                backends=backends,
                name=f"m_{m}",
                out_dir=out_dir,
            )
        )
    for size in subset_sizes:
        summaries.append(
            run_experiment(
                records,
                replace(cfg, num_clusters=size),
                backends=backends,
                name=f"subset_{size}",
                out_dir=out_dir,
            )
        )
    return summaries


def report_latency(by_mode: Mapping[str, Sequence[StageTimings]]) -> str:
    """Human-readable latency table: mean/p50/p95 per stage for each mode.

    With both a speculative and a standard column present, the last line
    reports the speculative total as a signed percentage of the standard
    total.
    """
    if not by_mode or all(len(v) == 0 for v in by_mode.values()):
        raise ValueError("report_latency requires at least one result")
    stats = {mode: latency_stats(t) for mode, t in by_mode.items() if len(t) > 0}
    modes = list(stats)
    stages = ["embed_ms", "cluster_ms", "sample_ms", "draft_ms", "verify_ms", "total_ms"]

    header = f"{'stage':<12}" + "".join(
        f"{mode + ' mean':>18}{'p50':>12}{'p95':>12}" for mode in modes
    )
    lines = [header]
    for stage in stages:
        row = f"{stage:<12}"
        for mode in modes:
            s = stats[mode][stage]
            row += f"{s['mean']:>18.2f}{s['p50']:>12.2f}{s['p95']:>12.2f}"
        lines.append(row)

    if "speculative" in stats and "standard" in stats:
        spec = stats["speculative"]["total_ms"]["mean"]
        std = stats["standard"]["total_ms"]["mean"]
        if std > 0:
            diff = (spec - std) / std * 100.0
            lines.append(f"total mean, speculative vs standard: {diff:+.1f}%")
    return "\n".join(lines)
