"""Link-prediction and question-answering metrics, plus efficiency counters
pulled from trajectory logs."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

from .kb import normalize_label

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class KbcEvalResult:
    mrr: float
    hits_at: dict
    n_queries: int

    def to_dict(self) -> dict:
        return {
            "mrr": self.mrr,
            "hits_at": {str(k): v for k, v in sorted(self.hits_at.items())},
            "n_queries": self.n_queries,
        }


@dataclass(frozen=True)
class KbqaEvalResult:
    hits_at_1: float
    avg_llm_calls: float
    avg_seconds: float
    n_questions: int

    def to_dict(self) -> dict:
        return {
            "hits_at_1": self.hits_at_1,
            "avg_llm_calls": self.avg_llm_calls,
            "avg_seconds": self.avg_seconds,
            "n_questions": self.n_questions,
        }


def _rank_of(ranking, gold) -> int:
    """1-based rank of gold in the ranking, 0 when absent."""
    for i, entity in enumerate(ranking, start=1):
        if entity == gold:
            return i
    return 0


def mrr(rankings, gold) -> float:
    """Mean reciprocal rank; an absent gold contributes 0."""
    rankings = list(rankings)
    gold = list(gold)
    if not rankings or len(rankings) != len(gold):
        raise ValueError("need one non-empty ranking per gold entity")
    total = 0.0
    for ranking, g in zip(rankings, gold):
        rank = _rank_of(ranking, g)
        if rank:
            total += 1.0 / rank
    return total / len(rankings)


def hits_at_k(rankings, gold, k: int) -> float:
    """Fraction of queries whose gold entity appears in the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rankings = list(rankings)
    gold = list(gold)
    if not rankings or len(rankings) != len(gold):
        raise ValueError("need one non-empty ranking per gold entity")
    hits = sum(1 for ranking, g in zip(rankings, gold) if 0 < _rank_of(ranking, g) <= k)
    return hits / len(rankings)


def kbc_eval(rankings, gold, ks=(1, 3, 10)) -> KbcEvalResult:
    return KbcEvalResult(
        mrr=mrr(rankings, gold),
        hits_at={k: hits_at_k(rankings, gold, k) for k in ks},
        n_queries=len(list(rankings)),
    )


def kbqa_hits_at_1(final_answers, gold) -> float:
    """A question scores 1 when any returned answer matches any gold answer
    after normalization."""
    final_answers = list(final_answers)
    gold = list(gold)
    if not final_answers or len(final_answers) != len(gold):
        raise ValueError("need one answer list per gold set")
    score = 0
    for answers, gold_set in zip(final_answers, gold):
        gold_keys = {normalize_label(g) for g in gold_set}
        if any(normalize_label(a) in gold_keys for a in answers):
            score += 1
    return score / len(final_answers)


def efficiency_report(trajectory_log) -> dict:
    """Average model calls and wall seconds per question from a JSONL
    trajectory log. Corrupt records are skipped and counted."""
    calls, seconds, skipped = [], [], 0
    with open(trajectory_log, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                calls.append(float(record["llm_call_count"]))
                seconds.append(float(record.get("wall_time_s", 0.0)))
            except (ValueError, KeyError, TypeError):
                skipped += 1
    if skipped:
        logger.warning("efficiency report skipped %d corrupt records", skipped)
    if not calls:
        raise ValueError(f"no usable trajectory records in {trajectory_log}")
    return {
        "avg_llm_calls": sum(calls) / len(calls),
        "avg_seconds": sum(seconds) / len(seconds),
        "n_questions": len(calls),
        "n_skipped": skipped,
    }
