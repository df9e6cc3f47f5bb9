"""BM25 lexical retrieval over triple and relation surface text.

Used in two places: linking a free-form relation surface emitted by the
language model to a canonical KB relation, and pulling the observation
triples most related to a sub-question before triple generation.

Scoring uses the non-negative idf variant ``log((N - df + 0.5)/(df + 0.5) + 1)``
so tiny corpora cannot produce negative scores. Query tokens contribute with
multiplicity.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field

from .kb import KnowledgeBase, RelationId

_CAMEL_BOUNDARY = re.compile(r"(?<=[a-z0-9])(?=[A-Z])")
_NON_ALNUM = re.compile(r"[^0-9a-zA-Z]+")


class RelationLinkError(Exception):
    """No KB relation matches the given surface."""


def tokenize(text: str) -> list[str]:
    """Lowercase tokens split on whitespace/punctuation, with camelCase and
    snake_case boundaries split apart."""
    text = _CAMEL_BOUNDARY.sub(" ", text)
    return [tok for tok in _NON_ALNUM.split(text.lower()) if tok]


@dataclass
class Document:
    doc_id: object
    text: str
    tokens: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.tokens:
            self.tokens = tokenize(self.text)


class Bm25Index:
    """Immutable BM25 index; build once, query concurrently."""

    def __init__(self, docs, k1: float = 1.2, b: float = 0.75):
        if k1 <= 0:
            raise ValueError("k1 must be positive")
        if not 0.0 <= b <= 1.0:
            raise ValueError("b must be in [0, 1]")
        self.k1 = k1
        self.b = b
        self.docs: list[Document] = list(docs)
        self.term_freqs = [Counter(d.tokens) for d in self.docs]
        self.doc_lens = [len(d.tokens) for d in self.docs]
        n = len(self.docs)
        self.avgdl = (sum(self.doc_lens) / n) if n else 0.0
        df = Counter()
        for tf in self.term_freqs:
            for term in tf:
                df[term] += 1
        self.idf = {
            term: math.log((n - count + 0.5) / (count + 0.5) + 1.0)
            for term, count in df.items()
        }

    def score(self, query: str, i: int) -> float:
        """BM25 score of document ``i`` against ``query``."""
        tf = self.term_freqs[i]
        dl = self.doc_lens[i]
        norm = self.k1 * (1.0 - self.b + self.b * dl / self.avgdl) if self.avgdl else 0.0
        total = 0.0
        for term in tokenize(query):
            f = tf.get(term, 0)
            if not f:
                continue
            total += self.idf[term] * f * (self.k1 + 1.0) / (f + norm)
        return total


def build_index(docs, k1: float = 1.2, b: float = 0.75) -> Bm25Index:
    return Bm25Index(docs, k1=k1, b=b)


def top_k(index: Bm25Index, query: str, k: int):
    """Best ``k`` documents: descending score, ties by doc_id ascending,
    zero-score documents excluded."""
    if k < 0:
        raise ValueError("k must be >= 0")
    scored = []
    for i, doc in enumerate(index.docs):
        s = index.score(query, i)
        if s > 0.0:
            scored.append((doc.doc_id, s))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:k]


def link_relation(kb: KnowledgeBase, surface: str) -> RelationId:
    """Map a relation surface to a KB relation id.

    An exact label match (case-insensitive) wins without scoring; otherwise
    the top BM25 hit over label + description text. No hit at all raises
    :class:`RelationLinkError` and the caller decides the fallback.
    """
    exact = kb.lookup_relation_label(surface)
    if exact:
        return exact[0]
    docs = [
        Document(doc_id=rid, text=f"{rec.label} {rec.description}")
        for rid, rec in sorted(kb.relations.items())
    ]
    hits = top_k(build_index(docs), surface, 1)
    if not hits:
        raise RelationLinkError(f"no KB relation matches surface {surface!r}")
    return hits[0][0]


def retrieve_related_triples(observations, sub_question: str, k: int):
    """Rank prior observation triples against a sub-question.

    ``observations`` is a sequence of objects with ``head``/``relation``/``tail``
    surface strings; each is rendered as one document. Returns the top-k
    triples (positive scores only), preserving nothing beyond BM25 order.
    """
    triples = list(observations)
    if not triples:
        return []
    docs = [
        Document(doc_id=i, text=f"{t.head} {t.relation} {t.tail}")
        for i, t in enumerate(triples)
    ]
    hits = top_k(build_index(docs), sub_question, k)
    return [triples[i] for i, _ in hits]
