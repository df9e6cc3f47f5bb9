"""Trainable triple completer behind a uniform interface.

Two realizations share the same surface (pretrain / predict / score_triple /
incremental_finetune):

* ``NativeCompleter`` — a bilinear model over entity and relation embeddings,
  score(h, r, t) = dot(e_h * w_r, e_t), trained with softmax cross-entropy
  over all entities. Small, deterministic, CPU-only, fully in process.
* ``RemoteCompleter`` — delegates to an external completion service (for
  example a text-generation model) over a JSON request/response channel and
  filters decoded texts through the KB label catalog, so predictions can
  never name an entity the KB does not know.

Incremental fine-tuning mixes the new triples with a uniform sample from the
replay memory (the original training pool) to keep earlier knowledge from
washing out.
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass

import numpy as np
import requests

from .kb import (
    EntityId,
    KnowledgeBase,
    RelationId,
    Triple,
    UnknownEntityError,
    UnknownRelationError,
)

logger = logging.getLogger(__name__)

SEP_TOKEN = "⟨SEP⟩"  # ⟨SEP⟩

_DIRECTIVES = {"tail": "predict tail", "head": "predict head", "relation": "predict relation"}


class ModelStateError(Exception):
    """Operation requires a trained model."""


class TrainingError(Exception):
    """Training produced a non-finite loss."""


class CompleterTransportError(Exception):
    """The remote completion service could not be reached or answered badly."""


@dataclass(frozen=True)
class CompletionQuery:
    """A triple with exactly one unknown slot."""

    mode: str  # tail | head | relation
    h: EntityId | None = None
    r: RelationId | None = None
    t: EntityId | None = None

    def __post_init__(self):
        expected_absent = {"tail": "t", "head": "h", "relation": "r"}
        if self.mode not in expected_absent:
            raise ValueError(f"unknown query mode {self.mode!r}")
        for slot in ("h", "r", "t"):
            value = getattr(self, slot)
            if slot == expected_absent[self.mode]:
                if value is not None:
                    raise ValueError(f"{self.mode} query must leave {slot!r} unset")
            elif value is None:
                raise ValueError(f"{self.mode} query requires {slot!r}")

    @classmethod
    def tail_query(cls, h: EntityId, r: RelationId) -> "CompletionQuery":
        return cls(mode="tail", h=h, r=r)

    @classmethod
    def head_query(cls, r: RelationId, t: EntityId) -> "CompletionQuery":
        return cls(mode="head", r=r, t=t)

    @classmethod
    def relation_query(cls, h: EntityId, t: EntityId) -> "CompletionQuery":
        return cls(mode="relation", h=h, t=t)


@dataclass(frozen=True)
class InputSequence:
    text: str


@dataclass(frozen=True)
class RankedPrediction:
    entity: str  # entity id, or relation id for relation-mode queries
    score: float


@dataclass
class TrainingConfig:
    epochs: int = 30
    learning_rate: float = 0.01
    batch_size: int = 64
    seed: int = 0
    # sweeps over the combined new+replay sample during one fine-tune call
    finetune_passes: int = 10
    # anti-forgetting budget checked by the evaluation suite (relative MRR loss)
    forgetting_tolerance: float = 0.10


class ReplayMemory:
    """Uniform sampler over the original training triples."""

    def __init__(self, pool, seed: int = 0):
        self.pool: list[Triple] = sorted(set(pool))
        self._rng = random.Random(seed)

    def __len__(self) -> int:
        return len(self.pool)

    def sample(self, n: int) -> list[Triple]:
        """Draw ``n`` distinct triples uniformly (the whole pool if smaller)."""
        if n >= len(self.pool):
            return list(self.pool)
        return self._rng.sample(self.pool, n)


def render_context_triple(kb: KnowledgeBase, t: Triple) -> str:
    return (
        f"⟨ {kb.label_of(t.head)} | {kb.relation_label(t.relation)}"
        f" | {kb.label_of(t.tail)} ⟩"
    )


def build_input_sequence(kb: KnowledgeBase, query: CompletionQuery, max_context: int = 20) -> InputSequence:
    """Assemble the completer's textual input for a query.

    Layout: a directive line naming the known slots, the anchor entity's
    description in brackets, the query relation, then co-occurrence-ranked
    context triples joined by the separator token. The anchor is the known
    entity (head for tail queries, tail for head queries).
    """
    directive = _DIRECTIVES[query.mode]
    if query.mode == "tail":
        anchor, rel = query.h, query.r
        known = f"{kb.label_of(anchor)} | {kb.relation_label(rel)}"
    elif query.mode == "head":
        anchor, rel = query.t, query.r
        known = f"{kb.label_of(anchor)} | {kb.relation_label(rel)}"
    else:
        anchor, rel = query.h, None
        known = f"{kb.label_of(query.h)} | {kb.label_of(query.t)}"

    record = kb.entity(anchor)
    lines = [
        f"{directive}: {known}",
        f"entity description: {record.label} [{record.description}]",
    ]
    if rel is not None:
        lines.append(f"related relationship: {kb.relation_label(rel)}")
        context = kb.select_context(anchor, rel, max_context)
    else:
        # relation queries have no relation to rank by; take the neighbor
        # order, minus direct h-t edges whose relation is the unknown
        context = [
            n for n in kb.neighbors(anchor)
            if not ({n.head, n.tail} == {query.h, query.t})
        ][:max_context]
    rendered = f" {SEP_TOKEN} ".join(render_context_triple(kb, t) for t in context)
    lines.append(f"context: {rendered}" if rendered else "context:")
    return InputSequence(text="\n".join(lines))


class NativeCompleter:
    """Bilinear embedding completer trained with softmax cross-entropy.

    Embeddings start uniform in [-1/sqrt(d), 1/sqrt(d)] and are updated with
    plain SGD. All randomness flows through one generator seeded at
    construction, so identical call sequences give bit-identical models.
    """

    def __init__(self, kb: KnowledgeBase, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.entity_ids: list[EntityId] = sorted(kb.entities)
        self.relation_ids: list[RelationId] = sorted(kb.relations)
        self._ent_index = {e: i for i, e in enumerate(self.entity_ids)}
        self._rel_index = {r: i for i, r in enumerate(self.relation_ids)}
        self._rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(dim)
        self.entity_vecs = self._rng.uniform(-bound, bound, (len(self.entity_ids), dim))
        self.relation_vecs = self._rng.uniform(-bound, bound, (len(self.relation_ids), dim))
        self.trained = False
        self.loss_history: list[float] = []

    # -- vocabulary -------------------------------------------------------

    def _eidx(self, e: EntityId) -> int:
        try:
            return self._ent_index[e]
        except KeyError:
            raise UnknownEntityError(f"entity {e!r} not in completer vocabulary") from None

    def _ridx(self, r: RelationId) -> int:
        try:
            return self._rel_index[r]
        except KeyError:
            raise UnknownRelationError(f"relation {r!r} not in completer vocabulary") from None

    def register_symbols(self, entities=(), relations=()) -> None:
        """Add fresh embedding rows for unseen entity/relation ids."""
        bound = 1.0 / math.sqrt(self.dim)
        new_e = sorted(e for e in set(entities) if e not in self._ent_index)
        new_r = sorted(r for r in set(relations) if r not in self._rel_index)
        if new_e:
            rows = self._rng.uniform(-bound, bound, (len(new_e), self.dim))
            self.entity_vecs = np.vstack([self.entity_vecs, rows])
            for e in new_e:
                self._ent_index[e] = len(self.entity_ids)
                self.entity_ids.append(e)
        if new_r:
            rows = self._rng.uniform(-bound, bound, (len(new_r), self.dim))
            self.relation_vecs = np.vstack([self.relation_vecs, rows])
            for r in new_r:
                self._rel_index[r] = len(self.relation_ids)
                self.relation_ids.append(r)

    # -- training ---------------------------------------------------------

    def _encode(self, triples) -> np.ndarray:
        return np.array(
            [(self._eidx(t.head), self._ridx(t.relation), self._eidx(t.tail)) for t in triples],
            dtype=np.int64,
        )

    def _step(self, batch: np.ndarray, lr: float) -> float:
        """One SGD step on softmax cross-entropy over all entities as tails.

        The objective is summed (not averaged) over the batch, so the update
        scale per example is independent of batch size; the returned loss is
        the per-example mean, for monitoring.
        """
        h, r, t = batch[:, 0], batch[:, 1], batch[:, 2]
        eh = self.entity_vecs[h]
        wr = self.relation_vecs[r]
        u = eh * wr                                   # (B, d)
        logits = u @ self.entity_vecs.T               # (B, |E|)
        logits -= logits.max(axis=1, keepdims=True)
        exp = np.exp(logits)
        probs = exp / exp.sum(axis=1, keepdims=True)
        n = len(batch)
        loss = -np.mean(np.log(probs[np.arange(n), t] + 1e-12))
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss on batch of size {n}")

        dlogits = probs
        dlogits[np.arange(n), t] -= 1.0
        du = dlogits @ self.entity_vecs               # (B, d)
        grad_e = dlogits.T @ u                        # candidate side, (|E|, d)
        np.add.at(grad_e, h, du * wr)
        grad_w = np.zeros_like(self.relation_vecs)
        np.add.at(grad_w, r, du * eh)
        self.entity_vecs -= lr * grad_e
        self.relation_vecs -= lr * grad_w
        return float(loss)

    def _run_passes(self, encoded: np.ndarray, config: TrainingConfig, n_passes: int) -> list[float]:
        losses = []
        for _ in range(n_passes):
            order = self._rng.permutation(len(encoded))
            epoch_losses = []
            for start in range(0, len(encoded), config.batch_size):
                batch = encoded[order[start:start + config.batch_size]]
                epoch_losses.append(self._step(batch, config.learning_rate))
            losses.append(float(np.mean(epoch_losses)))
        return losses

    def pretrain(self, train_triples, kb: KnowledgeBase, config: TrainingConfig | None = None) -> "NativeCompleter":
        config = config or TrainingConfig()
        triples = sorted(set(train_triples))
        if not triples:
            raise ValueError("pretraining needs a non-empty triple set")
        encoded = self._encode(triples)
        self.loss_history = self._run_passes(encoded, config, config.epochs)
        self.trained = True
        logger.info(
            "pretrained on %d triples: loss %.4f -> %.4f",
            len(triples), self.loss_history[0], self.loss_history[-1],
        )
        return self

    def incremental_finetune(
        self,
        path_triples,
        memory: ReplayMemory,
        samples_per_triple: int = 10,
        kb: KnowledgeBase | None = None,
        config: TrainingConfig | None = None,
    ) -> "NativeCompleter":
        """Fine-tune on new triples mixed with a replay sample.

        Draws ``samples_per_triple`` replay triples per new triple, registers
        any unseen symbols, then runs ``config.finetune_passes`` minibatch
        sweeps over the combined sample. Empty input is a no-op and leaves the
        model bit-identical.
        """
        path_triples = list(path_triples)
        if not path_triples:
            return self
        if not self.trained:
            raise ModelStateError("incremental fine-tuning requires a pretrained model")
        config = config or TrainingConfig()
        self.register_symbols(
            entities=[e for t in path_triples for e in (t.head, t.tail)],
            relations=[t.relation for t in path_triples],
        )
        replay = memory.sample(len(path_triples) * samples_per_triple)
        combined = self._encode(path_triples + replay)
        self._run_passes(combined, config, config.finetune_passes)
        return self

    # -- inference ----------------------------------------------------------

    def _require_trained(self):
        if not self.trained:
            raise ModelStateError("model has not been trained")

    def _query_scores(self, query: CompletionQuery) -> tuple[list[str], np.ndarray]:
        if query.mode == "tail":
            u = self.entity_vecs[self._eidx(query.h)] * self.relation_vecs[self._ridx(query.r)]
            return self.entity_ids, self.entity_vecs @ u
        if query.mode == "head":
            u = self.relation_vecs[self._ridx(query.r)] * self.entity_vecs[self._eidx(query.t)]
            return self.entity_ids, self.entity_vecs @ u
        u = self.entity_vecs[self._eidx(query.h)] * self.entity_vecs[self._eidx(query.t)]
        return self.relation_ids, self.relation_vecs @ u

    def predict(self, query: CompletionQuery, kb: KnowledgeBase, k: int) -> list[RankedPrediction]:
        """Top-k candidates, descending score, ties by id ascending."""
        self._require_trained()
        if k < 1:
            raise ValueError("k must be >= 1")
        ids, scores = self._query_scores(query)
        order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
        return [RankedPrediction(ids[i], float(scores[i])) for i in order[:k]]

    def score_triple(self, t: Triple, kb: KnowledgeBase | None = None) -> float:
        self._require_trained()
        u = self.entity_vecs[self._eidx(t.head)] * self.relation_vecs[self._ridx(t.relation)]
        return float(u @ self.entity_vecs[self._eidx(t.tail)])

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        np.savez(
            path,
            entity_ids=np.array(self.entity_ids, dtype=object),
            relation_ids=np.array(self.relation_ids, dtype=object),
            entity_vecs=self.entity_vecs,
            relation_vecs=self.relation_vecs,
            trained=np.array([self.trained]),
            rng_state=np.array([json.dumps(self._rng.bit_generator.state, default=int)], dtype=object),
        )

    @classmethod
    def load(cls, path) -> "NativeCompleter":
        data = np.load(path, allow_pickle=True)
        model = cls.__new__(cls)
        model.entity_ids = [str(e) for e in data["entity_ids"]]
        model.relation_ids = [str(r) for r in data["relation_ids"]]
        model._ent_index = {e: i for i, e in enumerate(model.entity_ids)}
        model._rel_index = {r: i for i, r in enumerate(model.relation_ids)}
        model.entity_vecs = data["entity_vecs"]
        model.relation_vecs = data["relation_vecs"]
        model.dim = model.entity_vecs.shape[1]
        model.trained = bool(data["trained"][0])
        model.loss_history = []
        model._rng = np.random.default_rng()
        model._rng.bit_generator.state = json.loads(str(data["rng_state"][0]))
        return model


def _http_transport(endpoint: str, timeout: float):
    def post(path: str, payload: dict) -> dict:
        url = f"{endpoint.rstrip('/')}/{path}"
        try:
            resp = requests.post(url, json=payload, timeout=timeout)
            resp.raise_for_status()
            return resp.json()
        except requests.RequestException as exc:
            raise CompleterTransportError(f"completion service request to {url} failed: {exc}") from exc
    return post


class RemoteCompleter:
    """Completion model served out of process.

    The wire contract is JSON over POST:

    * ``complete``: ``{"sequence": str, "num_samples": int, "temperature": float}``
      -> ``{"samples": [{"text": str, "logprob": float}, ...]}``
    * ``pretrain``: ``{"triples": [[h, r, t], ...]}`` -> ``{"status": "completed"}``
      (labels, not ids; blocks until done)
    * ``finetune``: ``{"triples": [[h, r, t], ...], "replay": [[h, r, t], ...]}``
      -> ``{"status": "completed"}``

    Decoded sample texts are looked up in the KB label catalog; texts that do
    not name a KB entity are dropped, and an entity decoded more than once
    keeps its best log-probability. Entities never decoded are treated as
    minus infinity and never appear in predictions.
    """

    def __init__(
        self,
        endpoint: str = "",
        r_samples: int = 500,
        temperature: float = 1.0,
        max_context: int = 20,
        timeout: float = 60.0,
        transport=None,
    ):
        if transport is None and not endpoint:
            raise ValueError("remote completer needs an endpoint or a transport")
        self.endpoint = endpoint
        self.r_samples = r_samples
        self.temperature = temperature
        self.max_context = max_context
        self._post = transport or _http_transport(endpoint, timeout)
        self.trained = True  # service owns training state

    def _decode(self, query: CompletionQuery, kb: KnowledgeBase) -> dict[EntityId, float]:
        sequence = build_input_sequence(kb, query, self.max_context)
        reply = self._post(
            "complete",
            {
                "sequence": sequence.text,
                "num_samples": self.r_samples,
                "temperature": self.temperature,
            },
        )
        try:
            samples = reply["samples"]
        except (TypeError, KeyError):
            raise CompleterTransportError(f"malformed completion response: {reply!r}") from None
        best: dict[EntityId, float] = {}
        for sample in samples:
            ids = kb.lookup_label(str(sample["text"]))
            logprob = float(sample["logprob"])
            for eid in ids:
                if eid not in best or logprob > best[eid]:
                    best[eid] = logprob
        return best

    def predict(self, query: CompletionQuery, kb: KnowledgeBase, k: int) -> list[RankedPrediction]:
        if k < 1:
            raise ValueError("k must be >= 1")
        best = self._decode(query, kb)
        ranked = sorted(best.items(), key=lambda pair: (-pair[1], pair[0]))
        return [RankedPrediction(eid, score) for eid, score in ranked[:k]]

    def score_triple(self, t: Triple, kb: KnowledgeBase | None = None) -> float:
        if kb is None:
            raise ValueError("remote score_triple needs the KB for label rendering")
        best = self._decode(CompletionQuery.tail_query(t.head, t.relation), kb)
        return best.get(t.tail, float("-inf"))

    def pretrain(self, train_triples, kb: KnowledgeBase, config: TrainingConfig | None = None) -> "RemoteCompleter":
        payload = {
            "triples": [
                [kb.label_of(t.head), kb.relation_label(t.relation), kb.label_of(t.tail)]
                for t in sorted(set(train_triples))
            ]
        }
        reply = self._post("pretrain", payload)
        if reply.get("status") != "completed":
            raise CompleterTransportError(f"pretraining did not complete: {reply!r}")
        return self

    def incremental_finetune(
        self,
        path_triples,
        memory: ReplayMemory,
        samples_per_triple: int = 10,
        kb: KnowledgeBase | None = None,
        config: TrainingConfig | None = None,
    ) -> "RemoteCompleter":
        path_triples = list(path_triples)
        if not path_triples:
            return self
        if kb is None:
            raise ValueError("remote fine-tuning needs the KB for label rendering")
        replay = memory.sample(len(path_triples) * samples_per_triple)

        def rows(triples):
            return [
                [kb.label_of(t.head), kb.relation_label(t.relation), kb.label_of(t.tail)]
                for t in triples
            ]

        reply = self._post("finetune", {"triples": rows(path_triples), "replay": rows(replay)})
        if reply.get("status") != "completed":
            raise CompleterTransportError(f"fine-tuning did not complete: {reply!r}")
        return self
