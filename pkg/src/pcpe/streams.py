"""The two context streams producing candidate-aware query embeddings.

Persona-coded stream: each aggregated persona vector attends over the query
tokens, giving one coded query per persona entry; the candidate embedding
then attends over those coded queries. Code-coded stream: identical
machinery, but the attention anchors are m trainable code vectors instead of
persona vectors; m = 0 disables the stream entirely.

Every output here is a convex combination of its inputs (softmax weights),
which the tests exploit: outputs stay inside the per-coordinate hull of what
went in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .tensor import Tensor


@dataclass
class Codes:
    """m trainable anchor vectors; m = 0 means an empty matrix and no
    code-coded stream."""

    K: Tensor

    @property
    def m(self) -> int:
        return self.K.data.shape[0]

    @classmethod
    def init(cls, m: int, d: int, rng: np.random.Generator) -> "Codes":
        if m < 0:
            raise ConfigError(f"m must be >= 0, got {m}")
        return cls(T.parameter(rng.normal(0.0, 0.02, size=(m, d))))


@dataclass
class StreamOutput:
    """Per-candidate intermediate embeddings of both streams.

    pe_* fields are None exactly when m = 0.
    """

    persona_vecs: Tensor          # [j, d]
    pc_queries: Tensor            # [j, d]
    pe_queries: Tensor | None     # [m, d]
    pc_context: Tensor            # [1, d]
    pe_context: Tensor | None     # [1, d]


def aggregate_persona(entry_embs: Tensor, w_p: Tensor,
                      mask: np.ndarray | None = None) -> Tensor:
    """Content-weighted pooling of one persona entry's element embeddings.

    Weights are a softmax over each element's projection onto w_p, so the
    result is a convex combination of the elements themselves.
    """
    l = entry_embs.data.shape[0]
    bias = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise InputError("aggregate_persona: all elements masked")
        if not mask.all():
            bias = T.mask_bias(mask)[None, :]
    logits = T.transpose(T.matmul(entry_embs, w_p))        # [1, l]
    weights = T.softmax_last(logits, bias=bias)
    return T.matmul(weights, entry_embs)                   # [1, d]


def persona_coded_query(query_embs: Tensor, anchor: Tensor,
                        mask: np.ndarray | None = None) -> Tensor:
    """Attend the query tokens with one anchor vector (a persona vector or a
    trainable code); returns the convex combination of query tokens."""
    bias = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise InputError("persona_coded_query: all query tokens masked")
        if not mask.all():
            bias = T.mask_bias(mask)[None, :]
    logits = T.matmul(anchor, T.transpose(query_embs))     # [1, l]
    weights = T.softmax_last(logits, bias=bias)
    return T.matmul(weights, query_embs)                   # [1, d]


def coded_queries(query_embs: Tensor, anchors: Tensor,
                  mask: np.ndarray | None = None) -> Tensor:
    """All anchors at once: [n, d] anchors -> [n, d] coded queries.

    Row i equals persona_coded_query(query_embs, anchors[i]); batching via
    one matmul keeps per-row arithmetic identical to the one-at-a-time path.
    """
    bias = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise InputError("coded_queries: all query tokens masked")
        if not mask.all():
            bias = T.mask_bias(mask)[None, :]
    logits = T.matmul(anchors, T.transpose(query_embs))    # [n, l]
    weights = T.softmax_last(logits, bias=bias)
    return T.matmul(weights, query_embs)                   # [n, d]


def candidate_aware_context(coded: Tensor, c: Tensor) -> Tensor:
    """Pool the coded queries with attention keyed by the candidate embedding.

    coded is [n, d] (n = persona count for one stream, or m for the other);
    c is [1, d]. n = 0 is the caller's signal to skip the stream.
    """
    if coded.data.shape[0] < 1:
        raise InputError("candidate_aware_context: no coded queries (m=0 path "
                         "must be skipped by the caller)")
    weights = T.softmax_last(T.matmul(c, T.transpose(coded)))   # [1, n]
    return T.matmul(weights, coded)


def context_over_candidates(coded: Tensor, C: Tensor) -> Tensor:
    """candidate_aware_context for every candidate at once: C is [N, d],
    result row i is the context for candidate i."""
    if coded.data.shape[0] < 1:
        raise InputError("context_over_candidates: no coded queries")
    weights = T.softmax_last(T.matmul(C, T.transpose(coded)))   # [N, n]
    return T.matmul(weights, coded)


def run_streams(query_embs: Tensor, persona_entry_embs: list[tuple[Tensor, np.ndarray | None]],
                codes: Codes | None, c: Tensor, w_p: Tensor,
                query_mask: np.ndarray | None = None) -> StreamOutput:
    """Run both streams for one candidate.

    persona_entry_embs pairs each entry's element embeddings with its mask.
    The persona stream is mandatory; the code stream runs only when m > 0.
    """
    if not persona_entry_embs:
        raise ConfigError("run_streams: at least one persona entry required")
    pvecs = T.concat_rows([aggregate_persona(e, w_p, m) for e, m in persona_entry_embs])
    pc_q = coded_queries(query_embs, pvecs, query_mask)
    pc_ctx = candidate_aware_context(pc_q, c)
    pe_q = pe_ctx = None
    if codes is not None and codes.m > 0:
        pe_q = coded_queries(query_embs, codes.K, query_mask)
        pe_ctx = candidate_aware_context(pe_q, c)
    return StreamOutput(persona_vecs=pvecs, pc_queries=pc_q, pe_queries=pe_q,
                        pc_context=pc_ctx, pe_context=pe_ctx)
