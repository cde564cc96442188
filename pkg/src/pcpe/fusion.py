"""Post-fusion of the two streams, candidate scoring, training and ranking.

Fusion strategies over the per-candidate stream outputs:

- "s-attn": a trainable projection gates the two stream outputs, weights
  softmax(w_f . pc, w_f . pe); output is their convex combination.
- "m-attn": same combination, but the gate is keyed by the candidate
  embedding: softmax(c . pc, c . pe).
- "col-fuse": no fused vector at all; the stacked coded queries meet the
  candidate's word embeddings in a similarity matrix, the per-row maxima
  are summed, and that sum IS the ranking score.

Ranking scores for the attention fusions are sigmoid(q_ctxt . c); training
always consumes the pre-sigmoid logits (col-fuse: the raw maxsim sum) with
in-batch softmax cross-entropy, target = each row's own true response.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import corpus as Cp
from . import encoders as E
from . import streams as S
from . import tensor as T
from .errors import ConfigError, InputError, NumericError
from .model import ModelConfig, prefixes
from .optim import Adam
from .tensor import Tensor

MARGIN = 0.2  # margin-ranking ablation only; untuned by design


@dataclass
class ScoreRow:
    """Per-candidate logits, ranking scores, and the descending ranking
    (ties broken by lower candidate index, so ranking is deterministic)."""

    logits: list[float]
    scores: list[float]
    ranking: list[int]

    @classmethod
    def from_logits(cls, logits: np.ndarray, use_sigmoid: bool) -> "ScoreRow":
        logits = np.asarray(logits, dtype=np.float64).reshape(-1)
        scores = T.sigmoid(T.constant(logits)).data if use_sigmoid else logits.copy()
        ranking = sorted(range(len(logits)), key=lambda i: (-scores[i], i))
        return cls(logits.tolist(), scores.tolist(), ranking)

    def rank_of(self, index: int) -> int:
        return self.ranking.index(index) + 1


def fuse_attention(q_pc: Tensor, q_pe: Tensor, kind: str, *,
                   c: Tensor | None = None, w_f: Tensor | None = None) -> Tensor:
    """Convex combination of the two stream outputs, batched over rows.

    q_pc/q_pe are [N, d] (one row per candidate). "s-attn" gates with w_f,
    "m-attn" with the matching candidate embedding row of c.
    """
    if kind == "s-attn":
        if w_f is None:
            raise ConfigError("s-attn fusion requires w_f")
        a = T.matmul(q_pc, w_f)
        b = T.matmul(q_pe, w_f)
    elif kind == "m-attn":
        if c is None:
            raise ConfigError("m-attn fusion requires candidate embeddings")
        a = T.sum_last(T.mul(c, q_pc))
        b = T.sum_last(T.mul(c, q_pe))
    else:
        raise ConfigError(f"fuse_attention: no fused vector exists for {kind!r}")
    w = T.softmax_last(T.concat_cols([a, b]))
    return T.add(T.scale_rows(q_pc, T.slice_cols(w, 0, 1)),
                 T.scale_rows(q_pe, T.slice_cols(w, 1, 2)))


def fuse_linear(q_pc: Tensor, q_pe: Tensor, kind: str,
                proj: Tensor | None = None) -> Tensor:
    """Ablation-only linear fusions: mean, sum, or projected concatenation."""
    if kind == "mean-fuse":
        return T.scale(T.add(q_pc, q_pe), 0.5)
    if kind == "sum-fuse":
        return T.add(q_pc, q_pe)
    if kind == "concat-fuse":
        if proj is None:
            raise ConfigError("concat-fuse requires its projection parameter")
        return T.matmul(T.concat_cols([q_pc, q_pe]), proj)
    raise ConfigError(f"unknown linear fusion {kind!r}")


def score_candidate(q_ctxt: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    """(logit, score) for one candidate: dot product and its sigmoid."""
    logit = T.sum_last(T.mul(q_ctxt, c))
    return logit, T.sigmoid(logit)


def colfuse_score(pc_queries: Tensor | None, pe_queries: Tensor | None,
                  cand_words: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Late-interaction score: stack both streams' coded queries, dot them
    against the candidate's word embeddings, take each row's max over the
    words, and sum the maxima."""
    parts = [t for t in (pc_queries, pe_queries) if t is not None]
    if not parts:
        raise InputError("colfuse_score: needs at least one coded query")
    q_tilde = parts[0] if len(parts) == 1 else T.concat_rows(parts)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise InputError("colfuse_score: all candidate words masked")
        if not mask.all():
            cand_words = T.take_rows(cand_words, np.flatnonzero(mask))
    sims = T.matmul(q_tilde, T.transpose(cand_words))
    return T.sum_all(T.max_last(sims))


# ---------------------------------------------------------------------------
# full forward
# ---------------------------------------------------------------------------

def persona_vectors(entries: list[Cp.PersonaEntry], params: dict[str, Tensor],
                    cfg: ModelConfig, *, dropout_rng=None) -> Tensor:
    """Encode and pool each persona entry -> [j, d]."""
    if not entries:
        raise ConfigError("persona-coded scoring requires at least one "
                          "persona entry")
    pfx = prefixes(cfg)["t1"]
    vecs = []
    for e in entries:
        if e.kv_pairs is not None:
            embs = E.encode_persona_kv(params, pfx, cfg.encoder, e.kv_pairs,
                                       dropout_rng=dropout_rng)
        else:
            embs = E.encode_persona_text(params, pfx, cfg.encoder,
                                         np.asarray(e.text_tokens, dtype=np.intp),
                                         e.speaker, dropout_rng=dropout_rng)
        vecs.append(S.aggregate_persona(embs, params["wp"]))
    return T.concat_rows(vecs)


def encode_candidates(cand_ids: np.ndarray, cand_mask: np.ndarray,
                      params: dict[str, Tensor], cfg: ModelConfig, *,
                      with_words: bool, dropout_rng=None
                      ) -> tuple[Tensor, list[Tensor] | None, list[np.ndarray] | None]:
    """Encode a candidate id matrix -> (C [N, d], word tensors, masks).

    Word-level outputs are kept only when the scorer needs them (col-fuse).
    """
    pfx = prefixes(cfg)["t3"]
    sent, words, masks = [], [], []
    for i in range(cand_ids.shape[0]):
        m = cand_mask[i]
        w = E.encode_text(params, pfx, cfg.encoder, cand_ids[i], m,
                          dropout_rng=dropout_rng)
        sent.append(E.reduce_candidate(w, m))
        if with_words:
            words.append(w)
            masks.append(m)
    C = T.concat_rows(sent)
    return (C, words, masks) if with_words else (C, None, None)


def encode_candidate_list(cands: list[list[int]], params: dict[str, Tensor],
                          cfg: ModelConfig, *, with_words: bool
                          ) -> tuple[Tensor, list[Tensor] | None, None]:
    """Encode candidates one at a time, unpadded (the evaluation path).

    The cache builder uses exactly this routine, so cached and freshly
    computed candidate embeddings are bitwise equal.
    """
    pfx = prefixes(cfg)["t3"]
    sent, words = [], []
    for ids in cands:
        w = E.encode_text(params, pfx, cfg.encoder, np.asarray(ids, dtype=np.intp))
        sent.append(E.reduce_candidate(w))
        if with_words:
            words.append(w)
    return T.concat_rows(sent), (words if with_words else None), None


def row_logits(query_ids: np.ndarray, query_mask: np.ndarray,
               entries: list[Cp.PersonaEntry] | None,
               C: Tensor, words: list[Tensor] | None,
               word_masks: list[np.ndarray] | None,
               params: dict[str, Tensor], cfg: ModelConfig, *,
               dropout_rng=None, pvecs: Tensor | None = None) -> Tensor:
    """Logits of one dialogue row against N candidates -> [1, N].

    pvecs short-circuits persona encoding with precomputed vectors (the
    cache path); otherwise entries are encoded fresh.
    """
    pfx = prefixes(cfg)
    q = E.encode_text(params, pfx["t2"], cfg.encoder, query_ids, query_mask,
                      dropout_rng=dropout_rng)
    qmask = query_mask if query_mask is not None and not query_mask.all() else None

    pc_q = pe_q = None
    if cfg.uses_personas:
        if pvecs is None:
            pvecs = persona_vectors(entries, params, cfg, dropout_rng=dropout_rng)
        pc_q = S.coded_queries(q, pvecs, qmask)
    if cfg.m > 0:
        pe_q = S.coded_queries(q, params["codes"], qmask)

    if cfg.fusion == "col-fuse":
        cells = [T.reshape(colfuse_score(
            pc_q, pe_q, words[i],
            word_masks[i] if word_masks is not None else None), (1, 1))
            for i in range(len(words))]
        return T.concat_cols(cells)

    ctx_pc = S.context_over_candidates(pc_q, C) if pc_q is not None else None
    ctx_pe = S.context_over_candidates(pe_q, C) if pe_q is not None else None
    if ctx_pc is None:
        q_ctxt = ctx_pe
    elif ctx_pe is None:
        q_ctxt = ctx_pc  # m = 0: the context is the persona stream alone
    elif cfg.ablation in ("mean-fuse", "sum-fuse", "concat-fuse"):
        q_ctxt = fuse_linear(ctx_pc, ctx_pe, cfg.ablation,
                             params.get("concat_proj"))
    else:
        q_ctxt = fuse_attention(ctx_pc, ctx_pe, cfg.fusion, c=C,
                                w_f=params.get("wf"))
    return T.transpose(T.sum_last(T.mul(q_ctxt, C)))


def batch_loss(batch: Cp.Batch, params: dict[str, Tensor], cfg: ModelConfig,
               dropout_rng=None) -> Tensor:
    """In-batch-negative loss over the shared candidate set.

    Builds the [B, B] logit matrix (row = dialogue, column = candidate) and
    applies row softmax cross-entropy with the diagonal as target; the
    margin-ranking ablation swaps the loss head only.
    """
    if not batch.training or batch.cand_ids is None:
        raise ConfigError("batch_loss needs a training batch")
    with_words = cfg.fusion == "col-fuse"
    C, words, wmasks = encode_candidates(batch.cand_ids, batch.cand_mask,
                                         params, cfg, with_words=with_words,
                                         dropout_rng=dropout_rng)
    rows = []
    for r in range(batch.size):
        entries = batch.personas[r] if batch.personas is not None else None
        rows.append(row_logits(batch.query_ids[r], batch.query_mask[r], entries,
                               C, words, wmasks, params, cfg,
                               dropout_rng=dropout_rng))
    logits = T.concat_rows(rows)
    if cfg.ablation == "margin":
        return margin_ranking_loss(logits, MARGIN)
    return T.cross_entropy_rows(logits, batch.labels)


def margin_ranking_loss(logits: Tensor, margin: float) -> Tensor:
    """Hinge on (true logit - negative logit) over all true/negative pairs."""
    B = logits.data.shape[0]
    eye = np.eye(B)
    diag = T.sum_last(T.mul(logits, T.constant(eye)))            # [B, 1]
    spread = T.matmul(diag, T.constant(np.ones((1, B))))         # [B, B]
    viol = T.relu(T.add(T.scale(T.sub(spread, logits), -1.0),
                        T.constant(np.full((B, B), margin))))
    off = T.mul(viol, T.constant(1.0 - eye))
    return T.scale(T.sum_all(off), 1.0 / (B * (B - 1)))


def train_step(batch: Cp.Batch, params: dict[str, Tensor], cfg: ModelConfig,
               opt: Adam, rng: np.random.Generator) -> float:
    """One forward/backward/update; returns the loss value."""
    if batch.size < 2:
        raise ConfigError("train_step requires a batch of at least 2")
    dropout_rng = rng if cfg.encoder.dropout_rate > 0 else None
    try:
        with T.Tape() as tape:
            loss = batch_loss(batch, params, cfg, dropout_rng)
        tape.backward(loss)
    except NumericError as e:
        raise NumericError(f"{e} (batch of {batch.size}, first id "
                           f"{batch.dialogues[0].id})") from e
    opt.step(params)
    return float(loss.data)


def score_dialogue(dialogue: Cp.Dialogue, params: dict[str, Tensor],
                   cfg: ModelConfig, *, C: Tensor | None = None,
                   words: list[Tensor] | None = None,
                   word_masks: list[np.ndarray] | None = None,
                   pvecs: Tensor | None = None) -> ScoreRow:
    """Score every candidate of one dialogue (evaluation path, no dropout).

    Candidate embeddings and persona vectors may be supplied precomputed
    (the cache path); the scoring arithmetic is shared either way, which is
    what makes cached and fresh scores bit-identical.
    """
    if not dialogue.candidates:
        raise InputError(f"dialogue {dialogue.id}: no candidates to rank")
    with_words = cfg.fusion == "col-fuse"
    if C is None:
        C, words, word_masks = encode_candidate_list(dialogue.candidates, params,
                                                     cfg, with_words=with_words)
    qids = np.asarray(Cp.merged_query_ids(dialogue, cfg.l_q,
                                          prefuse_personas=cfg.prefuse_personas),
                      dtype=np.intp)
    qmask = np.ones(len(qids), dtype=bool)
    entries = Cp.select_personas(dialogue, cfg.persona_variant)
    logits = row_logits(qids, qmask, entries, C, words, word_masks, params,
                        cfg, pvecs=pvecs)
    return ScoreRow.from_logits(logits.data, use_sigmoid=cfg.fusion != "col-fuse")


def rank(dialogue: Cp.Dialogue, params: dict[str, Tensor],
         cfg: ModelConfig) -> ScoreRow:
    """Full forward per candidate; deterministic ranking with index ties."""
    return score_dialogue(dialogue, params, cfg)
