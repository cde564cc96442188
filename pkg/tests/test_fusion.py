"""Tests for post-fusion, scoring, the training step and ranking."""

import numpy as np
import pytest

from conftest import gradcheck_cfg, make_tiny, micro_batch

from pcpe import corpus as C
from pcpe import fusion as F
from pcpe import streams as S
from pcpe import tensor as T
from pcpe.errors import ConfigError
from pcpe.model import ModelConfig, build_params
from pcpe.optim import Adam


def _t(x):
    return T.constant(np.asarray(x, dtype=np.float64))


class TestFuseAttention:
    def test_equal_streams_fixed_point(self):
        v = np.array([[0.4, -1.0, 2.0]])
        for kind, kw in (("s-attn", {"w_f": _t(np.random.default_rng(0).normal(size=(3, 1)))}),
                         ("m-attn", {"c": _t([[1.0, 2.0, 3.0]])})):
            out = F.fuse_attention(_t(v), _t(v), kind, **kw)
            np.testing.assert_allclose(out.data, v, atol=1e-12)

    def test_sattn_zero_projection_is_average(self):
        a, b = _t([[2.0, 0.0]]), _t([[0.0, 4.0]])
        out = F.fuse_attention(a, b, "s-attn", w_f=_t(np.zeros((2, 1))))
        np.testing.assert_allclose(out.data, [[1.0, 2.0]], atol=1e-15)

    def test_mattn_scalar_evaluation(self):
        out = F.fuse_attention(_t([[1.0, 0.0]]), _t([[0.0, 1.0]]), "m-attn",
                               c=_t([[4.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.982, 0.018]], atol=1e-3)

    def test_colfuse_here_is_contract_error(self):
        with pytest.raises(ConfigError):
            F.fuse_attention(_t([[1.0]]), _t([[1.0]]), "col-fuse")

    def test_convexity(self):
        rng = np.random.default_rng(4)
        pc, pe = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
        c = rng.normal(size=(6, 5))
        for kind, kw in (("s-attn", {"w_f": _t(rng.normal(size=(5, 1)))}),
                         ("m-attn", {"c": _t(c)})):
            out = F.fuse_attention(_t(pc), _t(pe), kind, **kw).data
            lo = np.minimum(pc, pe) - 1e-12
            hi = np.maximum(pc, pe) + 1e-12
            assert ((out >= lo) & (out <= hi)).all()


class TestScoreCandidate:
    def test_orthogonal(self):
        logit, score = F.score_candidate(_t([[1.0, 0.0]]), _t([[0.0, 1.0]]))
        assert logit.item() == 0.0 and score.item() == 0.5

    def test_unit_alignment(self):
        logit, score = F.score_candidate(_t([[1.0, 0.0]]), _t([[1.0, 0.0]]))
        assert logit.item() == 1.0
        assert score.item() == pytest.approx(0.7310585786300049)

    def test_negation_symmetry(self):
        q, c = _t([[0.3, -0.8]]), _t([[1.1, 0.4]])
        _, s = F.score_candidate(q, c)
        _, s_neg = F.score_candidate(q, T.scale(c, -1.0))
        assert s.item() + s_neg.item() == pytest.approx(1.0, abs=1e-12)


class TestColfuse:
    def test_single_query_single_word(self):
        out = F.colfuse_score(_t([[1.0, 2.0]]), None, _t([[3.0, 4.0]]))
        assert out.item() == 11.0

    def test_hand_worked_matrix(self):
        q = _t([[1.0, 0.0], [0.0, 1.0]])
        words = _t([[1.0, 0.0], [1.0, 1.0]])
        # sims [[1,1],[0,1]] -> row maxima [1,1] -> 2
        assert F.colfuse_score(q, None, words).item() == 2.0

    def test_duplicate_word_idempotent(self):
        q = _t([[1.0, 0.0], [0.0, 1.0]])
        a = F.colfuse_score(q, None, _t([[1.0, 2.0], [0.5, 0.5]]))
        b = F.colfuse_score(q, None, _t([[1.0, 2.0], [0.5, 0.5], [1.0, 2.0]]))
        assert a.item() == b.item()

    def test_mask_excludes_words(self):
        q = _t([[1.0, 0.0]])
        words = _t([[1.0, 0.0], [50.0, 0.0]])
        out = F.colfuse_score(q, None, words, mask=np.array([True, False]))
        assert out.item() == 1.0

    def test_oracle_equivalence_1000_instances(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            j = int(rng.integers(1, 4))
            m = int(rng.integers(0, 7 - j))
            lc = int(rng.integers(1, 9))
            d = int(rng.integers(1, 9))
            pc = rng.normal(size=(j, d))
            pe = rng.normal(size=(m, d)) if m else None
            words = rng.normal(size=(lc, d))
            got = F.colfuse_score(_t(pc), _t(pe) if m else None, _t(words)).item()
            # naive double loop
            stacked = pc if not m else np.vstack([pc, pe])
            expect = 0.0
            for r in range(j + m):
                best = -np.inf
                for w in range(lc):
                    s = float(stacked[r] @ words[w])
                    best = max(best, s)
                expect += best
            assert abs(got - expect) <= 1e-12


class TestTrainStep:
    def test_uniform_logits_loss_is_ln_b(self):
        z = T.constant(np.zeros((4, 4)))
        loss = T.cross_entropy_rows(z, np.arange(4))
        assert loss.item() == np.log(4.0)

    def test_saturated_logits_loss_near_zero(self):
        z = np.full((3, 3), -20.0)
        np.fill_diagonal(z, 20.0)
        loss = T.cross_entropy_rows(T.constant(z), np.arange(3))
        assert loss.item() < 1e-8

    def test_b2_scalar_evaluation(self):
        z = T.constant([[1.0, 0.0], [0.0, 1.0]])
        loss = T.cross_entropy_rows(z, np.arange(2))
        assert loss.item() == pytest.approx(-np.log(np.e / (np.e + 1)), abs=1e-12)
        assert loss.item() == pytest.approx(0.31326168751822286, abs=1e-12)

    def test_step_decreases_loss_eventually(self, tiny_kv):
        cfg, params, vocab, kv, train, _ = make_tiny(n_train=8, seed=3)
        batches = C.make_batches(train, 4, 0, l_q=cfg.l_q, training=True,
                                 persona_mode=cfg.persona_variant)
        opt = Adam(lr=1e-3)
        rng = np.random.default_rng(0)
        first = F.train_step(batches[0], params, cfg, opt, rng)
        for _ in range(30):
            last = F.train_step(batches[0], params, cfg, opt, rng)
        assert last < first

    def test_batch_of_one_rejected(self):
        cfg, params, *_ = make_tiny()
        batch = micro_batch(cfg, B=3)
        batch.dialogues = batch.dialogues[:1]
        with pytest.raises(ConfigError):
            F.train_step(batch, params, cfg, Adam(), np.random.default_rng(0))

    @pytest.mark.parametrize("fusion", ["s-attn", "m-attn", "col-fuse"])
    @pytest.mark.parametrize("m", [0, 2])
    def test_loss_gradcheck(self, fusion, m):
        from conftest import full_forward_gradcheck
        cfg, params = gradcheck_cfg(m, fusion, seed=5)
        batch = micro_batch(cfg, seed=1, B=3, l=4)
        # larger-scale weights keep gradients well above FD noise
        rng = np.random.default_rng(2)
        for p in params.values():
            p.data += rng.normal(0, 0.3, size=p.data.shape)
        err = full_forward_gradcheck(cfg, params, batch, max_per_param=24)
        assert err <= 1e-4, f"{fusion} m={m}: rel err {err:.2e}"


class TestRank:
    def test_single_candidate(self):
        cfg, params, vocab, kv, train, _ = make_tiny()
        d = train[0]
        solo = C.Dialogue(id="x", personas=d.personas, history=d.history,
                          query=d.query, candidates=[d.candidates[0]],
                          true_index=0, persona_flat=d.persona_flat)
        row = F.rank(solo, params, cfg)
        assert row.ranking == [0]

    def test_duplicate_candidates_tie_break_by_index(self):
        cfg, params, vocab, kv, train, _ = make_tiny()
        d = train[0]
        dup = C.Dialogue(id="x", personas=d.personas, history=d.history,
                         query=d.query,
                         candidates=[d.candidates[0], d.candidates[1],
                                     d.candidates[0]],
                         true_index=0, persona_flat=d.persona_flat)
        row = F.rank(dup, params, cfg)
        assert row.scores[0] == row.scores[2]
        assert row.ranking.index(0) < row.ranking.index(2)

    def test_scores_in_sigmoid_range_for_attention_fusions(self):
        cfg, params, vocab, kv, train, valid = make_tiny()
        row = F.rank(valid[0], params, cfg)
        assert all(0.0 < s < 1.0 for s in row.scores)

    def test_ranking_by_scores_equals_ranking_by_logits(self):
        cfg, params, vocab, kv, train, valid = make_tiny()
        row = F.rank(valid[0], params, cfg)
        by_logit = sorted(range(len(row.logits)),
                          key=lambda i: (-row.logits[i], i))
        assert row.ranking == by_logit

    def test_m0_equals_pc_only_pipeline(self):
        cfg, params, vocab, kv, train, valid = make_tiny(m=0)
        d = valid[0]
        row = F.rank(d, params, cfg)
        # straight-line persona-stream-only recompute
        from pcpe import encoders as E
        from pcpe.model import prefixes
        pfx = prefixes(cfg)
        cand_ids, cand_mask = C.pad_candidates(d)
        C_emb, _, _ = F.encode_candidates(cand_ids, cand_mask, params, cfg,
                                          with_words=False)
        qids = np.asarray(C.merged_query_ids(d, cfg.l_q), dtype=np.intp)
        q = E.encode_text(params, pfx["t2"], cfg.encoder, qids,
                          np.ones(len(qids), dtype=bool))
        pvecs = F.persona_vectors(d.personas, params, cfg)
        pc_q = S.coded_queries(q, pvecs)
        ctx = S.context_over_candidates(pc_q, C_emb)
        logits = T.sum_last(T.mul(ctx, C_emb)).data.ravel()
        np.testing.assert_allclose(row.logits, logits, atol=1e-12)

    def test_untrained_chance_level(self):
        cfg, params, vocab, kv, _, valid = make_tiny(n_train=4, n_valid=500,
                                                     seed=21, n_layers=1)
        hits = sum(F.rank(d, params, cfg).ranking[0] == d.true_index
                   for d in valid)
        hr1 = hits / len(valid)
        sigma = np.sqrt(0.05 * 0.95 / len(valid))
        assert 0.05 - 3 * sigma <= hr1 <= 0.05 + 3 * sigma


class TestPaddingInvariance:
    def test_padded_query_scores_identical(self):
        cfg, params, vocab, kv, train, valid = make_tiny()
        d = valid[0]
        row = F.rank(d, params, cfg)
        qids = np.asarray(C.merged_query_ids(d, cfg.l_q), dtype=np.intp)
        padded = np.concatenate([qids, np.array([C.PAD] * 5, dtype=np.intp)])
        mask = np.concatenate([np.ones(len(qids), bool), np.zeros(5, bool)])
        cand_ids, cand_mask = C.pad_candidates(d)
        C_emb, words, wmasks = F.encode_candidates(
            cand_ids, cand_mask, params, cfg,
            with_words=cfg.fusion == "col-fuse")
        logits = F.row_logits(padded, mask, d.personas, C_emb, words, wmasks,
                              params, cfg)
        np.testing.assert_allclose(logits.data.ravel(), row.logits, atol=1e-9)


class TestBaselines:
    def test_poly_requires_positive_m(self):
        with pytest.raises(ConfigError):
            cfg, *_ = make_tiny(m=0, baseline="poly")

    def test_poly_ignores_persona_entries(self):
        cfg, params, vocab, kv, train, valid = make_tiny(m=2, baseline="poly",
                                                         withhold=True)
        d = valid[0]
        row = F.rank(d, params, cfg)
        swapped = C.Dialogue(id=d.id, personas=train[1].personas,
                             history=d.history, query=d.query,
                             candidates=d.candidates, true_index=d.true_index,
                             persona_flat=d.persona_flat)
        row2 = F.rank(swapped, params, cfg)
        np.testing.assert_array_equal(row.logits, row2.logits)

    def test_poly_prefusion_changes_input(self):
        cfg, *_ = make_tiny(m=2, baseline="poly")
        d_with = make_tiny(m=2, baseline="poly")[5][0]
        ids_with = C.merged_query_ids(d_with, cfg.l_q, prefuse_personas=True)
        ids_without = C.merged_query_ids(d_with, cfg.l_q, prefuse_personas=False)
        assert len(ids_with) > len(ids_without)

    def test_pcpe_text_routes_flattened_entries(self):
        cfg, params, vocab, kv, train, valid = make_tiny(baseline="pcpe-text")
        assert cfg.persona_variant == "flat-text"
        row = F.rank(valid[0], params, cfg)
        assert len(row.ranking) == 20

    def test_ablation_linear_fusions_run(self):
        for ab in ("mean-fuse", "sum-fuse", "concat-fuse"):
            cfg, params, vocab, kv, train, _ = make_tiny(m=2, ablation=ab)
            batch = C.make_batches(train, 4, 0, l_q=cfg.l_q, training=True,
                                   persona_mode=cfg.persona_variant)[0]
            loss = F.train_step(batch, params, cfg, Adam(),
                                np.random.default_rng(0))
            assert np.isfinite(loss)

    def test_ablation_margin_loss_runs(self):
        cfg, params, vocab, kv, train, _ = make_tiny(m=2, ablation="margin")
        batch = C.make_batches(train, 4, 0, l_q=cfg.l_q, training=True,
                               persona_mode=cfg.persona_variant)[0]
        loss = F.train_step(batch, params, cfg, Adam(), np.random.default_rng(0))
        assert np.isfinite(loss) and loss >= 0.0
