"""Tests for the embedding cache: keying, persistence, transparency."""

import hashlib

import numpy as np
import pytest

from conftest import make_tiny

from pcpe import cache as CA
from pcpe import corpus as C
from pcpe import fusion as F
from pcpe.errors import CacheError


class TestHashing:
    def test_fnv_against_byte_level_recomputation(self):
        def oracle(data: bytes) -> int:
            h = 0xCBF29CE484222325
            for b in data:
                h ^= b
                h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
            return h

        assert CA.fnv1a64([0]) == oracle(bytes(8))
        assert CA.fnv1a64([7, 300]) == oracle(
            (7).to_bytes(8, "little") + (300).to_bytes(8, "little"))

    def test_distinct_sequences_distinct_hashes(self):
        assert CA.fnv1a64([1, 2]) != CA.fnv1a64([2, 1])
        assert CA.fnv1a64([1]) != CA.fnv1a64([1, 0])

    def test_persona_hash_order_free_for_kv(self):
        a = C.PersonaEntry(speaker=0, kv_pairs=[(1, 2, 0), (3, 4, 0)])
        b = C.PersonaEntry(speaker=0, kv_pairs=[(3, 4, 0), (1, 2, 0)])
        assert CA.persona_hash(a) == CA.persona_hash(b)

    def test_persona_hash_speaker_sensitive_for_text(self):
        a = C.PersonaEntry(speaker=0, text_tokens=[5, 6])
        b = C.PersonaEntry(speaker=1, text_tokens=[5, 6])
        assert CA.persona_hash(a) != CA.persona_hash(b)


class TestBuild:
    def test_duplicates_stored_once(self):
        cfg, params, vocab, kv, train, _ = make_tiny()
        cands = [train[0].candidates[0]] * 3 + [train[0].candidates[1]]
        cache = CA.build_candidate_cache(cands, params, cfg)
        assert len(cache) == 2

    def test_empty_candidate_list(self):
        cfg, params, *_ = make_tiny()
        cache = CA.build_candidate_cache([], params, cfg)
        assert len(cache) == 0

    def test_rebuild_byte_identical(self, tmp_path):
        cfg, params, vocab, kv, train, _ = make_tiny()
        paths = []
        for i in range(2):
            cache = CA.caches_from_dialogues(train[:4], params, cfg)
            p = tmp_path / f"c{i}.cache"
            CA.save_cache(str(p), cache)
            paths.append(p)
        a, b = (hashlib.sha256(p.read_bytes()).hexdigest() for p in paths)
        assert a == b

    def test_persona_counts_linear_in_speakers(self):
        cfg, params, vocab, kv, train, _ = make_tiny(n_train=12)
        entries = [e for d in train for e in d.personas]
        cache = CA.build_persona_cache(entries, params, cfg)
        unique = {CA.persona_hash(e) for e in entries}
        assert len(cache) == len(unique)

    def test_persona_hit_bit_identical_to_fresh(self):
        cfg, params, vocab, kv, train, _ = make_tiny()
        entry = train[0].personas[0]
        cache = CA.build_persona_cache([entry], params, cfg)
        fresh = F.persona_vectors([entry], params, cfg).data[0]
        np.testing.assert_array_equal(
            cache.get(CA.persona_hash(entry), CA.KIND_PERSONA), fresh)


class TestFileFormat:
    def test_roundtrip(self, tmp_path):
        cfg, params, vocab, kv, train, _ = make_tiny()
        cache = CA.caches_from_dialogues(train[:3], params, cfg)
        p = str(tmp_path / "x.cache")
        CA.save_cache(p, cache)
        back = CA.load_cache(p)
        assert back.config_fingerprint == cache.config_fingerprint
        assert set(back.entries) == set(cache.entries)
        for key in cache.entries:
            np.testing.assert_array_equal(back.entries[key], cache.entries[key])

    def test_magic(self, tmp_path):
        cfg, params, *_ = make_tiny()
        p = str(tmp_path / "x.cache")
        CA.save_cache(p, CA.EmbeddingCache(b"\x00" * 32))
        assert open(p, "rb").read(4) == b"PCCH"

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.cache"
        p.write_bytes(b"XXXX" + b"\x00" * 44)
        with pytest.raises(CacheError):
            CA.load_cache(str(p))


class TestScoring:
    @pytest.mark.parametrize("fusion_kind,m", [("s-attn", 0), ("s-attn", 2),
                                               ("m-attn", 2), ("col-fuse", 2)])
    def test_cached_scores_bit_identical(self, fusion_kind, m):
        cfg, params, vocab, kv, train, valid = make_tiny(m=m, fusion=fusion_kind)
        cache = CA.caches_from_dialogues(valid, params, cfg)
        for d in valid[:4]:
            cold = F.rank(d, params, cfg)
            warm = CA.score_with_cache(d, cache, params, cfg)
            np.testing.assert_array_equal(warm.logits, cold.logits)
            np.testing.assert_array_equal(warm.scores, cold.scores)
            assert warm.ranking == cold.ranking

    def test_stale_fingerprint_refused(self):
        cfg, params, vocab, kv, train, valid = make_tiny()
        cache = CA.caches_from_dialogues(valid[:2], params, cfg)
        params["wp"].data += 0.5  # weights moved on: cache must refuse
        with pytest.raises(CacheError, match="stale"):
            CA.score_with_cache(valid[0], cache, params, cfg)

    def test_strict_miss_names_hash(self):
        cfg, params, vocab, kv, train, valid = make_tiny()
        cache = CA.EmbeddingCache(CA.fingerprint(cfg, params))
        with pytest.raises(CacheError, match="[0-9a-f]{16}"):
            CA.score_with_cache(valid[0], cache, params, cfg, strict=True)

    def test_permissive_mode_recomputes(self):
        cfg, params, vocab, kv, train, valid = make_tiny()
        cache = CA.EmbeddingCache(CA.fingerprint(cfg, params))
        warm = CA.score_with_cache(valid[0], cache, params, cfg, strict=False)
        cold = F.rank(valid[0], params, cfg)
        np.testing.assert_array_equal(warm.logits, cold.logits)
