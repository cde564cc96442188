"""Offline embedding caches for candidates and persona entries.

Candidate sentence embeddings (and, for the late-interaction scorer, the
word-level matrices) and per-entry persona vectors are query-independent, so
they can be computed once per weight snapshot and reused across inferences.
Entries are keyed by a 64-bit FNV-1a content hash; a fingerprint over the
config and every parameter guarantees a hit can only come from the exact
weights that produced it.

Cache file: magic "PCCH", version u32, fingerprint (32 bytes), entry count
u64, then records (hash u64, kind u8, rank u32, extents u64 each, raw
little-endian float64), everything little-endian. Writes are atomic
(temp file + rename).
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import corpus as Cp
from . import fusion as F
from . import tensor as T
from .errors import CacheError
from .model import ModelConfig, fingerprint
from .tensor import Tensor

log = logging.getLogger(__name__)

CACHE_MAGIC = b"PCCH"
CACHE_VERSION = 1

KIND_SENTENCE = 0
KIND_WORD_MATRIX = 1
KIND_PERSONA = 2

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(ints: Iterable[int]) -> int:
    """FNV-1a over the 8-byte little-endian encoding of each integer."""
    h = _FNV_OFFSET
    for value in ints:
        for b in int(value).to_bytes(8, "little", signed=False):
            h ^= b
            h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def candidate_hash(token_ids: Sequence[int]) -> int:
    return fnv1a64(token_ids)


def persona_hash(entry: Cp.PersonaEntry) -> int:
    """KV entries hash over their sorted id triples (pair order is not
    meaningful); text entries hash over (speaker, tokens)."""
    if entry.kv_pairs is not None:
        flat = [x for triple in sorted(entry.kv_pairs) for x in triple]
        return fnv1a64([2] + flat)
    return fnv1a64([1, entry.speaker] + list(entry.text_tokens))


@dataclass
class EmbeddingCache:
    config_fingerprint: bytes
    entries: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def put(self, h: int, kind: int, array: np.ndarray) -> None:
        self.entries.setdefault((h, kind), np.ascontiguousarray(array,
                                                                dtype=np.float64))

    def get(self, h: int, kind: int) -> np.ndarray | None:
        return self.entries.get((h, kind))

    def __len__(self) -> int:
        return len(self.entries)

    def merge(self, other: "EmbeddingCache") -> None:
        if other.config_fingerprint != self.config_fingerprint:
            raise CacheError("merge: fingerprint mismatch between caches")
        for key, arr in other.entries.items():
            self.entries.setdefault(key, arr)


def build_candidate_cache(candidates: Iterable[Sequence[int]],
                          params: dict[str, Tensor], cfg: ModelConfig, *,
                          with_words: bool | None = None) -> EmbeddingCache:
    """Embed each unique candidate (weights frozen, no dropout).

    Duplicates are stored once (content-hash keying); rebuilding under the
    same weights reproduces the cache exactly.
    """
    if with_words is None:
        with_words = cfg.fusion == "col-fuse"
    cache = EmbeddingCache(fingerprint(cfg, params))
    for ids in candidates:
        ids = list(ids)
        h = candidate_hash(ids)
        if (h, KIND_SENTENCE) in cache.entries:
            continue
        C, words, _ = F.encode_candidate_list([ids], params, cfg,
                                              with_words=with_words)
        cache.put(h, KIND_SENTENCE, C.data[0])
        if with_words:
            cache.put(h, KIND_WORD_MATRIX, words[0].data)
    return cache


def build_persona_cache(speaker_personas: Iterable[Cp.PersonaEntry],
                        params: dict[str, Tensor],
                        cfg: ModelConfig) -> EmbeddingCache:
    """Store the aggregated vector of every persona entry.

    One vector per entry per speaker: storage grows linearly with the number
    of speakers for a fixed entry count.
    """
    cache = EmbeddingCache(fingerprint(cfg, params))
    for entry in speaker_personas:
        h = persona_hash(entry)
        if (h, KIND_PERSONA) in cache.entries:
            continue
        vec = F.persona_vectors([entry], params, cfg)
        cache.put(h, KIND_PERSONA, vec.data[0])
    return cache


def caches_from_dialogues(dialogues: Sequence[Cp.Dialogue],
                          params: dict[str, Tensor], cfg: ModelConfig
                          ) -> EmbeddingCache:
    """One combined cache covering every candidate and persona entry."""
    cand_cache = build_candidate_cache(
        (c for d in dialogues for c in d.candidates), params, cfg)
    if cfg.uses_personas:
        entries = (e for d in dialogues
                   for e in (Cp.select_personas(d, cfg.persona_variant) or []))
        cand_cache.merge(build_persona_cache(entries, params, cfg))
    return cand_cache


def _lookup(cache: EmbeddingCache, h: int, kind: int, what: str, strict: bool,
            recompute) -> np.ndarray:
    arr = cache.get(h, kind)
    if arr is not None:
        return arr
    if strict:
        raise CacheError(f"cache miss for {what} (content hash {h:016x})")
    log.warning("cache miss for %s (hash %016x); recomputing", what, h)
    return recompute()


def score_with_cache(dialogue: Cp.Dialogue, cache: EmbeddingCache,
                     params: dict[str, Tensor], cfg: ModelConfig, *,
                     strict: bool = True) -> F.ScoreRow:
    """Rank one dialogue from cached embeddings.

    Identical arithmetic (and therefore identical scores, bit for bit) to
    the uncached path: only the origin of the candidate and persona
    embeddings differs. A fingerprint mismatch can never produce a score.
    """
    fp = fingerprint(cfg, params)
    if cache.config_fingerprint != fp:
        raise CacheError("stale cache: fingerprint does not match the "
                         "current weights/config")
    with_words = cfg.fusion == "col-fuse"

    def fresh_cand(ids, want):
        def inner():
            C, words, _ = F.encode_candidate_list([list(ids)], params, cfg,
                                                  with_words=with_words)
            return C.data[0] if want == KIND_SENTENCE else words[0].data
        return inner

    rows, word_list = [], []
    for ids in dialogue.candidates:
        h = candidate_hash(ids)
        rows.append(_lookup(cache, h, KIND_SENTENCE, f"candidate {h:016x}",
                            strict, fresh_cand(ids, KIND_SENTENCE)))
        if with_words:
            word_list.append(T.constant(_lookup(
                cache, h, KIND_WORD_MATRIX, f"candidate words {h:016x}",
                strict, fresh_cand(ids, KIND_WORD_MATRIX))))
    C = T.constant(np.vstack(rows))

    pvecs = None
    if cfg.uses_personas:
        entries = Cp.select_personas(dialogue, cfg.persona_variant)
        vecs = []
        for e in entries:
            h = persona_hash(e)
            vecs.append(_lookup(
                cache, h, KIND_PERSONA, f"persona entry {h:016x}", strict,
                lambda e=e: F.persona_vectors([e], params, cfg).data[0]))
        pvecs = T.constant(np.vstack(vecs))

    return F.score_dialogue(dialogue, params, cfg, C=C,
                            words=word_list if with_words else None,
                            word_masks=None, pvecs=pvecs)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def save_cache(path: str, cache: EmbeddingCache) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<I", CACHE_VERSION))
        fh.write(cache.config_fingerprint)
        fh.write(struct.pack("<Q", len(cache.entries)))
        for (h, kind) in sorted(cache.entries):
            arr = cache.entries[(h, kind)]
            fh.write(struct.pack("<QB", h, kind))
            fh.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(arr.astype("<f8", copy=False).tobytes())
    os.replace(tmp, path)


def load_cache(path: str) -> EmbeddingCache:
    with open(path, "rb") as fh:
        if fh.read(4) != CACHE_MAGIC:
            raise CacheError(f"{path}: not a cache file (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CACHE_VERSION:
            raise CacheError(f"{path}: unsupported cache version {version}")
        fp = fh.read(32)
        (count,) = struct.unpack("<Q", fh.read(8))
        cache = EmbeddingCache(fp)
        for _ in range(count):
            h, kind = struct.unpack("<QB", fh.read(9))
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            cache.entries[(h, kind)] = arr.astype(np.float64)
    return cache
