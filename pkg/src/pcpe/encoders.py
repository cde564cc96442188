"""Transformer encoders for personas, queries and candidates.

Three roles: T1 embeds personas (text form with word+segment embeddings, or
a key/value/speaker form for attribute personas), T2 embeds queries, T3
embeds candidates; a masked mean reduces candidate token embeddings to one
sentence vector. Encoders may share parameters (T2=T3, or all three).

Blocks are post-norm: x = LN(x + MHA(x)); x = LN(x + FFN(x)). With zero
layers the output is exactly the summed input embeddings, which keeps the
degenerate-depth behaviour easy to reason about and test.

Checkpoint file: magic "PCPE", version u32, a length-prefixed JSON config
block, then one record per parameter (u32 name length, name bytes, u32 rank,
u64 extents, raw little-endian float64 data), all little-endian.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, InputError, ShapeError
from .tensor import Tensor

INIT_STD = 0.02
LN_EPS = 1e-5

CHECKPOINT_MAGIC = b"PCPE"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 4
    max_positions: int = 64
    dropout_rate: float = 0.1
    share_t2_t3: bool = True
    share_all: bool = False

    def validate(self) -> "EncoderConfig":
        if self.d <= 0 or self.d % self.n_heads != 0:
            raise ConfigError(f"d={self.d} must be a positive multiple of "
                              f"n_heads={self.n_heads}")
        if self.max_positions < 1:
            raise ConfigError("max_positions must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        return self


def _normal(rng: np.random.Generator, *shape) -> Tensor:
    return T.parameter(rng.normal(0.0, INIT_STD, size=shape))


def _init_layers(params: dict[str, Tensor], prefix: str, cfg: EncoderConfig,
                 rng: np.random.Generator) -> None:
    d, f = cfg.d, cfg.d * cfg.ffn_mult
    for i in range(cfg.n_layers):
        p = f"{prefix}.h{i}"
        for name in ("wq", "wk", "wv", "wo"):
            params[f"{p}.{name}"] = _normal(rng, d, d)
        for name in ("bq", "bk", "bv", "bo"):
            params[f"{p}.{name}"] = T.parameter(np.zeros(d))
        params[f"{p}.ln1.g"] = T.parameter(np.ones(d))
        params[f"{p}.ln1.b"] = T.parameter(np.zeros(d))
        params[f"{p}.ffn.w1"] = _normal(rng, d, f)
        params[f"{p}.ffn.b1"] = T.parameter(np.zeros(f))
        params[f"{p}.ffn.w2"] = _normal(rng, f, d)
        params[f"{p}.ffn.b2"] = T.parameter(np.zeros(d))
        params[f"{p}.ln2.g"] = T.parameter(np.ones(d))
        params[f"{p}.ln2.b"] = T.parameter(np.zeros(d))


def init_text_encoder(params: dict[str, Tensor], prefix: str, vocab_size: int,
                      cfg: EncoderConfig, rng: np.random.Generator, *,
                      segments: bool = False) -> None:
    """Token + position (+ optional 2-speaker segment) tables, and layers."""
    params[f"{prefix}.tok"] = _normal(rng, vocab_size, cfg.d)
    params[f"{prefix}.pos"] = _normal(rng, cfg.max_positions, cfg.d)
    if segments:
        params[f"{prefix}.seg"] = _normal(rng, 2, cfg.d)
    _init_layers(params, prefix, cfg, rng)


def init_kv_encoder(params: dict[str, Tensor], prefix: str, n_keys: int,
                    n_values: int, cfg: EncoderConfig,
                    rng: np.random.Generator) -> None:
    """Key/value/speaker tables and layers. No position table: attribute
    sets are unordered, so the encoding is deliberately order-free."""
    params[f"{prefix}.key"] = _normal(rng, n_keys, cfg.d)
    params[f"{prefix}.val"] = _normal(rng, n_values, cfg.d)
    params[f"{prefix}.spk"] = _normal(rng, 2, cfg.d)
    _init_layers(params, prefix, cfg, rng)


def _block(params: dict[str, Tensor], p: str, cfg: EncoderConfig, x: Tensor,
           bias_row: np.ndarray | None, dropout_rng: np.random.Generator | None) -> Tensor:
    d = cfg.d
    dh = d // cfg.n_heads
    rate = cfg.dropout_rate if dropout_rng is not None else 0.0

    q = T.linear(x, params[f"{p}.wq"], params[f"{p}.bq"])
    k = T.linear(x, params[f"{p}.wk"], params[f"{p}.bk"])
    v = T.linear(x, params[f"{p}.wv"], params[f"{p}.bv"])
    heads = []
    for h in range(cfg.n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = T.slice_cols(q, lo, hi)
        kh = T.slice_cols(k, lo, hi)
        vh = T.slice_cols(v, lo, hi)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / np.sqrt(dh))
        w = T.softmax_last(scores, bias=bias_row)
        heads.append(T.matmul(w, vh))
    a = T.linear(T.concat_cols(heads), params[f"{p}.wo"], params[f"{p}.bo"])
    if rate > 0:
        a = T.dropout(a, rate, dropout_rng)
    x = T.layer_norm(T.add(x, a), params[f"{p}.ln1.g"], params[f"{p}.ln1.b"], LN_EPS)
    h1 = T.gelu(T.linear(x, params[f"{p}.ffn.w1"], params[f"{p}.ffn.b1"]))
    f = T.linear(h1, params[f"{p}.ffn.w2"], params[f"{p}.ffn.b2"])
    if rate > 0:
        f = T.dropout(f, rate, dropout_rng)
    return T.layer_norm(T.add(x, f), params[f"{p}.ln2.g"], params[f"{p}.ln2.b"], LN_EPS)


def _run_layers(params, prefix, cfg, x, mask, dropout_rng):
    bias_row = None
    if mask is not None and not mask.all():
        bias_row = T.mask_bias(mask)[None, :]
    for i in range(cfg.n_layers):
        x = _block(params, f"{prefix}.h{i}", cfg, x, bias_row, dropout_rng)
    return x


def encode_text(params: dict[str, Tensor], prefix: str, cfg: EncoderConfig,
                token_ids: np.ndarray, mask: np.ndarray | None = None, *,
                segment_id: int | None = None,
                dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Per-token contextual embeddings [l, d].

    Masked positions carry no weight in any attention and must be excluded
    by downstream consumers. Inputs longer than max_positions are the
    caller's truncation failure and raise.
    """
    token_ids = np.asarray(token_ids, dtype=np.intp)
    l = token_ids.shape[0]
    if l == 0:
        raise InputError("encode_text: empty token sequence")
    if l > cfg.max_positions:
        raise ShapeError(f"encode_text: sequence length {l} exceeds "
                         f"max_positions {cfg.max_positions}")
    x = T.add(T.embedding(params[f"{prefix}.tok"], token_ids),
              T.embedding(params[f"{prefix}.pos"], np.arange(l)))
    if segment_id is not None:
        seg = T.reshape(T.embedding(params[f"{prefix}.seg"], np.array([segment_id])),
                        (cfg.d,))
        x = T.add_rowvec(x, seg)
    return _run_layers(params, prefix, cfg, x, mask, dropout_rng)


def encode_persona_text(params: dict[str, Tensor], prefix: str, cfg: EncoderConfig,
                        token_ids: np.ndarray, segment_id: int,
                        mask: np.ndarray | None = None, *,
                        dropout_rng: np.random.Generator | None = None) -> Tensor:
    """encode_text with the entry speaker's segment embedding added."""
    return encode_text(params, prefix, cfg, token_ids, mask,
                       segment_id=segment_id, dropout_rng=dropout_rng)


def encode_persona_kv(params: dict[str, Tensor], prefix: str, cfg: EncoderConfig,
                      kv_pairs, *,
                      dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Encode one speaker's KV pairs to [n_kv, d].

    Each pair's input row is key + value + speaker embedding; layers then
    attend over the pair sequence. Permuting pairs permutes output rows
    identically because nothing positional enters.
    """
    if not kv_pairs:
        raise InputError("encode_persona_kv: empty pair list")
    keys = np.array([p[0] for p in kv_pairs], dtype=np.intp)
    vals = np.array([p[1] for p in kv_pairs], dtype=np.intp)
    spks = np.array([p[2] for p in kv_pairs], dtype=np.intp)
    x = T.add(T.add(T.embedding(params[f"{prefix}.key"], keys),
                    T.embedding(params[f"{prefix}.val"], vals)),
              T.embedding(params[f"{prefix}.spk"], spks))
    return _run_layers(params, prefix, cfg, x, None, dropout_rng)


def reduce_candidate(word_embs: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Masked mean over word embeddings -> [1, d] sentence embedding."""
    l = word_embs.data.shape[0]
    if mask is None:
        mask = np.ones(l, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise InputError("reduce_candidate: all positions masked")
    weights = T.constant((mask / n)[None, :])
    return T.matmul(weights, word_embs)


# ---------------------------------------------------------------------------
# checkpoint IO
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, config: dict, params: dict[str, Tensor]) -> None:
    """Write atomically (temp file + rename)."""
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, t in params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", t.data.ndim))
            for extent in t.data.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(t.data.astype("<f8", copy=False).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (blen,) = struct.unpack("<I", fh.read(4))
        config = json.loads(fh.read(blen).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            arrays[name] = data.astype(np.float64)
    return config, arrays
