"""Shared helpers: tiny synthetic setups and hand-built micro-batches."""

import numpy as np
import pytest

from pcpe import corpus as C
from pcpe import encoders as E
from pcpe import model as M


def make_tiny(n_train=8, n_valid=6, m=2, fusion="s-attn", baseline="none",
              n_layers=1, d=8, heads=2, seed=0, dropout=0.0, n_candidates=20,
              ablation="none", n_values=6, withhold=False):
    """Small synthetic KV setup: (cfg, params, vocab, kv, train, valid)."""
    spec = C.SynthSpec(n_dialogues=n_train, n_valid=n_valid, n_attributes=2,
                       n_values_per_attribute=n_values, vocab_size=10,
                       n_candidates=n_candidates, seed=seed)
    train_raw, valid_raw = C.generate_synthetic(spec)
    text = [d.query for d in train_raw] \
        + [c for d in train_raw for c in d.candidates] \
        + [C.flatten_kv_text(d.personas) for d in train_raw]
    vocab = C.build_vocab(text, min_freq=1)
    kv = C.build_kv_vocab(train_raw)
    limits = C.Limits(l_q=32, l_p=12, l_c=12)
    train = [C.encode_dialogue(r, "kv", vocab, kv, limits) for r in train_raw]
    valid = [C.encode_dialogue(r, "kv", vocab, kv, limits) for r in valid_raw]
    ecfg = E.EncoderConfig(d=d, n_layers=n_layers, n_heads=heads, ffn_mult=2,
                           max_positions=64, dropout_rate=dropout)
    cfg = M.ModelConfig(encoder=ecfg, schema="kv", m=m, fusion=fusion,
                        baseline=baseline, withhold_personas=withhold,
                        l_q=limits.l_q, l_p=limits.l_p, l_c=limits.l_c,
                        vocab_size=len(vocab), n_keys=kv.n_keys,
                        n_values=kv.n_values, ablation=ablation)
    params = M.build_params(cfg, np.random.default_rng(seed))
    return cfg, params, vocab, kv, train, valid


def micro_batch(cfg, seed=0, B=3, l=4):
    """Hand-built training batch at exact tiny dims (l_q = l_p = l_c = l)."""
    rng = np.random.default_rng(seed)
    dialogues = []
    for i in range(B):
        if cfg.persona_variant == "kv":
            personas = [C.PersonaEntry(speaker=s, kv_pairs=[
                (int(rng.integers(1, cfg.n_keys)), int(rng.integers(1, cfg.n_values)), s)
                for _ in range(2)]) for s in range(2)]
        else:
            personas = [C.PersonaEntry(speaker=s, text_tokens=rng.integers(
                3, cfg.vocab_size, size=l).tolist()) for s in range(2)]
        d = C.Dialogue(
            id=f"micro-{i}", personas=personas, history=[],
            query=rng.integers(3, cfg.vocab_size, size=l).tolist(),
            candidates=[rng.integers(3, cfg.vocab_size, size=l).tolist()
                        for _ in range(3)],
            true_index=0,
            persona_flat=[(s, rng.integers(3, cfg.vocab_size, size=l).tolist())
                          for s in range(2)])
        dialogues.append(d)
    return C.make_batches(dialogues, B, None, l_q=cfg.l_q, training=True,
                          persona_mode=cfg.persona_variant,
                          prefuse_personas=cfg.prefuse_personas)[0]


def full_forward_gradcheck(cfg, params, batch, *, max_per_param=None, seed=0):
    """Worst relative error between tape gradients and central differences.

    Every parameter is checked; parameters larger than max_per_param are
    checked at a seeded random subset of elements (the backward formula of
    an op is uniform across elements, so sampling still exercises it).
    """
    from pcpe import fusion as F
    from pcpe import tensor as T

    def loss_fn():
        return F.batch_loss(batch, params, cfg)

    with T.Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(params):
        p = params[name]
        analytic = p.grad if p.grad is not None else np.zeros(p.data.shape)
        size = p.data.size
        if max_per_param is None or size <= max_per_param:
            idxs = np.arange(size)
        else:
            idxs = np.sort(rng.choice(size, size=max_per_param, replace=False))
        numeric = T.fd_gradients_at(loss_fn, p, idxs)
        worst = max(worst, T.max_rel_error([analytic.reshape(-1)[idxs]], [numeric]))
    for p in params.values():
        p.zero_grad()
    return worst


def gradcheck_cfg(m, fusion, schema="kv", seed=0):
    """Smallest config that exercises every sublayer: tiny tables keep the
    element-by-element finite-difference sweep fast."""
    ecfg = E.EncoderConfig(d=8, n_layers=1, n_heads=2, ffn_mult=2,
                           max_positions=8, dropout_rate=0.0)
    cfg = M.ModelConfig(encoder=ecfg, schema=schema, m=m, fusion=fusion,
                        l_q=8, l_p=4, l_c=4, vocab_size=12,
                        n_keys=3, n_values=8)
    params = M.build_params(cfg, np.random.default_rng(seed))
    return cfg, params


@pytest.fixture(scope="session")
def tiny_kv():
    return make_tiny()
