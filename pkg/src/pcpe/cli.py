"""Command-line entry point: train / eval / score / cache / synth.

Configuration is a flat `key = value` text file whose keys mirror RunConfig
field names; command-line flags override file values. Every run logs its
fully resolved configuration as its first record. Exit codes: 0 ok,
2 config error, 3 data error, 4 numeric abort, 5 cache error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import cache as cache_mod
from . import corpus as Cp
from . import fusion as F
from . import metrics as Me
from . import model as Mo
from .encoders import EncoderConfig
from .errors import ConfigError, DataError, NumericError, PcpeError
from .optim import Adam

log = logging.getLogger("pcpe")


@dataclass
class RunConfig:
    data: str = ""
    valid_data: str = ""
    schema: str = "kv"
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 4
    max_positions: int = 96
    dropout: float = 0.1
    share_t2_t3: bool = True
    share_all: bool = False
    m: int = 0
    fusion: str = "s-attn"
    baseline: str = "none"
    withhold_personas: bool = False
    ablation: str = "none"
    l_q: int = 48
    l_p: int = 16
    l_c: int = 16
    min_freq: int = 1
    batch_size: int = 32
    epochs: int = 10
    eval_every_steps: int = 0       # 0: evaluate at each epoch end
    eval_subset: int = 200          # dialogues used for periodic validation
    patience: int = 0               # 0: off; else stop after n flat evals
    early_stop_hr1: float = 0.0     # 0: off; else stop once reached
    lr: float = 1e-3
    seed: int = 0
    log_every: int = 25
    checkpoint: str = "model.ckpt"
    cache: str = ""
    out_dir: str = ""
    strict: bool = False


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, text: str, target_type) -> object:
    text = text.strip()
    if target_type is bool:
        low = text.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"config key {name}: expected a boolean, got {text!r}")
    try:
        return target_type(text)
    except ValueError as e:
        raise ConfigError(f"config key {name}: {e}") from e


def parse_config_file(path: str) -> dict:
    fields = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    types = {n: (bool if t == "bool" else int if t == "int"
                 else float if t == "float" else str)
             for n, t in fields.items()}
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = _coerce(key, value, types[key])
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    overrides = {
        "data": args.data, "valid_data": getattr(args, "valid_data", None),
        "schema": args.schema, "m": args.m, "fusion": args.fusion,
        "baseline": args.baseline, "batch_size": getattr(args, "batch_size", None),
        "epochs": getattr(args, "epochs", None), "seed": args.seed,
        "checkpoint": args.checkpoint, "cache": args.cache,
        "out_dir": getattr(args, "out_dir", None),
    }
    for key, val in overrides.items():
        if val is not None:
            values[key] = val
    if getattr(args, "strict", False):
        values["strict"] = True
    cfg = RunConfig(**values)
    if cfg.schema in ("text_persona", "kv_persona"):
        cfg.schema = cfg.schema.split("_", 1)[0]
    if cfg.schema not in ("text", "kv"):
        raise ConfigError(f"schema must be 'text' or 'kv', got {cfg.schema!r}")
    return cfg


def _echo_config(cfg: RunConfig, mode: str) -> None:
    resolved = {"mode": mode, **dataclasses.asdict(cfg)}
    log.info("config %s", json.dumps(resolved, sort_keys=True))


def _model_config(run: RunConfig, vocab: Cp.Vocab,
                  kv: Cp.KvVocab | None) -> Mo.ModelConfig:
    enc = EncoderConfig(d=run.d, n_layers=run.n_layers, n_heads=run.n_heads,
                        ffn_mult=run.ffn_mult, max_positions=run.max_positions,
                        dropout_rate=run.dropout, share_t2_t3=run.share_t2_t3,
                        share_all=run.share_all)
    return Mo.ModelConfig(encoder=enc, schema=run.schema, m=run.m,
                          fusion=run.fusion, baseline=run.baseline,
                          withhold_personas=run.withhold_personas,
                          l_q=run.l_q, l_p=run.l_p, l_c=run.l_c,
                          vocab_size=len(vocab),
                          n_keys=kv.n_keys if kv else 0,
                          n_values=kv.n_values if kv else 0,
                          ablation=run.ablation).validate()


def _train_text_streams(raws: list[Cp.RawDialogue], schema: str):
    for r in raws:
        yield r.query
        yield from r.history
        yield from r.candidates
        if schema == "kv":
            yield Cp.flatten_kv_text([p for p in r.personas if isinstance(p, dict)])
        else:
            for p in r.personas:
                yield str(p.get("text", "")) if isinstance(p, dict) else str(p)


def _load_with_vocab(run: RunConfig):
    raws = Cp.parse_dialogues(run.data)
    if not raws:
        raise DataError(f"{run.data}: no dialogues")
    vocab = Cp.build_vocab(_train_text_streams(raws, run.schema), run.min_freq)
    kv = Cp.build_kv_vocab(raws) if run.schema == "kv" else None
    limits = Cp.Limits(l_q=run.l_q, l_p=run.l_p, l_c=run.l_c)
    train = [Cp.encode_dialogue(r, run.schema, vocab, kv, limits) for r in raws]
    valid = None
    if run.valid_data:
        valid = Cp.load_dialogues(run.valid_data, run.schema, vocab, kv, limits)
    return vocab, kv, train, valid


def _extras(run: RunConfig, vocab: Cp.Vocab, kv: Cp.KvVocab | None) -> dict:
    return {"vocab_tokens": vocab.tokens[3:],
            "kv_vocab": kv.to_dict() if kv else None,
            "run": dataclasses.asdict(run)}


def _restore(checkpoint: str):
    cfg, params, extras = Mo.load_model(checkpoint)
    mapping = {t: i for i, t in enumerate(("<pad>", "<unk>", "<sep>"))}
    for tok in extras["vocab_tokens"]:
        mapping[tok] = len(mapping)
    vocab = Cp.Vocab(mapping)
    kv = Cp.KvVocab.from_dict(extras["kv_vocab"]) if extras.get("kv_vocab") else None
    return cfg, params, extras, vocab, kv


def _write_report_outputs(report: Me.MetricReport, out_dir: str, stem: str) -> None:
    from . import plots
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{stem}.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["hr1", "hr5", "mrr", "f1", "bleu4", "n_examples"])
        writer.writerow([report.hr1, report.hr5, report.mrr, report.f1,
                         report.bleu4, report.n_examples])
    with open(os.path.join(out_dir, f"{stem}.json"), "w") as fh:
        fh.write(report.to_json() + "\n")
    plots.save_metric_bars(report, os.path.join(out_dir, f"{stem}.png"))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(run: RunConfig) -> int:
    _echo_config(run, "train")
    if not run.data:
        raise ConfigError("train: --data is required")
    vocab, kv, train, valid = _load_with_vocab(run)
    cfg = _model_config(run, vocab, kv)
    rng = np.random.default_rng(run.seed)
    params = Mo.build_params(cfg, rng)
    extras = _extras(run, vocab, kv)
    opt = Adam(lr=run.lr)

    log_rows: list[dict] = []
    best_hr1 = -1.0
    flat_evals = 0
    step = 0
    stop = False

    def run_eval() -> Me.MetricReport | None:
        nonlocal best_hr1, flat_evals, stop
        if valid is None:
            return None
        subset = valid[:run.eval_subset] if run.eval_subset else valid
        report = Me.evaluate(subset, params, cfg)
        log.info("eval step=%d %s", step, report.to_json())
        log_rows.append({"step": step, **json.loads(report.to_json())})
        if report.hr1 > best_hr1:
            best_hr1 = report.hr1
            flat_evals = 0
            Mo.save_model(run.checkpoint, cfg, params, extras)
            Cp.save_vocab(run.checkpoint + ".vocab", vocab)
            log.info("checkpoint step=%d hr1=%.4f -> %s", step, best_hr1,
                     run.checkpoint)
        else:
            flat_evals += 1
        if run.early_stop_hr1 and report.hr1 >= run.early_stop_hr1:
            log.info("early stop: hr1 %.4f reached target %.4f", report.hr1,
                     run.early_stop_hr1)
            stop = True
        if run.patience and flat_evals >= run.patience:
            log.info("early stop: no hr1 improvement in %d evals", flat_evals)
            stop = True
        return report

    if run.epochs == 0:
        Mo.save_model(run.checkpoint, cfg, params, extras)
        Cp.save_vocab(run.checkpoint + ".vocab", vocab)
        run_eval()
    try:
        for epoch in range(run.epochs):
            batches = Cp.make_batches(train, run.batch_size,
                                      run.seed * 100003 + epoch,
                                      l_q=run.l_q, training=True,
                                      persona_mode=cfg.persona_variant,
                                      prefuse_personas=cfg.prefuse_personas)
            for batch in batches:
                loss = F.train_step(batch, params, cfg, opt, rng)
                step += 1
                if step % run.log_every == 0 or step == 1:
                    log.info("step=%d epoch=%d loss=%.6f lr=%.2e", step, epoch,
                             loss, run.lr)
                log_rows.append({"step": step, "epoch": epoch, "loss": loss,
                                 "lr": run.lr})
                if run.eval_every_steps and step % run.eval_every_steps == 0:
                    run_eval()
                if stop:
                    break
            if not run.eval_every_steps and not stop:
                run_eval()
            if stop:
                break
    except NumericError as e:
        _flush_training_outputs(run, log_rows)
        raise NumericError(f"aborted at step {step}: {e}; last good "
                           f"checkpoint kept at {run.checkpoint}") from e

    if best_hr1 < 0:  # no validation ran: persist the final weights
        Mo.save_model(run.checkpoint, cfg, params, extras)
        Cp.save_vocab(run.checkpoint + ".vocab", vocab)

    final = None
    if valid is not None:
        cfg, params, extras, vocab, kv = _restore(run.checkpoint)
        final = Me.evaluate(valid, params, cfg, strict=run.strict)
        log.info("final %s", final.to_json())
        print(final.to_json())
        print(final.table())
    _flush_training_outputs(run, log_rows, final)
    return 0


def _flush_training_outputs(run: RunConfig, log_rows: list[dict],
                            final: Me.MetricReport | None = None) -> None:
    if not run.out_dir:
        return
    from . import plots
    os.makedirs(run.out_dir, exist_ok=True)
    columns = ["step", "epoch", "loss", "lr", "hr1", "hr5", "mrr", "f1",
               "bleu4", "n_examples"]
    with open(os.path.join(run.out_dir, "training_log.csv"), "w",
              newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(log_rows)
    plots.save_training_curves(log_rows,
                               os.path.join(run.out_dir, "loss_curve.png"),
                               os.path.join(run.out_dir, "val_metrics.png"))
    if final is not None:
        _write_report_outputs(final, run.out_dir, "metrics")


def cmd_eval(run: RunConfig) -> int:
    _echo_config(run, "eval")
    cfg, params, extras, vocab, kv = _restore(run.checkpoint)
    limits = Cp.Limits(l_q=cfg.l_q, l_p=cfg.l_p, l_c=cfg.l_c)
    data_path = run.valid_data or run.data
    if not data_path:
        raise ConfigError("eval: --data is required")
    dialogues = Cp.load_dialogues(data_path, cfg.schema, vocab, kv, limits)
    cache = cache_mod.load_cache(run.cache) if run.cache else None
    report = Me.evaluate(dialogues, params, cfg, strict=run.strict, cache=cache)
    print(report.to_json())
    print(report.table())
    if run.out_dir:
        _write_report_outputs(report, run.out_dir, "metrics")
    return 0


def cmd_score(run: RunConfig) -> int:
    _echo_config(run, "score")
    cfg, params, extras, vocab, kv = _restore(run.checkpoint)
    limits = Cp.Limits(l_q=cfg.l_q, l_p=cfg.l_p, l_c=cfg.l_c)
    text = sys.stdin.read().strip()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise DataError(f"stdin: invalid dialogue JSON at position {e.pos}: "
                        f"{e.msg}") from e
    for fname in ("id", "personas", "history", "query", "candidates",
                  "true_index"):
        if fname not in obj:
            if fname == "true_index":
                obj["true_index"] = 0  # scoring does not need the label
            else:
                raise DataError(f"stdin: missing required field '{fname}'")
    raw = Cp.RawDialogue(id=str(obj["id"]), personas=obj["personas"],
                         history=list(obj["history"]), query=str(obj["query"]),
                         candidates=[str(c) for c in obj["candidates"]],
                         true_index=int(obj["true_index"]))
    dialogue = Cp.encode_dialogue(raw, cfg.schema, vocab, kv, limits)
    if run.cache:
        cache = cache_mod.load_cache(run.cache)
        row = cache_mod.score_with_cache(dialogue, cache, params, cfg,
                                         strict=run.strict)
    else:
        row = F.rank(dialogue, params, cfg)
    out = [{"candidate_index": i, "logit": row.logits[i], "score": row.scores[i]}
           for i in row.ranking]
    print(json.dumps(out))
    return 0


def cmd_cache(run: RunConfig) -> int:
    _echo_config(run, "cache")
    if not run.cache:
        raise ConfigError("cache: --cache output path is required")
    cfg, params, extras, vocab, kv = _restore(run.checkpoint)
    limits = Cp.Limits(l_q=cfg.l_q, l_p=cfg.l_p, l_c=cfg.l_c)
    data_path = run.valid_data or run.data
    if not data_path:
        raise ConfigError("cache: --data is required")
    dialogues = Cp.load_dialogues(data_path, cfg.schema, vocab, kv, limits)
    built = cache_mod.caches_from_dialogues(dialogues, params, cfg)
    cache_mod.save_cache(run.cache, built)
    log.info("cache: %d entries -> %s", len(built), run.cache)
    print(json.dumps({"entries": len(built), "path": run.cache}))
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    spec = Cp.SynthSpec(n_dialogues=args.n_dialogues, n_valid=args.n_valid,
                        n_attributes=args.n_attributes,
                        n_values_per_attribute=args.n_values,
                        vocab_size=args.synth_vocab,
                        n_candidates=args.n_candidates, seed=args.seed or 0,
                        signal_strength=args.signal)
    log.info("config %s", json.dumps({"mode": "synth",
                                      **dataclasses.asdict(spec)}, sort_keys=True))
    train, valid = Cp.generate_synthetic(spec)
    Cp.write_dialogues(args.out_train, train)
    Cp.write_dialogues(args.out_valid, valid)
    oracle_hr1 = float(np.mean([Cp.persona_match_oracle(d) == d.true_index
                                for d in valid]))
    print(json.dumps({"train": args.out_train, "n_train": len(train),
                      "valid": args.out_valid, "n_valid": len(valid),
                      "oracle_hr1": oracle_hr1}))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--data", help="training/eval dialogue JSONL")
    p.add_argument("--valid-data", dest="valid_data", help="validation JSONL")
    p.add_argument("--schema", choices=["text", "kv"])
    p.add_argument("--m", type=int, help="number of trainable codes")
    p.add_argument("--fusion", choices=list(Mo.FUSIONS))
    p.add_argument("--baseline", choices=list(Mo.BASELINES))
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--cache", help="embedding cache path")
    p.add_argument("--out-dir", dest="out_dir",
                   help="directory for CSV logs, reports and figures")
    p.add_argument("--strict", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcpe",
        description="persona-conditioned multi-stream response ranking")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, descr in (("train", "train a model"),
                        ("eval", "evaluate a checkpoint"),
                        ("score", "rank one dialogue from stdin"),
                        ("cache", "precompute candidate/persona embeddings")):
        _add_common(sub.add_parser(name, help=descr))
    sp = sub.add_parser("synth", help="generate a synthetic corpus")
    sp.add_argument("--n-dialogues", type=int, default=4000)
    sp.add_argument("--n-valid", type=int, default=500)
    sp.add_argument("--n-attributes", type=int, default=3)
    sp.add_argument("--n-values", type=int, default=20)
    sp.add_argument("--synth-vocab", type=int, default=40)
    sp.add_argument("--n-candidates", type=int, default=20)
    sp.add_argument("--signal", type=float, default=0.95)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-train", required=True)
    sp.add_argument("--out-valid", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            return cmd_synth(args)
        run = resolve_config(args)
        handler = {"train": cmd_train, "eval": cmd_eval, "score": cmd_score,
                   "cache": cmd_cache}[args.command]
        return handler(run)
    except PcpeError as e:
        log.error("%s: %s", type(e).__name__, e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
