"""Model-level configuration, parameter construction and persistence."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import encoders
from . import tensor as T
from .encoders import EncoderConfig
from .errors import ConfigError, DataError
from .tensor import Tensor

FUSIONS = ("s-attn", "m-attn", "col-fuse")
BASELINES = ("none", "poly", "pcpe-text")
SCHEMAS = ("kv", "text")
ABLATIONS = ("none", "margin", "mean-fuse", "sum-fuse", "concat-fuse")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    schema: str = "kv"
    m: int = 0
    fusion: str = "s-attn"
    baseline: str = "none"
    withhold_personas: bool = False
    l_q: int = 48
    l_p: int = 16
    l_c: int = 16
    vocab_size: int = 0
    n_keys: int = 0
    n_values: int = 0
    ablation: str = "none"

    def validate(self) -> "ModelConfig":
        self.encoder.validate()
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        if self.schema not in SCHEMAS:
            raise ConfigError(f"schema must be one of {SCHEMAS}, got {self.schema!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        if self.m < 0:
            raise ConfigError("m must be >= 0")
        if self.baseline == "poly" and self.m < 1:
            raise ConfigError("the poly baseline requires m >= 1")
        if self.vocab_size < 3:
            raise ConfigError("vocab_size must cover the reserved ids")
        need = max(self.l_q, self.l_c)
        if self.persona_variant == "text":
            need = max(need, self.l_p)
        elif self.persona_variant == "flat-text":
            need = max(need, self.l_p * 4)
        if self.encoder.max_positions < need:
            raise ConfigError(f"max_positions {self.encoder.max_positions} too "
                              f"small for sequence limits (need {need})")
        if self.schema == "kv" and self.persona_variant == "kv" and \
                (self.n_keys < 1 or self.n_values < 1):
            raise ConfigError("kv schema requires key/value vocabulary sizes")
        if self.encoder.share_all and self.persona_variant == "kv":
            raise ConfigError("share_all needs text-routed personas; a KV "
                              "persona encoder cannot share text tables")
        return self

    @property
    def uses_personas(self) -> bool:
        return self.baseline != "poly"

    @property
    def persona_variant(self) -> str:
        """How persona entries reach the model: "kv" pairs, "text" entries,
        or "flat-text" (KV flattened to text, routed through the text T1)."""
        if not self.uses_personas:
            return "none"
        if self.baseline == "pcpe-text":
            return "flat-text"
        return self.schema if self.schema == "kv" else "text"

    @property
    def prefuse_personas(self) -> bool:
        """Poly pre-fuses persona text into the query unless withheld."""
        return self.baseline == "poly" and not self.withhold_personas

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = asdict(self.encoder)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)


def prefixes(cfg: ModelConfig) -> dict[str, str]:
    """Map encoder roles to parameter prefixes, honouring sharing flags."""
    enc = cfg.encoder
    text_t1 = cfg.persona_variant in ("text", "flat-text")
    if enc.share_all and text_t1:
        return {"t1": "enc", "t2": "enc", "t3": "enc"}
    qc = {"t2": "qc", "t3": "qc"} if enc.share_t2_t3 else {"t2": "t2", "t3": "t3"}
    out = dict(qc)
    if cfg.uses_personas:
        out["t1"] = "t1"
    return out


def build_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    cfg.validate()
    params: dict[str, Tensor] = {}
    pfx = prefixes(cfg)
    done: set[str] = set()
    text_t1 = cfg.persona_variant in ("text", "flat-text")
    for role in ("t2", "t3", "t1"):
        p = pfx.get(role)
        if p is None or p in done:
            continue
        done.add(p)
        if role == "t1" and not text_t1:
            encoders.init_kv_encoder(params, p, cfg.n_keys, cfg.n_values,
                                     cfg.encoder, rng)
        else:
            segments = role == "t1" or (cfg.encoder.share_all and text_t1)
            encoders.init_text_encoder(params, p, cfg.vocab_size, cfg.encoder,
                                       rng, segments=segments)
    if cfg.uses_personas:
        params["wp"] = T.parameter(rng.normal(0.0, encoders.INIT_STD,
                                              size=(cfg.encoder.d, 1)))
    if cfg.m > 0:
        params["codes"] = T.parameter(rng.normal(0.0, encoders.INIT_STD,
                                                 size=(cfg.m, cfg.encoder.d)))
    if cfg.fusion == "s-attn" and cfg.m > 0 and cfg.uses_personas:
        params["wf"] = T.parameter(rng.normal(0.0, encoders.INIT_STD,
                                              size=(cfg.encoder.d, 1)))
    if cfg.ablation == "concat-fuse" and cfg.m > 0 and cfg.uses_personas:
        params["concat_proj"] = T.parameter(
            rng.normal(0.0, encoders.INIT_STD, size=(2 * cfg.encoder.d, cfg.encoder.d)))
    return params


def fingerprint(cfg: ModelConfig, params: dict[str, Tensor]) -> bytes:
    """32-byte digest binding the exact weights to the exact config."""
    h = hashlib.sha256()
    h.update(json.dumps(cfg.to_dict(), sort_keys=True).encode())
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].data.astype("<f8", copy=False).tobytes())
    return h.digest()


def save_model(path: str, cfg: ModelConfig, params: dict[str, Tensor],
               extras: dict | None = None) -> None:
    config = {"model": cfg.to_dict(), "extras": extras or {}}
    encoders.save_checkpoint(path, config, params)


def load_model(path: str) -> tuple[ModelConfig, dict[str, Tensor], dict]:
    config, arrays = encoders.load_checkpoint(path)
    cfg = ModelConfig.from_dict(config["model"])
    expected = set(build_params(cfg, np.random.default_rng(0)))
    got = set(arrays)
    if expected != got:
        missing = sorted(expected - got)
        surplus = sorted(got - expected)
        raise DataError(f"{path}: parameter names do not match the stored "
                        f"config (missing {missing[:4]}, unexpected {surplus[:4]})")
    params = {name: T.parameter(arr) for name, arr in arrays.items()}
    # re-tie shared prefixes: identical names are identical objects already
    return cfg, params, config.get("extras", {})
