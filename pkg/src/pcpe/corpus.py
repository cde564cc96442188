"""Tokenization, vocabulary, dialogue ingestion, batching, synthetic data.

Dialogue files are JSONL: one object per line with fields `id`, `personas`
(list of strings, or list of {key, value, speaker} pairs), `history` (list
of strings), `query` (string), `candidates` (list of strings), `true_index`
(int). Those field names are a compatibility contract.

Two dialogue representations exist: `RawDialogue` mirrors the file (strings;
what `write_dialogues` emits and the synthetic generator produces) and
`Dialogue` is the encoded, token-id form the model consumes.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, InputError

PAD, UNK, SEP = 0, 1, 2
_RESERVED = ("<pad>", "<unk>", "<sep>")
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

N_NUMERIC_BUCKETS = 8


def split_text(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation boundaries; punctuation
    marks survive as their own tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocab:
    token_to_id: dict[str, int]
    min_freq: int = 1

    def __len__(self) -> int:
        return len(self.token_to_id)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    @property
    def tokens(self) -> list[str]:
        """All tokens in id order, reserved ids first."""
        inv = sorted(self.token_to_id.items(), key=lambda kv: kv[1])
        return [t for t, _ in inv]


def build_vocab(corpus: Iterable[str], min_freq: int = 1) -> Vocab:
    """Count tokens over text streams; keep those with count >= min_freq.

    Ids are contiguous from 0 with PAD/UNK/SEP reserved; kept tokens are
    ordered by frequency descending, ties broken lexicographically.
    """
    counts: dict[str, int] = {}
    empty = True
    for stream in corpus:
        empty = False
        for tok in split_text(stream):
            counts[tok] = counts.get(tok, 0) + 1
    if empty:
        raise InputError("build_vocab: empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq),
                  key=lambda t: (-counts[t], t))
    mapping = {t: i for i, t in enumerate(_RESERVED)}
    for t in kept:
        mapping[t] = len(mapping)
    return Vocab(mapping, min_freq)


def tokenize(text: str, vocab: Vocab, max_len: int, keep: str = "tail") -> list[int]:
    """Map text to token ids, truncating to max_len.

    keep="tail" preserves the end of the sequence (queries carry intent
    late); keep="head" preserves the start (candidates carry it early).
    """
    if max_len < 1:
        raise InputError(f"tokenize: max_len must be >= 1, got {max_len}")
    ids = [vocab.id_of(t) for t in split_text(text)]
    if len(ids) <= max_len:
        return ids
    return ids[-max_len:] if keep == "tail" else ids[:max_len]


def save_vocab(path: str, vocab: Vocab) -> None:
    """Plain-text vocab: one token per line, line number = id - 3."""
    with open(path, "w", encoding="utf-8") as fh:
        for tok in vocab.tokens[len(_RESERVED):]:
            fh.write(tok + "\n")


def load_vocab(path: str) -> Vocab:
    mapping = {t: i for i, t in enumerate(_RESERVED)}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            tok = line.rstrip("\n")
            if tok:
                mapping[tok] = len(mapping)
    return Vocab(mapping)


# ---------------------------------------------------------------------------
# key-value persona vocabulary
# ---------------------------------------------------------------------------

@dataclass
class KvVocab:
    """Maps KV persona pairs to (key_id, value_id).

    Numeric values are quantile-bucketized per key over the training set
    (N_NUMERIC_BUCKETS buckets); categorical values get a direct entry.
    Value ids are namespaced by key so distinct keys never collide. Id 0 of
    each table is reserved for unknowns.
    """

    key_to_id: dict[str, int] = field(default_factory=dict)
    value_to_id: dict[str, int] = field(default_factory=dict)
    numeric_edges: dict[str, list[float]] = field(default_factory=dict)

    @property
    def n_keys(self) -> int:
        return len(self.key_to_id) + 1

    @property
    def n_values(self) -> int:
        return len(self.value_to_id) + 1

    def encode_pair(self, key: str, value) -> tuple[int, int]:
        kid = self.key_to_id.get(key, 0)
        if key in self.numeric_edges and _as_number(value) is not None:
            bucket = int(np.searchsorted(self.numeric_edges[key], _as_number(value)))
            vid = self.value_to_id.get(f"{key}\x00#bucket{bucket}", 0)
        else:
            vid = self.value_to_id.get(f"{key}\x00{value}", 0)
        return kid, vid

    def to_dict(self) -> dict:
        return {"keys": self.key_to_id, "values": self.value_to_id,
                "numeric_edges": self.numeric_edges}

    @classmethod
    def from_dict(cls, d: dict) -> "KvVocab":
        return cls(dict(d["keys"]), dict(d["values"]),
                   {k: list(v) for k, v in d["numeric_edges"].items()})


def _as_number(value) -> float | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        return float(value)
    try:
        return float(str(value))
    except ValueError:
        return None


def build_kv_vocab(raw_dialogues: Sequence["RawDialogue"]) -> KvVocab:
    """Scan training personas; decide numeric vs categorical per key."""
    observed: dict[str, list] = {}
    for raw in raw_dialogues:
        for p in raw.personas:
            if isinstance(p, dict) and "key" in p:
                observed.setdefault(str(p["key"]), []).append(p["value"])
    kv = KvVocab()
    for key in sorted(observed):
        kv.key_to_id[key] = len(kv.key_to_id) + 1
        values = observed[key]
        numbers = [_as_number(v) for v in values]
        if values and all(n is not None for n in numbers):
            qs = np.linspace(0, 1, N_NUMERIC_BUCKETS + 1)[1:-1]
            edges = sorted(set(float(e) for e in np.quantile(numbers, qs)))
            kv.numeric_edges[key] = edges
            names = [f"{key}\x00#bucket{b}" for b in range(len(edges) + 1)]
        else:
            names = sorted({f"{key}\x00{v}" for v in values})
        for name in names:
            kv.value_to_id[name] = len(kv.value_to_id) + 1
    return kv


def flatten_kv_text(pairs: Sequence[dict]) -> str:
    """Render KV pairs as colon/comma-delimited text: "k1 : v1 , k2 : v2"."""
    return " , ".join(f"{p['key']} : {p['value']}" for p in pairs)


# ---------------------------------------------------------------------------
# dialogues
# ---------------------------------------------------------------------------

@dataclass
class RawDialogue:
    """String-level dialogue exactly as serialized in the JSONL file."""

    id: str
    personas: list  # list[str] | list[dict]
    history: list[str]
    query: str
    candidates: list[str]
    true_index: int


@dataclass
class PersonaEntry:
    """One persona unit: either a token sequence or a KV pair set.

    Exactly one of text_tokens / kv_pairs is set. For KV entries the pairs
    are (key_id, value_id, speaker_id) triples covering one speaker.
    """

    speaker: int
    text_tokens: list[int] | None = None
    kv_pairs: list[tuple[int, int, int]] | None = None

    def __post_init__(self):
        if (self.text_tokens is None) == (self.kv_pairs is None):
            raise DataError("PersonaEntry: exactly one of text/kv must be set")


@dataclass
class Dialogue:
    """Token-id dialogue ready for the model."""

    id: str
    personas: list[PersonaEntry]
    history: list[list[int]]
    query: list[int]
    candidates: list[list[int]]
    true_index: int
    # (speaker, flattened persona token ids) per speaker in file order, for
    # pre-fusion baselines and the text-routed persona mode
    persona_flat: list[tuple[int, list[int]]] = field(default_factory=list)


@dataclass
class Limits:
    l_q: int = 48
    l_p: int = 16
    l_c: int = 16


_REQUIRED_FIELDS = ("id", "personas", "history", "query", "candidates", "true_index")


def parse_dialogues(path: str) -> list[RawDialogue]:
    """Read string-level dialogues, reporting the line number on any defect."""
    out: list[RawDialogue] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON: {e}") from e
            for f in _REQUIRED_FIELDS:
                if f not in obj:
                    raise DataError(f"{path}:{lineno}: missing required field '{f}'")
            if not isinstance(obj["true_index"], int) or \
                    not 0 <= obj["true_index"] < len(obj["candidates"]):
                raise DataError(
                    f"{path}:{lineno}: true_index {obj['true_index']} outside "
                    f"candidate range [0, {len(obj['candidates'])})")
            out.append(RawDialogue(
                id=str(obj["id"]), personas=obj["personas"],
                history=list(obj["history"]), query=str(obj["query"]),
                candidates=[str(c) for c in obj["candidates"]],
                true_index=obj["true_index"]))
    return out


def write_dialogues(path: str, dialogues: Sequence[RawDialogue]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dialogues:
            fh.write(json.dumps({
                "id": d.id, "personas": d.personas, "history": d.history,
                "query": d.query, "candidates": d.candidates,
                "true_index": d.true_index}, sort_keys=True) + "\n")


def _persona_entries(raw: RawDialogue, schema: str, vocab: Vocab,
                     kv_vocab: KvVocab | None, limits: Limits) -> list[PersonaEntry]:
    if schema == "kv":
        if kv_vocab is None:
            raise ConfigError("kv schema requires a KvVocab")
        by_speaker: dict[int, list[tuple[int, int, int]]] = {}
        order: list[int] = []
        for p in raw.personas:
            if not isinstance(p, dict) or "key" not in p:
                raise DataError(f"dialogue {raw.id}: kv schema expects "
                                "{key, value, speaker} persona objects")
            spk = int(p.get("speaker", 0))
            if spk not in (0, 1):
                raise DataError(f"dialogue {raw.id}: speaker must be 0 or 1, got {spk}")
            kid, vid = kv_vocab.encode_pair(str(p["key"]), p["value"])
            if spk not in by_speaker:
                by_speaker[spk] = []
                order.append(spk)
            by_speaker[spk].append((kid, vid, spk))
        return [PersonaEntry(speaker=s, kv_pairs=by_speaker[s]) for s in order]
    entries = []
    for p in raw.personas:
        if isinstance(p, dict):
            text, spk = str(p.get("text", "")), int(p.get("speaker", 0))
        else:
            text, spk = str(p), 0
        toks = tokenize(text, vocab, limits.l_p, keep="head")
        if toks:
            entries.append(PersonaEntry(speaker=spk, text_tokens=toks))
    return entries


def _persona_flat(raw: RawDialogue, schema: str, vocab: Vocab,
                  limits: Limits) -> list[tuple[int, list[int]]]:
    """Per-speaker flattened persona text ids, in file first-appearance order.

    The file order is authoritative: KV attribute sets are unordered, so a
    writer is free to emit speakers and pairs in any order, and the flat
    (pre-fused) representation keeps whatever order the file used.
    """
    grouped: dict[int, list] = {}
    order: list[int] = []
    for p in raw.personas:
        spk = int(p.get("speaker", 0)) if isinstance(p, dict) else 0
        if spk not in grouped:
            grouped[spk] = []
            order.append(spk)
        grouped[spk].append(p)
    out: list[tuple[int, list[int]]] = []
    for spk in order:
        if schema == "kv":
            text = flatten_kv_text(grouped[spk])
        else:
            text = " ".join(str(p.get("text", "")) if isinstance(p, dict) else str(p)
                            for p in grouped[spk])
        out.append((spk, tokenize(text, vocab, limits.l_p * 4, keep="head")))
    return out


def encode_dialogue(raw: RawDialogue, schema: str, vocab: Vocab,
                    kv_vocab: KvVocab | None, limits: Limits) -> Dialogue:
    if not raw.candidates:
        raise DataError(f"dialogue {raw.id}: no candidates")
    return Dialogue(
        id=raw.id,
        personas=_persona_entries(raw, schema, vocab, kv_vocab, limits),
        history=[tokenize(h, vocab, limits.l_q, keep="tail") for h in raw.history],
        query=tokenize(raw.query, vocab, limits.l_q, keep="tail"),
        candidates=[tokenize(c, vocab, limits.l_c, keep="head") for c in raw.candidates],
        true_index=raw.true_index,
        persona_flat=_persona_flat(raw, schema, vocab, limits),
    )


def load_dialogues(path: str, schema: str, vocab: Vocab,
                   kv_vocab: KvVocab | None = None,
                   limits: Limits | None = None) -> list[Dialogue]:
    limits = limits or Limits()
    return [encode_dialogue(r, schema, vocab, kv_vocab, limits)
            for r in parse_dialogues(path)]


def merged_query_ids(dialogue: Dialogue, l_q: int, *,
                     prefuse_personas: bool = False) -> list[int]:
    """History turns and query joined with SEP, newest last, tail-truncated.

    With prefuse_personas the flattened persona blocks are prepended (the
    single-stream baseline convention); everything is one text input then.
    """
    parts: list[list[int]] = []
    if prefuse_personas:
        parts.extend(toks for _, toks in dialogue.persona_flat if toks)
    parts.extend(h for h in dialogue.history if h)
    parts.append(dialogue.query)
    merged: list[int] = []
    for i, p in enumerate(parts):
        if i:
            merged.append(SEP)
        merged.extend(p)
    return merged[-l_q:]


# ---------------------------------------------------------------------------
# synthetic persona-determined corpus
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Knobs for the synthetic KV corpus.

    signal_strength is the probability that the true response lexically
    carries the responder's value of the designated attribute (attribute 0).
    Queries list every possible designated value (a fixed "menu"), so they
    are attribute-neutral: personas are the only disambiguating signal.
    """

    n_dialogues: int = 4000
    n_valid: int = 500
    n_attributes: int = 3
    n_values_per_attribute: int = 20
    vocab_size: int = 40
    n_candidates: int = 20
    seed: int = 0
    signal_strength: float = 0.95

    def __post_init__(self):
        for name in ("n_dialogues", "n_valid", "n_attributes",
                     "n_values_per_attribute", "vocab_size", "n_candidates"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"SynthSpec.{name} must be positive")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ConfigError("SynthSpec.signal_strength must be in [0, 1]")


def _value_token(attr: int, idx: int) -> str:
    return f"v{attr}_{idx}"


def generate_synthetic(spec: SynthSpec) -> tuple[list[RawDialogue], list[RawDialogue]]:
    """Build (train, valid) string-level corpora.

    Construction per dialogue:
    - two speakers; each gets one KV pair per attribute. Speaker 1 responds.
    - the query is a fixed menu naming all designated-attribute values, plus
      a couple of random filler words and sometimes a filler history turn.
    - with probability signal_strength the true candidate names speaker 1's
      designated value; otherwise it names a uniformly random OTHER value,
      the same distribution distractors are drawn from, so no candidate
      feature identifies it.
    - distractors never name speaker 1's designated value; when enough
      values exist they are sampled without replacement (all distinct).
    """
    rng = np.random.default_rng(spec.seed)
    fillers = [f"w{i}" for i in range(spec.vocab_size)]
    menu = " ".join(_value_token(0, i) for i in range(spec.n_values_per_attribute))

    def one(split: str, number: int) -> RawDialogue:
        values = np.empty((2, spec.n_attributes), dtype=int)
        groups: list[list[dict]] = [[], []]
        for spk in range(2):
            for attr in range(spec.n_attributes):
                values[spk, attr] = rng.integers(spec.n_values_per_attribute)
                groups[spk].append({"key": f"k{attr}",
                                    "value": _value_token(attr, values[spk, attr]),
                                    "speaker": spk})
            rng.shuffle(groups[spk])
        # attribute sets are unordered: emit speakers and pairs in random
        # order so nothing about file position identifies the responder
        personas = []
        for spk in rng.permutation(2):
            personas.extend(groups[spk])
        true_value = int(values[1, 0])
        others = [v for v in range(spec.n_values_per_attribute) if v != true_value]
        n_distract = spec.n_candidates - 1
        if len(others) >= n_distract:
            distract = rng.choice(others, size=n_distract, replace=False)
        else:
            distract = rng.choice(others, size=n_distract, replace=True)
        shown = true_value if rng.random() < spec.signal_strength \
            else int(rng.choice(others))

        def sentence(value: int) -> str:
            tail = " ".join(rng.choice(fillers, size=3))
            return f"i would pick {_value_token(0, value)} since {tail}"

        candidates = [sentence(shown)] + [sentence(int(v)) for v in distract]
        order = rng.permutation(spec.n_candidates)
        candidates = [candidates[i] for i in order]
        true_index = int(np.where(order == 0)[0][0])
        history = []
        if rng.random() < 0.5:
            history.append(" ".join(rng.choice(fillers, size=4)))
        query = " ".join(rng.choice(fillers, size=2)) + f" pick one : {menu} ?"
        return RawDialogue(id=f"{split}-{number:06d}", personas=personas,
                           history=history, query=query,
                           candidates=candidates, true_index=true_index)

    train = [one("train", i) for i in range(spec.n_dialogues)]
    valid = [one("valid", i) for i in range(spec.n_valid)]
    return train, valid


def persona_match_oracle(raw: RawDialogue) -> int:
    """Rule-based reference: pick the first candidate containing the
    responder's designated-attribute value token; first candidate if none."""
    value = None
    for p in raw.personas:
        if isinstance(p, dict) and p.get("speaker") == 1 and p.get("key") == "k0":
            value = str(p["value"])
    if value is None:
        return 0
    for i, c in enumerate(raw.candidates):
        if value in c.split():
            return i
    return 0


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Padded per-batch arrays plus per-row persona entries.

    Training batches share a candidate list (each row's true response);
    labels[r] == r. Validation batches keep each row's own candidate set.
    """

    dialogues: list[Dialogue]
    query_ids: np.ndarray          # [B, Lq]
    query_mask: np.ndarray         # [B, Lq] bool
    personas: list[list[PersonaEntry]] | None
    cand_ids: np.ndarray | None    # training: [B, Lc]
    cand_mask: np.ndarray | None
    labels: np.ndarray | None
    training: bool

    @property
    def size(self) -> int:
        return len(self.dialogues)


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(1, max((len(s) for s in seqs), default=1))
    ids = np.full((len(seqs), width), PAD, dtype=np.intp)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


def pad_candidates(dialogue: Dialogue) -> tuple[np.ndarray, np.ndarray]:
    return _pad(dialogue.candidates)


def select_personas(dialogue: Dialogue, variant: str) -> list[PersonaEntry] | None:
    """Pick the persona representation a model variant consumes."""
    if variant == "none":
        return None
    if variant == "flat-text":
        return [PersonaEntry(speaker=s, text_tokens=toks)
                for s, toks in dialogue.persona_flat if toks]
    return dialogue.personas


def make_batches(dialogues: Sequence[Dialogue], batch_size: int,
                 shuffle_seed: int | None, *, l_q: int, training: bool,
                 persona_mode: str = "entries",
                 prefuse_personas: bool = False) -> list[Batch]:
    """Partition dialogues into batches.

    persona_mode: "entries" passes encoded persona entries through;
    "flat-text" swaps in the per-speaker flattened text entries (persona
    text routed through the text encoder); "none" drops personas entirely.
    prefuse_personas prepends the flattened personas to the query text (the
    single-stream baseline convention).
    """
    if training and batch_size < 2:
        raise ConfigError("training needs batch_size >= 2 for in-batch negatives")
    order = list(range(len(dialogues)))
    if shuffle_seed is not None:
        np.random.default_rng(shuffle_seed).shuffle(order)
    batches = []
    for lo in range(0, len(order), batch_size):
        chunk = [dialogues[i] for i in order[lo:lo + batch_size]]
        if training and len(chunk) < 2:
            continue  # a single-row remainder has no negatives
        qids, qmask = _pad([merged_query_ids(d, l_q, prefuse_personas=prefuse_personas)
                            for d in chunk])
        if persona_mode == "none":
            personas = None
        else:
            personas = [select_personas(d, persona_mode) for d in chunk]
        if training:
            cids, cmask = _pad([d.candidates[d.true_index] for d in chunk])
            labels = np.arange(len(chunk))
        else:
            cids = cmask = labels = None
        batches.append(Batch(chunk, qids, qmask, personas, cids, cmask,
                             labels, training))
    return batches
