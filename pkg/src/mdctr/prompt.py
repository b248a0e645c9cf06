"""Interaction records -> prompt text -> fixed-length token ids."""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ValidationError

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("[PAD]", "[UNK]", "[BOS]", "[EOS]")
PROMPT_MODES = ("full", "id_name", "id_only")
MAX_HISTORY = 2

_WORD = re.compile(r"[^\W_]+")


@dataclass
class InteractionRecord:
    domain: str
    user_id: str
    history: list[str]
    item_id: str
    title: str
    brand: str
    price: str
    label: int

    def validate(self, max_history: int | None = None) -> None:
        for name in ("domain", "user_id", "item_id", "title", "brand", "price"):
            value = getattr(self, name)
            if value is None or (isinstance(value, str) and not value.strip()):
                raise ValidationError(f"record is missing mandatory field {name!r}")
        if self.label not in (0, 1):
            raise ValidationError(f"label must be 0 or 1, got {self.label!r}")
        if max_history is not None and len(self.history) > max_history:
            raise ValidationError(f"click history has {len(self.history)} entries, limit is {max_history}")

    def to_json(self) -> dict:
        return {
            "domain": self.domain,
            "user_id": self.user_id,
            "history": list(self.history),
            "item_id": self.item_id,
            "title": self.title,
            "brand": self.brand,
            "price": self.price,
            "label": int(self.label),
        }


def render_prompt(rec: InteractionRecord, mode: str = "full") -> str:
    rec.validate()
    if mode == "id_only":
        return f"{rec.domain}: user_{rec.user_id}, product_{rec.item_id}."
    if mode == "id_name":
        return f"{rec.domain}: user_{rec.user_id}, product_{rec.item_id}, {rec.title}."
    if mode != "full":
        raise ConfigError(f"prompt_mode must be one of {PROMPT_MODES}, got {mode!r}")
    recent = rec.history[-MAX_HISTORY:]
    if not recent:
        clicked = "who has no recent clicks"
    else:
        clicked = "who clicked " + " and ".join(f"product '{t}'" for t in recent) + " recently"
    return (
        f"{rec.domain}: The user ID is user_{rec.user_id}, {clicked}. "
        f"The ID of the current product is product_{rec.item_id}, the title is {rec.title}, "
        f"the brand is {rec.brand}, the price is {rec.price}."
    )


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.tokens[: len(RESERVED)]) != RESERVED:
            raise ValidationError("vocabulary must start with the reserved tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValidationError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{t}\t{i}\n" for i, t in enumerate(self.tokens)), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        pairs = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line:
                tok, idx = line.rsplit("\t", 1)
                pairs.append((int(idx), tok))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ValidationError(f"{path}: token ids are not contiguous from 0")
        return cls([t for _, t in pairs])


def build_vocab(corpus: Iterable[str], max_size: int) -> Vocabulary:
    """Frequency-ranked word vocabulary, ties broken lexicographically.

    ``max_size`` counts the four reserved entries.
    """
    if max_size < len(RESERVED):
        raise ConfigError(f"max_size must be at least {len(RESERVED)}")
    counts: Counter[str] = Counter()
    seen = False
    for text in corpus:
        seen = True
        counts.update(words(text))
    if not seen:
        raise ValidationError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [t for t, _ in ranked[: max_size - len(RESERVED)] if t not in RESERVED]
    return Vocabulary(list(RESERVED) + keep)


@dataclass
class TokenSequence:
    ids: np.ndarray
    attention_mask: np.ndarray


def tokenize(text: str, vocab: Vocabulary, max_seq_len: int) -> TokenSequence:
    if max_seq_len < 2:
        raise ConfigError(f"max_seq_len must be >= 2, got {max_seq_len}")
    content = [vocab.id(w) for w in words(text)][: max_seq_len - 2]
    ids = [BOS, *content, EOS]
    n = len(ids)
    out = np.full(max_seq_len, PAD, dtype=np.int64)
    out[:n] = ids
    mask = np.zeros(max_seq_len, dtype=np.int8)
    mask[:n] = 1
    return TokenSequence(out, mask)


def encode(records: Sequence[InteractionRecord], vocab: Vocabulary, max_seq_len: int,
           mode: str = "full") -> tuple[np.ndarray, np.ndarray]:
    """Batch version of ``tokenize(render_prompt(r))``: (ids, mask) arrays."""
    ids = np.empty((len(records), max_seq_len), dtype=np.int64)
    mask = np.empty((len(records), max_seq_len), dtype=np.int8)
    for i, r in enumerate(records):
        seq = tokenize(render_prompt(r, mode), vocab, max_seq_len)
        ids[i], mask[i] = seq.ids, seq.attention_mask
    return ids, mask
