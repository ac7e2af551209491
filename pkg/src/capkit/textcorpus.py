"""Tokenization, vocabulary thresholding and caption-file ingestion."""

from __future__ import annotations

import hashlib
import re
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, START, END, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<start>", "<end>", "<unk>")

FLICKR8K = "flickr8k"
CONCEPTUAL = "conceptual"
FORMATS = (FLICKR8K, CONCEPTUAL)

_NON_ALNUM = re.compile(r"[^0-9a-z]+")


class CorpusError(ValueError):
    """Base class for caption-file problems."""


class MalformedLine(CorpusError):
    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.path = path
        self.lineno = lineno


class EmptyFile(CorpusError):
    def __init__(self, path):
        super().__init__(f"{path}: no caption lines")
        self.path = path


def tokenize(raw: str) -> list[str]:
    """Lowercase, treat every non-alphanumeric character as a separator, split.

    >>> tokenize("A man rides a horse.")
    ['a', 'man', 'rides', 'a', 'horse']
    """
    return _NON_ALNUM.sub(" ", raw.lower()).split()


@dataclass(frozen=True)
class Caption:
    raw: str
    tokens: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(tokenize(self.raw)))


@dataclass
class CorpusRecord:
    image_id: str
    captions: list[Caption]

    def __post_init__(self):
        if not self.image_id:
            raise ValueError("image_id must be non-empty")
        if not self.captions:
            raise ValueError(f"record {self.image_id!r} has no captions")


@dataclass(frozen=True)
class VocabConfig:
    min_count: int = 4

    def __post_init__(self):
        if self.min_count < 1:
            raise ValueError(f"min_count must be >= 1, got {self.min_count}")


class Vocabulary:
    """Bidirectional token/id map. Ids 0-3 are reserved for the special tokens."""

    def __init__(self, tokens: Sequence[str], counts: dict[str, int], min_count: int = 1):
        self.id_to_token: list[str] = list(SPECIAL_TOKENS) + list(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        self.counts: dict[str, int] = dict(counts)
        self.min_count = min_count

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Vocabulary)
            and self.id_to_token == other.id_to_token
            and self.counts == other.counts
        )

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def to_tsv(self) -> str:
        lines = []
        for i, tok in enumerate(self.id_to_token):
            lines.append(f"{i}\t{tok}\t{self.counts.get(tok, 0)}")
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_tsv().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        tokens, counts = [], {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            parts = line.split("\t")
            if len(parts) != 3:
                raise MalformedLine(path, lineno, "expected id<TAB>token<TAB>count")
            try:
                idx, count = int(parts[0]), int(parts[2])
            except ValueError:
                raise MalformedLine(path, lineno, "non-integer id or count") from None
            if idx != lineno - 1:
                raise MalformedLine(path, lineno, f"expected id {lineno - 1}, got {idx}")
            tok = parts[1]
            if idx < len(SPECIAL_TOKENS):
                if tok != SPECIAL_TOKENS[idx]:
                    raise MalformedLine(path, lineno, f"expected special token {SPECIAL_TOKENS[idx]}")
            else:
                tokens.append(tok)
                counts[tok] = count
        if len(tokens) + len(SPECIAL_TOKENS) != len(text.splitlines()):
            raise MalformedLine(path, 1, "missing special tokens")
        min_count = min(counts.values()) if counts else 1
        return cls(tokens, counts, min_count=min_count)


def count_tokens(corpus: Iterable[CorpusRecord]) -> Counter:
    counts: Counter = Counter()
    for record in corpus:
        for caption in record.captions:
            counts.update(caption.tokens)
    return counts


def build_vocab(corpus: Iterable[CorpusRecord], config: VocabConfig = VocabConfig()) -> Vocabulary:
    """Keep tokens seen at least ``config.min_count`` times.

    Ids are assigned by descending frequency, ties broken lexicographically.
    """
    counts = count_tokens(corpus)
    kept = sorted(
        (tok for tok, n in counts.items() if n >= config.min_count),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocabulary(kept, {tok: counts[tok] for tok in kept}, min_count=config.min_count)


def encode(caption: Caption | Sequence[str], vocab: Vocabulary) -> list[int]:
    tokens = caption.tokens if isinstance(caption, Caption) else caption
    return [START] + [vocab.id_of(t) for t in tokens] + [END]


def decode(ids: Iterable[int], vocab: Vocabulary) -> list[str]:
    """Map ids back to tokens, dropping START/PAD and stopping at END."""
    out = []
    for i in ids:
        if i == END:
            break
        if i in (PAD, START):
            continue
        out.append(vocab.id_to_token[i])
    return out


def load_captions_tsv(path, format: str = CONCEPTUAL) -> list[CorpusRecord]:
    """Read a caption file.

    ``conceptual``: ``caption<TAB>image_id_or_url``, one record per line.
    ``flickr8k``: ``image_id#index<TAB>caption``, captions grouped per image in
    order of first appearance.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown caption format {format!r}; expected one of {FORMATS}")
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    lines = text.replace("\r\n", "\n").split("\n")
    if lines and lines[-1] == "":
        lines.pop()

    records: list[CorpusRecord] = []
    grouped: OrderedDict[str, list[Caption]] = OrderedDict()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise MalformedLine(path, lineno, "no TAB separator")
        left, right = line.split("\t", 1)
        if format == CONCEPTUAL:
            caption, image_id = left, right.strip()
            if not image_id or "\t" in image_id:
                raise MalformedLine(path, lineno, "expected caption<TAB>image_id")
            records.append(CorpusRecord(image_id, [Caption(caption)]))
        else:
            image_id, sep, index = left.strip().rpartition("#")
            if not sep or not image_id or not index.isdigit():
                raise MalformedLine(path, lineno, "expected image_id#index<TAB>caption")
            grouped.setdefault(image_id, []).append(Caption(right))

    if format == FLICKR8K:
        records = [CorpusRecord(i, caps) for i, caps in grouped.items()]
    if not records:
        raise EmptyFile(path)
    return records


def save_captions_tsv(records: Iterable[CorpusRecord], path, format: str = CONCEPTUAL) -> None:
    lines = []
    for rec in records:
        for k, cap in enumerate(rec.captions):
            if format == CONCEPTUAL:
                lines.append(f"{cap.raw}\t{rec.image_id}")
            else:
                lines.append(f"{rec.image_id}#{k}\t{cap.raw}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
