"""Word-level tokenization, vocabulary, and prompt construction.

Every prompt the two generator stages consume is built here, byte-exact:
the report-generation prompts (one per report section) and the two
answer-generation prompts (open-ended and multiple-choice).
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
UNK = "<unk>"
RG = "[RG]"
Q = "[Q]"
OE_VQA = "[OE_VQA]"
MC_VQA = "[MC_VQA]"
MC = "[MC]"

# Fixed order; these occupy ids 0..8 in every vocabulary and the first
# nine lines of every persisted vocab file.
SPECIALS = (PAD, BOS, EOS, UNK, RG, Q, OE_VQA, MC_VQA, MC)

FINDING_INSTRUCTION = "generate the finding section"
IMPRESSION_INSTRUCTION = "generate the impression section"

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^a-z0-9\s]")


class Section(str, Enum):
    FINDING = "finding"
    IMPRESSION = "impression"


class AnswerStyle(str, Enum):
    OPEN = "open"
    CLOSED = "closed"


class Segment(int, Enum):
    VISION = 0
    TEXT = 1


def tokenize(text: str) -> list[str]:
    """Lowercase word tokenizer; punctuation becomes standalone tokens."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Iterable[str]) -> str:
    """Inverse-ish of tokenize: join with single spaces, dropping specials."""
    return " ".join(t for t in tokens if t not in SPECIALS)


@dataclass(frozen=True)
class TokenSequence:
    """Encoded text with per-position segment labels.

    Positions are implicit 0..len-1; segments mark vision vs. text rows
    once the sequence is assembled alongside visual inputs.
    """

    ids: tuple[int, ...]
    segments: tuple[int, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.segments):
            raise ValueError(
                f"ids/segments length mismatch: {len(self.ids)} != {len(self.segments)}"
            )

    def __len__(self) -> int:
        return len(self.ids)

    @staticmethod
    def text(ids: Sequence[int]) -> "TokenSequence":
        return TokenSequence(tuple(ids), tuple([Segment.TEXT.value] * len(ids)))


@dataclass
class Vocabulary:
    """Bijective token<->id map with reserved low ids for special tokens."""

    token_to_id: dict[str, int] = field(default_factory=dict)
    id_to_token: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.id_to_token:
            for tok in SPECIALS:
                self._add(tok)

    def _add(self, token: str) -> int:
        if token in self.token_to_id:
            return self.token_to_id[token]
        idx = len(self.id_to_token)
        self.token_to_id[token] = idx
        self.id_to_token.append(token)
        return idx

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def bos_id(self) -> int:
        return self.token_to_id[BOS]

    @property
    def eos_id(self) -> int:
        return self.token_to_id[EOS]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)

    def encode_text(self, text: str) -> list[int]:
        """Tokenize plain text and map to ids (never produces special ids)."""
        return [self.id_of(t) for t in tokenize(text)]

    def decode(self, ids: Iterable[int], keep_specials: bool = False) -> str:
        toks = [self.id_to_token[i] for i in ids]
        if not keep_specials:
            toks = [t for t in toks if t not in SPECIALS]
        return " ".join(toks)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token:
                fh.write(tok + "\n")

    @staticmethod
    def load(path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"vocab file {path} does not start with the reserved specials")
        vocab = Vocabulary()
        for tok in tokens[len(SPECIALS):]:
            vocab._add(tok)
        return vocab


def build_vocab(texts: Iterable[str], min_freq: int = 1) -> Vocabulary:
    """Frequency-thresholded vocabulary over tokenized texts.

    Tokens below min_freq fall back to UNK at encode time. Ids are assigned
    by descending count, ties broken alphabetically, so the assignment is a
    pure function of the corpus.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts = Counter()
    for text in texts:
        counts.update(tokenize(text))
    vocab = Vocabulary()
    for token, n in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        if n >= min_freq and token not in SPECIALS:
            vocab._add(token)
    return vocab


def report_prompt(indication: str, section: Section, vocab: Vocabulary) -> TokenSequence:
    """Report-stage prompt: [RG] {indication} [Q] {instruction}.

    An empty indication contributes zero tokens (no placeholder).
    """
    section = Section(section)
    instruction = (
        FINDING_INSTRUCTION if section is Section.FINDING else IMPRESSION_INSTRUCTION
    )
    ids = [vocab.id_of(RG)]
    ids.extend(vocab.encode_text(indication))
    ids.append(vocab.id_of(Q))
    ids.extend(vocab.encode_text(instruction))
    return TokenSequence.text(ids)


def answer_prompt(
    question: str,
    report_text: str | None,
    choices: Sequence[str] | None,
    style: AnswerStyle,
    vocab: Vocabulary,
) -> TokenSequence:
    """Answer-stage prompt.

    open:   [OE_VQA] {report} [Q] {question}
    closed: [MC_VQA] {report} [Q] {question} [MC] {a_1} ... [MC] {a_M}

    A missing report contributes zero tokens (the no-text ablation rows).
    """
    style = AnswerStyle(style)
    if style is AnswerStyle.CLOSED and not choices:
        raise ValueError("closed prompt requires a non-empty choices list")
    head = MC_VQA if style is AnswerStyle.CLOSED else OE_VQA
    ids = [vocab.id_of(head)]
    if report_text:
        ids.extend(vocab.encode_text(report_text))
    ids.append(vocab.id_of(Q))
    ids.extend(vocab.encode_text(question))
    if style is AnswerStyle.CLOSED:
        for choice in choices:
            ids.append(vocab.id_of(MC))
            ids.extend(vocab.encode_text(choice))
    return TokenSequence.text(ids)


def normalize_answer(text: str) -> str:
    """Exact-match normal form: lowercase, punctuation dropped, single spaces."""
    return " ".join(t for t in tokenize(text) if t[0].isalnum())
