"""Dialog grammar, vocabulary, tokenizer and the rule-based paraphraser."""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

PAD, CLS, QUE, INS = "[PAD]", "[CLS]", "[QUE]", "[INS]"
SPECIALS = (PAD, CLS, QUE, INS)

# compass words indexed by bearing / (pi/4), bearing measured counter-clockwise from east
CARDINALS = ("east", "northeast", "north", "northwest", "west", "southwest", "south", "southeast")
COLORS = ("red", "green", "blue", "white", "gray", "yellow")
CLASSES = ("building", "house", "tower", "pool", "field", "warehouse")

CANONICAL = "head {cardinal} and your destination is the {color} {cls}"
PARAPHRASES = (
    "fly {cardinal} and your goal is the {color} {cls}",
    "go {cardinal} ; the destination is the {color} {cls}",
    "proceed {cardinal} until you reach the {color} {cls}",
    "move {cardinal} , your target is the {color} {cls}",
    "travel {cardinal} and stop at the {color} {cls}",
)
TEMPLATES = (CANONICAL,) + PARAPHRASES

HISTORY_INSTRUCTIONS = (
    "hi drone , take off and look around",
    "hi drone , the place we want is near the {color} {cls}",
    "hi drone , start by flying {cardinal}",
)
QUESTIONS = (
    "which way should i go ?",
    "where is the destination ?",
    "should i keep going ?",
    "can you see me now ?",
)

TOKEN_RE = re.compile(r"[a-z]+|[,;.?]")


class VocabularyError(KeyError):
    pass


class ParaphraseError(ValueError):
    pass


def words(text: str) -> list[str]:
    return TOKEN_RE.findall(text.lower())


def _template_words() -> set[str]:
    out = set(CARDINALS) | set(COLORS) | set(CLASSES)
    for t in TEMPLATES + HISTORY_INSTRUCTIONS + QUESTIONS:
        out |= {w for w in words(re.sub(r"\{\w+\}", " ", t))}
    return out


@dataclass
class Vocabulary:
    tokens: list

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise VocabularyError(f"first four tokens must be {SPECIALS}")
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise VocabularyError(f"out-of-vocabulary token {token!r}") from None

    @property
    def pad_id(self) -> int:
        return 0

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(list(SPECIALS) + sorted(_template_words()))

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text().splitlines())


def split_rounds(dialog: Sequence[tuple[str, str]]) -> list[list[tuple[str, str]]]:
    """Group a flat (role, text) list into rounds: an optional question then an instruction."""
    rounds, cur = [], []
    for role, text in dialog:
        cur.append((role, text))
        if role == "ins":
            rounds.append(cur)
            cur = []
    if cur:
        rounds.append(cur)
    return rounds


def _encode_round(rnd, vocab: Vocabulary) -> list[int]:
    ids = []
    for role, text in rnd:
        ids.append(vocab.id(QUE if role == "que" else INS))
        ids.extend(vocab.id(w) for w in words(text))
    return ids


def tokenize(current, history, vocab: Vocabulary, max_len: int = 48) -> list[int]:
    """[CLS] + current round + history rounds (oldest first), padded to ``max_len``.

    When too long, whole history rounds are dropped oldest-first; the current
    round is only cut as a last resort.
    """
    cur = _encode_round(current, vocab)
    hist = [_encode_round(r, vocab) for r in history]
    budget = max_len - 1 - len(cur)
    while hist and sum(map(len, hist)) > budget:
        hist.pop(0)
    ids = [vocab.id(CLS)] + cur + [i for r in hist for i in r]
    ids = ids[:max_len]
    return ids + [vocab.pad_id] * (max_len - len(ids))


def make_instruction(cardinal: str, color: str, cls: str, template: str = CANONICAL) -> str:
    return template.format(cardinal=cardinal, color=color, cls=cls)


def _template_regex(template: str) -> re.Pattern:
    pat = re.escape(template)
    for key in ("cardinal", "color", "cls"):
        pat = pat.replace(re.escape("{" + key + "}"), rf"(?P<{key}>[a-z]+)")
    return re.compile("^" + pat + "$")


_PARSERS = [(t, _template_regex(t)) for t in TEMPLATES]


def parse_instruction(instr: str) -> tuple[str, dict]:
    text = " ".join(words(instr))
    for template, rx in _PARSERS:
        m = rx.match(text)
        if m and m["cardinal"] in CARDINALS and m["color"] in COLORS and m["cls"] in CLASSES:
            return template, m.groupdict()
    raise ParaphraseError(f"instruction does not follow the grammar: {instr!r}")


def paraphrase_instruction(instr: str) -> list[str]:
    """Five distinct rewrites that keep the direction, colour and class words."""
    template, slots = parse_instruction(instr)
    return [t.format(**slots) for t in TEMPLATES if t != template]
