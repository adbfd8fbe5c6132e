"""Word-level tokenizer with byte fallback and identifier extensions.

The base vocabulary is the small closed lexicon the synthetic language
generator draws from, plus digits, punctuation (single spaces are real
tokens, which makes detokenization an exact concatenation), a reserved
"OBJ" lexeme, and a byte-fallback block so arbitrary strings still
tokenize. Identifier tokens <OBJ001>..<OBJn> occupy one contiguous block
at the top of the id space.

Identifier text handling is mode-dependent: canonical "<OBJ%03d>" maps to
a single identifier token normally, and to the four text tokens
OBJ, d, d, d in plain-text mode (detokenization then canonicalizes bare
OBJddd back to bracketed form so response parsing is uniform).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

__all__ = ["Vocab", "build_vocab", "DEFAULT_WORDS", "RESERVED_WORDS", "PUNCT"]

DEFAULT_WORDS = (
    "a", "an", "analyzing", "and", "answer", "answers", "appearance", "are",
    "around", "artificial", "as", "assistant", "at",
    "ball", "balls", "be", "before", "behind", "beside", "between", "blue",
    "book", "books", "box", "boxes", "brown",
    "can", "cans", "category", "center", "centers", "chair", "chairs", "chat",
    "closest", "color", "connections", "conversation", "count", "curious",
    "described", "description", "detailed", "directly",
    "east", "elements",
    "facing", "for", "front",
    "gives", "gray", "green",
    "helpful", "holding", "how",
    "id", "ids", "if", "in", "indoor", "intelligence", "is", "it", "its",
    "lamp", "lamps", "large", "left", "leftmost", "located", "looking",
    "many", "matches", "my",
    "near", "nearest", "next", "no", "north",
    "object", "objects", "of", "on", "or", "orange", "other",
    "phrase", "please", "polite", "provide", "purple",
    "question", "questions",
    "red", "right", "rightmost", "room",
    "scene", "should", "side", "single", "sitting", "small", "south",
    "spatial", "standing",
    "table", "tables", "that", "the", "there", "this", "those", "to", "toward",
    "user", "user's",
    "vase", "vases", "visible",
    "walking", "west", "what", "which", "with", "word",
    "yellow", "yes", "you", "your",
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight",
    "nine", "ten",
)

# Case-sensitive lexemes: role markers and the identifier word stem.
RESERVED_WORDS = ("OBJ", "USER", "ASSISTANT")

PUNCT = (" ", ".", ",", "?", "!", ":", ";", '"', "'", "(", ")", "[", "]", "<", ">")

_SPECIALS = ("<bos>", "<eos>", "<pad>", "<object>")

_SCAN = re.compile(
    r"<object>|<OBJ\d{3}>|[A-Za-z]+(?:'[a-z]+)?|\d|\s+|."
)
_IDENT = re.compile(r"<OBJ(\d{3})>")
_BARE_IDENT = re.compile(r"OBJ(\d{3})(?!\d)")


@dataclass(frozen=True, eq=False)
class Vocab:
    tokens: tuple[str, ...]
    n_identifiers: int
    words: tuple[str, ...]

    # derived ids, filled by build_vocab
    bos_id: int = 0
    eos_id: int = 0
    pad_id: int = 0
    placeholder_id: int = 0
    byte_base: int = 0
    identifier_base: int = 0

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def base_size(self) -> int:
        """Vocabulary size without the identifier block."""
        return self.identifier_base

    def identifier_id(self, index: int) -> int:
        if not 1 <= index <= self.n_identifiers:
            raise ValueError(
                f"identifier index {index} outside vocabulary block 1..{self.n_identifiers}"
            )
        return self.identifier_base + index - 1

    def identifier_index(self, token_id: int) -> int | None:
        """1-based object index if token_id is an identifier token, else None."""
        if self.identifier_base <= token_id < self.identifier_base + self.n_identifiers:
            return token_id - self.identifier_base + 1
        return None

    # -- tokenization --------------------------------------------------------

    def _word_ids(self, word: str) -> list[int]:
        index = self._index
        hit = index.get(word)
        if hit is None:
            hit = index.get(word.lower())
        if hit is not None:
            return [hit]
        # Greedy longest-known-prefix fallback, then bytes for the remainder.
        out: list[int] = []
        rest = word
        while rest:
            for ln in range(len(rest), 1, -1):
                cand = index.get(rest[:ln])
                if cand is None:
                    cand = index.get(rest[:ln].lower())
                if cand is not None:
                    out.append(cand)
                    rest = rest[ln:]
                    break
            else:
                out.extend(self.byte_base + b for b in rest[0].encode("utf-8"))
                rest = rest[1:]
        return out

    def tokenize(self, text: str, plaintext_identifiers: bool = False) -> list[int]:
        ids: list[int] = []
        index = self._index
        for m in _SCAN.finditer(text):
            piece = m.group(0)
            if piece == "<object>":
                ids.append(self.placeholder_id)
            elif len(piece) == 8 and piece.startswith("<OBJ") and piece.endswith(">"):
                obj = int(piece[4:7])
                if plaintext_identifiers:
                    ids.append(index["OBJ"])
                    ids.extend(index[d] for d in piece[4:7])
                else:
                    ids.append(self.identifier_id(obj))
            elif piece[0].isspace():
                ids.append(index[" "])
            elif piece in index:
                ids.append(index[piece])
            elif piece[0].isalpha():
                ids.extend(self._word_ids(piece))
            else:
                ids.extend(self.byte_base + b for b in piece.encode("utf-8"))
        return ids

    def detokenize(self, ids, plaintext_identifiers: bool = False) -> str:
        skip = {self.bos_id, self.eos_id, self.pad_id}
        parts: list[str] = []
        for tid in ids:
            tid = int(tid)
            if tid in skip:
                continue
            if not 0 <= tid < self.size:
                raise ValueError(f"token id {tid} outside vocabulary of {self.size}")
            if self.byte_base <= tid < self.byte_base + 256:
                parts.append(chr(tid - self.byte_base))
            else:
                parts.append(self.tokens[tid])
        text = "".join(parts)
        if plaintext_identifiers:
            text = _BARE_IDENT.sub(lambda m: f"<OBJ{m.group(1)}>", text)
        return text

    def config(self) -> dict:
        return {"words": list(self.words), "n_identifiers": self.n_identifiers}


def build_vocab(words=DEFAULT_WORDS, n_identifiers: int = 16) -> Vocab:
    """Assemble the token table; identifier ids form the trailing block."""
    if n_identifiers < 0 or n_identifiers > 999:
        raise ValueError("identifier count must lie in 0..999")
    words = tuple(words)
    seen = set()
    for w in words:
        if w in seen:
            raise ValueError(f"duplicate lexeme {w!r}")
        seen.add(w)
    tokens: list[str] = list(_SPECIALS)
    tokens.extend(PUNCT)
    tokens.extend(str(d) for d in range(10))
    byte_base = len(tokens)
    tokens.extend(f"<0x{b:02X}>" for b in range(256))
    tokens.extend(RESERVED_WORDS)
    tokens.extend(words)
    identifier_base = len(tokens)
    tokens.extend(f"<OBJ{i:03d}>" for i in range(1, n_identifiers + 1))

    vocab = Vocab(
        tokens=tuple(tokens),
        n_identifiers=n_identifiers,
        words=words,
        bos_id=tokens.index("<bos>"),
        eos_id=tokens.index("<eos>"),
        pad_id=tokens.index("<pad>"),
        placeholder_id=tokens.index("<object>"),
        byte_base=byte_base,
        identifier_base=identifier_base,
    )
    index = {}
    for i, tok in enumerate(tokens):
        if byte_base <= i < byte_base + 256:
            continue
        index.setdefault(tok, i)
    object.__setattr__(vocab, "_index", index)
    return vocab
