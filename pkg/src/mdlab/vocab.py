"""Token vocabulary shared by the diffusion process, tasks, and decoding.

A vocabulary is an ordered tuple of token names. Ids are positions in that
tuple, so serializing the name list is enough to reconstruct the vocabulary
exactly. Id 0 is always the absorbing mask token and id 1 the end-of-sequence
token; everything downstream relies on those two anchors.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InvalidInputError

MASK_TOKEN = "<mask>"
EOS_TOKEN = "<eos>"
PAD_TOKEN = "<pad>"
SEP_TOKEN = "<sep>"
ANS_OPEN_TOKEN = "<ans>"
ANS_CLOSE_TOKEN = "</ans>"

# Specials present in every vocabulary, in fixed id order.
BASE_TOKENS = (MASK_TOKEN, EOS_TOKEN, PAD_TOKEN, SEP_TOKEN, ANS_OPEN_TOKEN, ANS_CLOSE_TOKEN)

OP_TOKENS = ("op:+", "op:-", "op:*")


@dataclass(frozen=True)
class Vocabulary:
    """Immutable ordered vocabulary. Equality means identical token lists."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise InvalidInputError("vocabulary contains duplicate token names")
        if self.tokens[:2] != (MASK_TOKEN, EOS_TOKEN):
            raise InvalidInputError("vocabulary must start with the mask and eos tokens")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def mask_id(self) -> int:
        return 0

    @property
    def eos_id(self) -> int:
        return 1

    def id_of(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise InvalidInputError(f"unknown token name: {token!r}") from None

    @property
    def pad_id(self) -> int:
        return self.id_of(PAD_TOKEN)

    @property
    def sep_id(self) -> int:
        return self.id_of(SEP_TOKEN)

    @property
    def ans_open_id(self) -> int:
        return self.id_of(ANS_OPEN_TOKEN)

    @property
    def ans_close_id(self) -> int:
        return self.id_of(ANS_CLOSE_TOKEN)

    def value_id(self, v: int) -> int:
        return self.id_of(f"v{v}")

    def value_of(self, token_id: int) -> int | None:
        """Inverse of value_id; None when the id is not a value token."""
        name = self.tokens[token_id]
        if name.startswith("v") and name[1:].isdigit():
            return int(name[1:])
        return None

    def marker_id(self, kind: str) -> int:
        return self.id_of(f"task:{kind}")

    def to_spec(self) -> list[str]:
        return list(self.tokens)

    @classmethod
    def from_spec(cls, names: list[str]) -> "Vocabulary":
        return cls(tuple(names))


def build_vocab(kinds: tuple[str, ...], value_range: int, with_ops: bool = False) -> Vocabulary:
    """Assemble a vocabulary for a task suite.

    Layout: base specials, one marker per kind (in the given order), operator
    tokens when requested, then value tokens v0..v{value_range-1}.
    """
    if value_range < 1:
        raise InvalidInputError("value_range must be at least 1")
    names = list(BASE_TOKENS)
    names.extend(f"task:{k}" for k in kinds)
    if with_ops:
        names.extend(OP_TOKENS)
    names.extend(f"v{v}" for v in range(value_range))
    return Vocabulary(tuple(names))
