from __future__ import annotations

import string
from typing import Iterable, Sequence

DIGITS = string.digits
FULL_CHARSET = string.digits + string.ascii_uppercase + string.ascii_lowercase


class Alphabet:
    """Dense symbol table.

    Character classes occupy ``0..N-1``; ``N`` is the CTC blank, ``N+1`` the
    attention start symbol and ``N+2`` the end symbol.
    """

    def __init__(self, chars: str = FULL_CHARSET):
        if not chars:
            raise ValueError("alphabet must contain at least one character")
        if len(set(chars)) != len(chars):
            raise ValueError("alphabet contains duplicate characters")
        self.chars = chars
        self._index = {c: i for i, c in enumerate(chars)}

    @classmethod
    def from_spec(cls, spec: str) -> "Alphabet":
        named = {"digits": DIGITS, "full": FULL_CHARSET, "alnum": FULL_CHARSET}
        return cls(named.get(spec, spec))

    def __len__(self) -> int:
        return len(self.chars)

    def __contains__(self, ch: str) -> bool:
        return ch in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Alphabet) and other.chars == self.chars

    def __repr__(self) -> str:
        return f"Alphabet({self.chars!r})"

    @property
    def n(self) -> int:
        return len(self.chars)

    @property
    def blank(self) -> int:
        return self.n

    @property
    def sos(self) -> int:
        return self.n + 1

    @property
    def eos(self) -> int:
        return self.n + 2

    def encode(self, text: str) -> list[int]:
        try:
            return [self._index[c] for c in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} is not in the alphabet") from None

    def decode(self, indices: Iterable[int]) -> str:
        return "".join(self.chars[i] for i in indices if 0 <= i < self.n)

    def unknown_chars(self, text: str) -> set[str]:
        return {c for c in text if c not in self._index}

    def validate_label(self, label: Sequence[int]) -> None:
        for i in label:
            if not 0 <= i < self.n:
                raise ValueError(f"label index {i} is not a character class (N={self.n})")
