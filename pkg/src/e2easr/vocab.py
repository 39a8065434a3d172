"""Character vocabulary with reserved blank/SOS/EOS/UNK ids."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, List, Sequence, Union

BLANK, SOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<blank>", "<sos>", "<eos>", "<unk>")
_EXCLUDED = {"\n", "\r"}


class Vocabulary:
    """Dense ids: the four reserved symbols first, then characters by codepoint."""

    def __init__(self, chars: Iterable[str]):
        chars = sorted(set(chars))
        bad = [c for c in chars if len(c) != 1 or c in _EXCLUDED]
        if bad:
            raise ValueError(f"vocabulary entries must be single non-newline characters: {bad[:3]}")
        self.chars: List[str] = chars
        self._ids = {c: i + len(RESERVED) for i, c in enumerate(chars)}

    blank = BLANK
    sos = SOS
    eos = EOS
    unk = UNK

    def __len__(self) -> int:
        return len(RESERVED) + len(self.chars)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.chars == other.chars

    @property
    def size(self) -> int:
        return len(self)

    def encode(self, text: str) -> List[int]:
        return [self._ids.get(c, UNK) for c in text]

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        n = len(self)
        for i in ids:
            i = int(i)
            if i < 0 or i >= n:
                raise ValueError(f"token id {i} outside vocabulary of size {n}")
            out.append(RESERVED[i] if i < len(RESERVED) else self.chars[i - len(RESERVED)])
        return "".join(out)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text("".join(c + "\n" for c in self.chars), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        vocab = cls(lines)
        if vocab.chars != lines:
            raise ValueError(f"{path}: vocabulary file is not sorted and duplicate-free")
        return vocab


def build_vocab(corpus: Iterable[str]) -> Vocabulary:
    chars = set()
    for line in corpus:
        chars.update(c for c in line if c not in _EXCLUDED)
    if not chars:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    return Vocabulary(chars)
