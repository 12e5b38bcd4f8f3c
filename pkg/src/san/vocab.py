"""Reserved token ids and the vocabulary file format."""

from __future__ import annotations

from pathlib import Path

BLANK = 0
SENTINEL = 1
RESERVED = ("<blk>", "<s>")


class VocabError(ValueError):
    pass


def token_names(n_tokens: int) -> list[str]:
    width = len(str(max(n_tokens - 1, 0)))
    return list(RESERVED) + [f"t{i:0{width}d}" for i in range(n_tokens)]


def write_vocab(path: str | Path, names: list[str]) -> None:
    if tuple(names[:2]) != RESERVED:
        raise VocabError(f"vocabulary must start with {RESERVED}")
    Path(path).write_bytes(("\n".join(names) + "\n").encode("utf-8"))


def read_vocab(path: str | Path) -> list[str]:
    names = Path(path).read_bytes().decode("utf-8").splitlines()
    if tuple(names[:2]) != RESERVED:
        raise VocabError(f"{path}: lines 0 and 1 must be {RESERVED[0]!r} and {RESERVED[1]!r}")
    if len(names) < 3:
        raise VocabError(f"{path}: vocabulary needs at least one real token")
    return names
