"""Synthetic colored-grid captioning task and its byte-level tokenizer.

Each sample is a G x G grid of color indices together with the canonical
caption listing every cell in row-major order as ``r,c:color;``. The caption
is a pure function of the grid, so generated text can be scored by exact
match.

Dataset files are JSON lines, one record per sample::

    {"G": 3, "cells": [0, 3, 1, ...], "prompt": "describe the grid",
     "caption": "0,0:blue;0,1:teal;...", "split": "train"}

``cells`` is the flat row-major list of color indices.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

COLOR_NAMES = ("blue", "gray", "pink", "teal", "cyan", "gold", "lime", "navy")
DEFAULT_PROMPT = "describe the grid"
ALPHABET = " ,:;0123456789abcdefghijklmnopqrstuvwxyz"

BOS_ID = 0
EOS_ID = 1
MASK_ID = 2
N_SPECIALS = 3


@dataclass(frozen=True)
class GridImage:
    size: int
    cells: tuple[int, ...]
    n_colors: int = len(COLOR_NAMES)

    def __post_init__(self):
        if len(self.cells) != self.size * self.size:
            raise ValueError(f"expected {self.size * self.size} cells, got {len(self.cells)}")
        if any(c < 0 or c >= self.n_colors for c in self.cells):
            raise ValueError(f"cell color index outside palette of {self.n_colors}")

    @classmethod
    def from_flat(cls, cells, n_colors=len(COLOR_NAMES)):
        cells = tuple(int(c) for c in cells)
        size = int(round(len(cells) ** 0.5))
        if size * size != len(cells):
            raise ValueError("flat cell list length is not a perfect square")
        return cls(size, cells, n_colors)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.cells, dtype=np.int64)

    def digest(self) -> str:
        payload = bytes([self.size]) + bytes(self.cells)
        return hashlib.sha256(payload).hexdigest()


def caption_for(image: GridImage) -> str:
    g = image.size
    return "".join(f"{i // g},{i % g}:{COLOR_NAMES[c]};" for i, c in enumerate(image.cells))


_ENTRY = "|".join(COLOR_NAMES)


def is_well_formed(text: str, size: int | None = None) -> bool:
    """True when ``text`` follows the caption grammar (and covers a size x size grid)."""
    entries = re.fullmatch(rf"(?:\d+,\d+:(?:{_ENTRY});)+", text)
    if entries is None:
        return False
    if size is None:
        return True
    expected = [f"{i // size},{i % size}" for i in range(size * size)]
    found = re.findall(r"(\d+,\d+):", text)
    return found == expected


@dataclass(frozen=True)
class Sample:
    image: GridImage
    caption: str
    prompt: str = DEFAULT_PROMPT
    split: str = field(default="train", compare=False)


def split_for(image: GridImage, val_fraction: float) -> str:
    bucket = int(image.digest()[:8], 16) / 0xFFFFFFFF
    return "val" if bucket < val_fraction else "train"


def gen_dataset(n: int, G: int = 3, C: int = 4, seed: int = 0, val_fraction: float = 0.1) -> list[Sample]:
    """Draw ``n`` random grids; the split label is a hash of the grid bytes."""
    if n < 1 or G < 1:
        raise ValueError("n and G must be positive")
    if not 2 <= C <= len(COLOR_NAMES):
        raise ValueError(f"palette size must be in [2, {len(COLOR_NAMES)}]")
    rng = np.random.default_rng(seed)
    cells = rng.integers(0, C, size=(n, G * G))
    samples = []
    for row in cells:
        image = GridImage(G, tuple(int(c) for c in row), C)
        samples.append(Sample(image, caption_for(image), DEFAULT_PROMPT, split_for(image, val_fraction)))
    return samples


def train_val_split(samples):
    train = [s for s in samples if s.split == "train"]
    val = [s for s in samples if s.split == "val"]
    return train, val


def save_dataset(samples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            record = {"G": s.image.size, "C": s.image.n_colors, "cells": list(s.image.cells),
                      "prompt": s.prompt, "caption": s.caption, "split": s.split}
            fh.write(json.dumps(record) + "\n")


def load_dataset(path) -> list[Sample]:
    samples = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        image = GridImage(int(rec["G"]), tuple(rec["cells"]), int(rec.get("C", len(COLOR_NAMES))))
        samples.append(Sample(image, rec["caption"], rec.get("prompt", DEFAULT_PROMPT), rec.get("split", "train")))
    return samples


class Tokenizer:
    """Byte-level tokenizer over the caption alphabet plus BOS/EOS/MASK."""

    def __init__(self, alphabet: str = ALPHABET, vocab_size: int = 64):
        if N_SPECIALS + len(alphabet) > vocab_size:
            raise ValueError("alphabet does not fit in the vocabulary")
        self.alphabet = alphabet
        self.vocab_size = vocab_size
        self.bos_id, self.eos_id, self.mask_id = BOS_ID, EOS_ID, MASK_ID
        self._to_id = {ch: N_SPECIALS + i for i, ch in enumerate(alphabet)}
        self._to_char = {i: ch for ch, i in self._to_id.items()}

    def tokenize(self, text: str) -> list[int]:
        try:
            return [self._to_id[ch] for ch in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} is outside the tokenizer alphabet") from None

    def detokenize(self, ids, strict: bool = True) -> str:
        out = []
        for i in ids:
            ch = self._to_char.get(int(i))
            if ch is None:
                if strict:
                    raise ValueError(f"id {int(i)} is not a text token")
                ch = "?"
            out.append(ch)
        return "".join(out)
