"""Synthetic desk-scale tasks and batching.

Ids 0..2 are reserved (PAD, SEP, BOS). Characters of the built-in corpus map
to ids from 3 upward; the copy and reverse tasks draw segment tokens from the
same range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import IGNORE, Rng

PAD, SEP, BOS = 0, 1, 2
FIRST_TOKEN = 3
TASKS = ("copy", "reverse", "charlm")

CHARSET = " abcdefghijklmnopqrstuvwxyz.,;:'!?-\n0123456789"

CORPUS = """\
the river runs past the mill and the mill turns the stone.
the stone grinds the grain and the grain fills the sack.
the sack goes to the baker and the baker makes the bread.
when the rain comes the river rises, and when the sun comes the river falls.
a small boat sits by the bank. a small boat waits for the tide.
the old man rows the boat across the river to the market.
at the market he sells fish, and at the market he buys bread.
one, two, three: the bells ring at noon. four, five, six: the bells ring at dusk.
the cat sleeps on the warm wall; the dog sleeps by the cold door.
if the wind is strong the boat stays home; if the wind is soft the boat goes out.
the children sing the river song: row, row, row to the mill and back again.
the miller counts the sacks: ten sacks today, twelve sacks tomorrow.
the baker counts the loaves: ten loaves today, twelve loaves tomorrow.
in winter the river is ice and the mill is quiet; in spring the river sings.
"""


def char_to_id(c: str) -> int:
    return FIRST_TOKEN + CHARSET.index(c)


def encode_text(text: str) -> list[int]:
    return [char_to_id(c) for c in text]


def decode_ids(ids) -> str:
    out = []
    for i in ids:
        i = int(i)
        if i == SEP:
            out.append("|")
        elif FIRST_TOKEN <= i < FIRST_TOKEN + len(CHARSET):
            out.append(CHARSET[i - FIRST_TOKEN])
        else:
            out.append("?")
    return "".join(out)


@dataclass(frozen=True)
class Sample:
    """``prompt`` is context only; the model is scored on predicting ``answer``."""

    prompt: tuple[int, ...]
    answer: tuple[int, ...]

    @property
    def sequence(self) -> tuple[int, ...]:
        return self.prompt + self.answer


def gen_dataset(task: str, seed: int, n_samples: int, *, vocab: int = 64, segment_len: int = 8, seq_len: int = 32) -> list[Sample]:
    """Deterministic per ``seed``.

    copy: ``seg + [SEP]`` then ``seg``. reverse: ``seg + [SEP]`` then
    ``seg[::-1]``. charlm: windows of ``seq_len`` characters from the built-in
    corpus; the first character is the prompt.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    rng = Rng(seed)
    if task == "charlm":
        ids = encode_text(CORPUS)
        if max(ids) >= vocab:
            raise ValueError(f"vocab {vocab} too small for the corpus charset")
        span = len(ids) - seq_len
        out = []
        for _ in range(n_samples):
            start = rng.below(span + 1)
            window = ids[start : start + seq_len]
            out.append(Sample(tuple(window[:1]), tuple(window[1:])))
        return out
    n_symbols = min(vocab, FIRST_TOKEN + len(CHARSET)) - FIRST_TOKEN
    if n_symbols < 1:
        raise ValueError("vocab too small for segment tokens")
    out = []
    for _ in range(n_samples):
        seg = tuple(FIRST_TOKEN + rng.below(n_symbols) for _ in range(segment_len))
        answer = seg if task == "copy" else seg[::-1]
        out.append(Sample(seg + (SEP,), answer))
    return out


def make_batch(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forced ``(inputs, targets)``; prompt-predicting positions are ignored."""
    lengths = {len(s.sequence) for s in samples}
    width = max(lengths) - 1
    inputs = np.full((len(samples), width), PAD, dtype=np.int64)
    targets = np.full((len(samples), width), IGNORE, dtype=np.int64)
    for row, s in enumerate(samples):
        seq = s.sequence
        inputs[row, : len(seq) - 1] = seq[:-1]
        first = len(s.prompt) - 1
        targets[row, first : len(seq) - 1] = seq[first + 1 :]
    return inputs, targets


def batches(samples: list[Sample], batch_size: int, order: list[int] | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Full batches only; a trailing remainder is dropped."""
    order = list(range(len(samples))) if order is None else order
    out = []
    for start in range(0, len(order) - batch_size + 1, batch_size):
        out.append(make_batch([samples[i] for i in order[start : start + batch_size]]))
    return out
