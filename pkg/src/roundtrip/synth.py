"""Synthetic parallel corpora with a perfect round trip by construction.

Tasks: token reversal, an involutive substitution cipher (applying it twice
recovers the input), and plain copy. Train/dev/test sources are disjoint.
"""

from __future__ import annotations

import os

import numpy as np

TASKS = ("reversal", "cipher", "copy")


def _alphabet(vocab: int) -> list[str]:
    return [f"w{i:02d}" for i in range(vocab)]


def _involution(vocab: int, rng: np.random.Generator) -> dict[str, str]:
    """Pair tokens up so the cipher is its own inverse (odd one maps to itself)."""
    toks = _alphabet(vocab)
    order = rng.permutation(vocab)
    mapping = {}
    for i in range(0, vocab - 1, 2):
        a, b = toks[order[i]], toks[order[i + 1]]
        mapping[a] = b
        mapping[b] = a
    if vocab % 2 == 1:
        last = toks[order[-1]]
        mapping[last] = last
    return mapping


def translate_tokens(task: str, tokens: list[str], cipher: dict[str, str] | None) -> list[str]:
    if task == "reversal":
        return tokens[::-1]
    if task == "cipher":
        return [cipher[t] for t in tokens]
    if task == "copy":
        return list(tokens)
    raise ValueError(f"unknown task {task!r}")


def generate_corpus(task: str, size: int, vocab: int, seed: int,
                    dev_size: int = 200, test_size: int = 200,
                    min_len: int = 3, max_len: int = 9):
    """Returns (splits, cipher) where splits maps name -> (src_lines, tgt_lines)."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if size < 1:
        raise ValueError("size must be >= 1")
    rng = np.random.default_rng([seed, 0x5E17])
    toks = _alphabet(vocab)
    cipher = _involution(vocab, rng) if task == "cipher" else None

    need = size + dev_size + test_size
    seen: set[tuple[str, ...]] = set()
    sources: list[list[str]] = []
    while len(sources) < need:
        n = int(rng.integers(min_len, max_len + 1))
        sent = tuple(toks[i] for i in rng.integers(0, vocab, size=n))
        if sent in seen:
            continue
        seen.add(sent)
        sources.append(list(sent))

    def lines(chunk: list[list[str]]):
        src = [" ".join(s) for s in chunk]
        tgt = [" ".join(translate_tokens(task, s, cipher)) for s in chunk]
        return src, tgt

    splits = {
        "train": lines(sources[:size]),
        "dev": lines(sources[size: size + dev_size]),
        "test": lines(sources[size + dev_size: need]),
    }
    return splits, cipher


def write_corpus(splits, out_dir: str, src_lang: str, tgt_lang: str) -> dict[str, tuple[str, str]]:
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for name, (src, tgt) in splits.items():
        sp = os.path.join(out_dir, f"{name}.{src_lang}")
        tp = os.path.join(out_dir, f"{name}.{tgt_lang}")
        with open(sp, "w", encoding="utf-8") as fh:
            fh.write("\n".join(src) + "\n")
        with open(tp, "w", encoding="utf-8") as fh:
            fh.write("\n".join(tgt) + "\n")
        paths[name] = (sp, tp)
    return paths
