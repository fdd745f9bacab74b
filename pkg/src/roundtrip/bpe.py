"""Byte-pair-encoding subword segmentation learned jointly over both languages.

Merges are learned at word level (no end-of-word marker); segmented words use
"@@ " continuation so that undoing segmentation is exact.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable


@dataclass
class SubwordModel:
    """Ordered merge table; zero merges means identity segmentation."""

    merges: list[tuple[str, str]] = field(default_factory=list)

    def segment_word(self, word: str) -> list[str]:
        if not self.merges:
            return [word]
        symbols = list(word)
        ranks = {pair: i for i, pair in enumerate(self.merges)}
        while len(symbols) > 1:
            pairs = [(symbols[i], symbols[i + 1]) for i in range(len(symbols) - 1)]
            ranked = [(ranks[p], i) for i, p in enumerate(pairs) if p in ranks]
            if not ranked:
                break
            _, i = min(ranked)
            symbols = symbols[:i] + [symbols[i] + symbols[i + 1]] + symbols[i + 2:]
        return symbols

    def segment(self, tokens: list[str]) -> list[str]:
        out: list[str] = []
        for tok in tokens:
            pieces = self.segment_word(tok)
            out.extend(p + "@@" for p in pieces[:-1])
            out.append(pieces[-1])
        return out

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("#roundtrip-bpe v1\n")
            for a, b in self.merges:
                fh.write(f"{a}\t{b}\n")

    @classmethod
    def load(cls, path: str) -> "SubwordModel":
        merges = []
        with open(path, encoding="utf-8") as fh:
            header = fh.readline()
            if not header.startswith("#roundtrip-bpe"):
                raise ValueError(f"{path} is not a subword model file")
            for line in fh:
                a, b = line.rstrip("\n").split("\t")
                merges.append((a, b))
        return cls(merges)


def desegment(tokens: Iterable[str]) -> list[str]:
    """Invert segment(): join "@@"-continued pieces back into words."""
    words: list[str] = []
    buf = ""
    for tok in tokens:
        if tok.endswith("@@"):
            buf += tok[:-2]
        else:
            words.append(buf + tok)
            buf = ""
    if buf:
        words.append(buf)
    return words


def learn_subword_model(corpus: Iterable[list[str]], merges: int) -> SubwordModel:
    """Greedy pair-count BPE over a pooled token stream.

    Ties break on the lexicographically smallest pair so the merge table is
    deterministic. merges=0 returns the identity model.
    """
    if merges < 0:
        raise ValueError("merges must be >= 0")
    word_counts: Counter[tuple[str, ...]] = Counter()
    for tokens in corpus:
        for tok in tokens:
            word_counts[tuple(tok)] += 1
    if not word_counts:
        raise ValueError("cannot learn a subword model from an empty corpus")
    if merges == 0:
        return SubwordModel([])

    vocab = dict(word_counts)
    table: list[tuple[str, str]] = []
    for _ in range(merges):
        pair_counts: Counter[tuple[str, str]] = Counter()
        for symbols, count in vocab.items():
            for i in range(len(symbols) - 1):
                pair_counts[(symbols[i], symbols[i + 1])] += count
        if not pair_counts:
            break
        best = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        table.append(best)
        merged = best[0] + best[1]
        new_vocab: dict[tuple[str, ...], int] = {}
        for symbols, count in vocab.items():
            out = []
            i = 0
            while i < len(symbols):
                if i < len(symbols) - 1 and (symbols[i], symbols[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            key = tuple(out)
            new_vocab[key] = new_vocab.get(key, 0) + count
        vocab = new_vocab
    return SubwordModel(table)
