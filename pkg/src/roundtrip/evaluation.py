"""Decoding, corpus BLEU, perplexity and seed-paired delta reporting."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .data import ParallelPair, Vocab, make_batch
from .model import ModelParams, decode_step, encode, init_decoder_state, prepare_memory


@dataclass
class DecodeConfig:
    mode: str = "greedy"
    beam_width: int = 1
    max_len_factor: int = 2
    max_len_offset: int = 5

    def __post_init__(self):
        if self.mode not in ("greedy", "beam"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.beam_width < 1:
            raise ValueError("beam width must be >= 1")


def _caps(src_mask: np.ndarray, factor: int, offset: int) -> np.ndarray:
    content = src_mask.sum(axis=1).astype(int) - 2
    return np.array([factor * max(int(n), 1) + offset for n in content])


def greedy_decode(params: ModelParams, src_ids: np.ndarray, src_mask: np.ndarray,
                  bos_id: int, eos_id: int, max_len_factor: int = 2,
                  max_len_offset: int = 5) -> list[list[int]]:
    """Per-step argmax decode; equals beta=0 sampling token for token."""
    B = src_ids.shape[0]
    enc = encode(params, src_ids, src_mask)
    memory = prepare_memory(params.dec, enc)
    state = init_decoder_state(params.dec, memory)
    caps = _caps(src_mask, max_len_factor, max_len_offset)

    done = np.zeros(B, dtype=bool)
    outputs: list[list[int]] = [[] for _ in range(B)]
    prev = np.full(B, bos_id, dtype=np.int64)
    for t in range(int(caps.max())):
        logits, state = decode_step(params, state, memory, prev_ids=prev)
        ids = logits.data.argmax(axis=-1)
        for b in range(B):
            if not done[b]:
                outputs[b].append(int(ids[b]))
        done |= ~done & (ids == eos_id)
        done |= caps <= t + 1
        if done.all():
            break
        prev = ids
    return outputs


@dataclass
class _Hypothesis:
    ids: tuple[int, ...]
    logprob: float
    state: object

    def score(self) -> float:
        return self.logprob / max(len(self.ids), 1)


def beam_decode(params: ModelParams, src_ids: np.ndarray, src_mask: np.ndarray,
                bos_id: int, eos_id: int, config: DecodeConfig) -> list[int]:
    """Length-normalized beam search over one sentence; width 1 is greedy."""
    if src_ids.shape[0] != 1:
        raise ValueError("beam_decode operates on a single sentence")
    enc = encode(params, src_ids, src_mask)
    memory = prepare_memory(params.dec, enc)
    state0 = init_decoder_state(params.dec, memory)
    cap = int(_caps(src_mask, config.max_len_factor, config.max_len_offset)[0])
    width = config.beam_width

    live = [_Hypothesis((), 0.0, state0)]
    finished: list[_Hypothesis] = []
    for _ in range(cap):
        candidates: list[tuple[float, int, _Hypothesis, object]] = []
        for hyp in live:
            prev = np.array([hyp.ids[-1] if hyp.ids else bos_id], dtype=np.int64)
            logits, new_state = decode_step(params, hyp.state, memory, prev_ids=prev)
            row = logits.data[0]
            row = row - row.max()
            logp = row - math.log(np.exp(row).sum())
            top = np.argsort(-logp, kind="stable")[: width]
            for tok in top:
                candidates.append((hyp.logprob + float(logp[tok]), int(tok),
                                   hyp, new_state))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for logprob, tok, parent, new_state in candidates[: width]:
            hyp = _Hypothesis(parent.ids + (tok,), logprob, new_state)
            if tok == eos_id:
                finished.append(hyp)
            else:
                live.append(hyp)
        if not live or len(finished) >= width:
            break
    pool = finished if finished else live
    best = max(pool, key=lambda h: (h.score(), -len(h.ids)))
    return list(best.ids)


def hypothesis_score(params: ModelParams, src_ids: np.ndarray, src_mask: np.ndarray,
                     hyp_ids: list[int], bos_id: int) -> float:
    """Length-normalized model log-probability of a decoded hypothesis."""
    from . import autodiff as ad

    enc = encode(params, src_ids, src_mask)
    memory = prepare_memory(params.dec, enc)
    state = init_decoder_state(params.dec, memory)
    prev = np.array([bos_id], dtype=np.int64)
    total = 0.0
    for tok in hyp_ids:
        logits, state = decode_step(params, state, memory, prev_ids=prev)
        nll = ad.cross_entropy(logits, np.array([tok]))
        total -= float(nll.data[0])
        prev = np.array([tok], dtype=np.int64)
    return total / max(len(hyp_ids), 1)


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

_TOKENIZE_RE = re.compile(r"([!-/:-@\[-`{-~])")


def tokenize_13a_approx(line: str, lowercase: bool = True) -> list[str]:
    """Whitespace tokenization with ASCII punctuation split off.

    Approximates the standard "13a" scheme closely enough for toy corpora;
    exact scorer parity is out of scope.
    """
    if lowercase:
        line = line.lower()
    return _TOKENIZE_RE.sub(r" \1 ", line).split()


@dataclass
class BleuStats:
    """Clipped n-gram matches/totals for n=1..4; additive across sentences."""

    matches: list[int] = field(default_factory=lambda: [0, 0, 0, 0])
    totals: list[int] = field(default_factory=lambda: [0, 0, 0, 0])
    hyp_len: int = 0
    ref_len: int = 0

    def update(self, hyp: list[str], ref: list[str]) -> None:
        self.hyp_len += len(hyp)
        self.ref_len += len(ref)
        for n in range(1, 5):
            hyp_ngrams = Counter(tuple(hyp[i: i + n]) for i in range(len(hyp) - n + 1))
            ref_ngrams = Counter(tuple(ref[i: i + n]) for i in range(len(ref) - n + 1))
            self.totals[n - 1] += max(len(hyp) - n + 1, 0)
            self.matches[n - 1] += sum(min(c, ref_ngrams[g])
                                       for g, c in hyp_ngrams.items())

    def merge(self, other: "BleuStats") -> "BleuStats":
        return BleuStats([a + b for a, b in zip(self.matches, other.matches)],
                         [a + b for a, b in zip(self.totals, other.totals)],
                         self.hyp_len + other.hyp_len,
                         self.ref_len + other.ref_len)

    def score(self) -> float:
        # orders the hypotheses are too short to populate are skipped, so an
        # identical corpus scores 100 regardless of sentence length; a zero
        # match count at any populated order still zeroes the geometric mean
        orders = [(m, t) for m, t in zip(self.matches, self.totals) if t > 0]
        if not orders or any(m == 0 for m, _ in orders):
            return 0.0
        log_prec = sum(math.log(m / t) for m, t in orders) / len(orders)
        bp = 1.0 if self.hyp_len > self.ref_len else math.exp(1.0 - self.ref_len /
                                                              max(self.hyp_len, 1))
        return 100.0 * bp * math.exp(log_prec)


def corpus_bleu(hypotheses: list[str], references: list[str],
                lowercase: bool = True) -> float:
    """Corpus-level 4-gram BLEU with brevity penalty, case-insensitive by default."""
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis/reference counts differ")
    if not hypotheses:
        raise ValueError("empty corpus")
    stats = BleuStats()
    for hyp, ref in zip(hypotheses, references):
        stats.update(tokenize_13a_approx(hyp, lowercase),
                     tokenize_13a_approx(ref, lowercase))
    return stats.score()


# ---------------------------------------------------------------------------
# Perplexity and reporting
# ---------------------------------------------------------------------------

def perplexity(params: ModelParams, corpus: list[ParallelPair], vocab: Vocab,
               batch_size: int = 48) -> float:
    """exp(mean per-token teacher-forced NLL), dropout off."""
    from .model import teacher_forced_nll

    total, tokens = 0.0, 0.0
    for i in range(0, len(corpus), batch_size):
        batch = make_batch(vocab, corpus[i: i + batch_size])
        loss_sum, n, _, _ = teacher_forced_nll(
            params, batch.src_ids, batch.src_mask, batch.tgt_ids, batch.tgt_mask,
            vocab.bos)
        total += float(loss_sum.data)
        tokens += n
    return float(np.exp(total / tokens))


def decode_corpus(params: ModelParams, vocab: Vocab, pairs: list[ParallelPair],
                  config: DecodeConfig, batch_size: int = 48) -> list[str]:
    """Decode sources to target-language text (tag and EOS stripped)."""
    out: list[str] = []
    specials = {vocab.pad, vocab.bos, vocab.eos}
    tag_ids = {vocab.token_to_id[t] for t in vocab.id_to_token
               if t.startswith("<") and t.endswith(">")}
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i: i + batch_size]
        batch = make_batch(vocab, chunk)
        if config.mode == "beam" and config.beam_width > 1:
            rows = []
            for b in range(batch.size):
                n = int(batch.src_mask[b].sum())
                rows.append(beam_decode(params, batch.src_ids[b: b + 1, :n],
                                        batch.src_mask[b: b + 1, :n],
                                        vocab.bos, vocab.eos, config))
        else:
            rows = greedy_decode(params, batch.src_ids, batch.src_mask,
                                 vocab.bos, vocab.eos, config.max_len_factor,
                                 config.max_len_offset)
        for ids in rows:
            toks = [vocab.id_to_token[i] for i in ids
                    if i not in specials and i not in tag_ids]
            out.append(" ".join(toks))
    return out


def evaluate_bleu(params: ModelParams, vocab: Vocab, pairs: list[ParallelPair],
                  config: DecodeConfig | None = None) -> float:
    config = config or DecodeConfig()
    hyps = decode_corpus(params, vocab, pairs, config)
    refs = [" ".join(p.target.tokens) for p in pairs]
    return corpus_bleu(hyps, refs)


def delta_bleu_report(baseline_runs: dict[str, dict[int, float]],
                      treatment_runs: dict[str, dict[int, float]]) -> list[dict]:
    """Per-direction mean/std of BLEU and of seed-paired deltas.

    Runs map direction -> {seed: bleu}; seed sets must match across
    conditions so deltas pair up. Std uses ddof=1 (ddof=0 for a single seed).
    """
    rows = []
    for direction in sorted(baseline_runs):
        base = baseline_runs[direction]
        if direction not in treatment_runs:
            raise ValueError(f"missing treatment runs for {direction}")
        treat = treatment_runs[direction]
        if set(base) != set(treat):
            raise ValueError(f"seed sets differ for {direction}: "
                             f"{sorted(base)} vs {sorted(treat)}")
        if len(base) < 2:
            raise ValueError("need at least 2 seeds per condition")
        seeds = sorted(base)
        b = np.array([base[s] for s in seeds])
        t = np.array([treat[s] for s in seeds])
        d = t - b
        rows.append({
            "direction": direction,
            "baseline_mean": float(b.mean()), "baseline_std": float(b.std(ddof=1)),
            "treatment_mean": float(t.mean()), "treatment_std": float(t.std(ddof=1)),
            "delta_mean": float(d.mean()), "delta_std": float(d.std(ddof=1)),
            "seeds": len(seeds),
        })
    return rows


def format_delta_report(rows: list[dict]) -> str:
    header = (f"{'direction':<12} {'baseline':>16} {'treatment':>16} "
              f"{'delta':>16}")
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['direction']:<12} "
            f"{r['baseline_mean']:>8.2f} ± {r['baseline_std']:<5.2f} "
            f"{r['treatment_mean']:>8.2f} ± {r['treatment_std']:<5.2f} "
            f"{r['delta_mean']:>+8.2f} ± {r['delta_std']:<5.2f}")
    return "\n".join(lines)
