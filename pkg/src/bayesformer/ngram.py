"""Backoff n-gram language model (interpolated Kneser-Ney) with ARPA I/O.

Probabilities are stored the way ARPA files store them: every seen n-gram
keeps its final (already interpolated) probability and every seen context a
backoff weight, so lookup is the usual recursion

    p(w | h) = stored(h, w)                  if (h, w) was seen
             = bow(h) * p(w | h[1:])         otherwise.

Token ids follow :class:`bayesformer.corpus.Vocabulary`: ``<s>`` and
``<pad>`` are never predicted, every other id (``</s>`` and ``<unk>``
included) is.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from typing import Iterable, Sequence

import numpy as np

from .corpus import BOS, Vocabulary
from .model import ConfigError

ADD_K = 0.1
MIN_KN_TOKENS = 10_000


def check_lambda(lam: float) -> None:
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"interpolation weight must lie in [0, 1], got {lam}")


class NGramModel:
    def __init__(self, order: int, vocab: Vocabulary):
        self.order = order
        self.vocab = vocab
        self.probs: list[dict[tuple, float]] = [dict() for _ in range(order + 1)]  # index = n
        self.bows: dict[tuple, float] = {}
        self.method = ""
        self.discounts: list[float] = []

    @property
    def predictable(self) -> list[int]:
        skip = {self.vocab.bos_id, self.vocab.pad_id}
        return [i for i in range(len(self.vocab)) if i not in skip]

    def prob(self, context: Sequence[int], w: int) -> float:
        """Backoff-resolved ``p(w | context)``; only the last ``order - 1`` context ids matter."""
        if not 0 <= w < len(self.vocab):
            w = self.vocab.unk_id
        k = self.order - 1
        ctx = tuple(int(t) for t in context[-k:]) if k > 0 else ()
        w = int(w)
        bow = 1.0
        while True:
            p = self.probs[len(ctx) + 1].get(ctx + (w,))
            if p is not None:
                return bow * p
            if not ctx:
                return 0.0
            bow *= self.bows.get(ctx, 1.0)
            ctx = ctx[1:]

    def sentence_probs(self, seq: Sequence[int]) -> np.ndarray:
        """Probabilities of ``seq[1:]`` given their prefixes (``seq`` starts with ``<s>``)."""
        return np.array([self.prob(seq[:i], seq[i]) for i in range(1, len(seq))])

    def contexts(self) -> Iterable[tuple]:
        seen = set()
        for n in range(2, self.order + 1):
            for g in self.probs[n]:
                seen.add(g[:-1])
        return sorted(seen)

    # ---------------------------------------------------------------- ARPA

    def write_arpa(self, path) -> None:
        words = self.vocab.itos
        bos = self.vocab.bos_id
        unigrams = dict(self.probs[1])
        unigrams.setdefault((bos,), 0.0)
        sections = [unigrams] + [self.probs[n] for n in range(2, self.order + 1)]
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n\\data\\\n")
            for n, table in enumerate(sections, 1):
                f.write(f"ngram {n}={len(table)}\n")
            for n, table in enumerate(sections, 1):
                f.write(f"\n\\{n}-grams:\n")
                for g in sorted(table):
                    p = table[g]
                    lp = -99.0 if p <= 0.0 else math.log10(p)
                    line = f"{lp!r}\t{' '.join(words[i] for i in g)}"
                    if n < self.order and g in self.bows:
                        line += f"\t{math.log10(self.bows[g])!r}"
                    f.write(line + "\n")
            f.write("\n\\end\\\n")

    @classmethod
    def read_arpa(cls, path, vocab: Vocabulary | None = None) -> "NGramModel":
        """Load an ARPA file; unknown words extend ``vocab`` (or a fresh one)."""
        vocab = vocab if vocab is not None else Vocabulary()
        sections: dict[int, list[tuple]] = defaultdict(list)
        counts: dict[int, int] = {}
        n = 0
        with open(path, encoding="utf-8") as f:
            for raw in f:
                line = raw.strip()
                if not line:
                    continue
                if line == "\\data\\":
                    n = 0
                    continue
                if line.startswith("ngram ") and n == 0:
                    k, v = line[6:].split("=")
                    counts[int(k)] = int(v)
                    continue
                if line.endswith("-grams:"):
                    n = int(line[1:line.index("-")])
                    continue
                if line == "\\end\\":
                    break
                parts = line.split("\t") if "\t" in line else line.split()
                if "\t" in line:
                    lp, words = float(parts[0]), parts[1].split()
                    bow = float(parts[2]) if len(parts) > 2 else None
                else:
                    lp, words = float(parts[0]), parts[1:1 + n]
                    bow = float(parts[1 + n]) if len(parts) > 1 + n else None
                sections[n].append((lp, words, bow))
        order = max(counts) if counts else max(sections)
        for k, c in counts.items():
            if len(sections[k]) != c:
                raise ValueError(f"{path}: header says {c} {k}-grams, found {len(sections[k])}")
        for lp, words, _ in sections[1]:
            vocab.add(words[0])
        model = cls(order, vocab)
        model.method = "arpa"
        for k in range(1, order + 1):
            for lp, words, bow in sections[k]:
                g = tuple(vocab.add(w) for w in words)
                if not (k == 1 and words[0] == BOS):
                    model.probs[k][g] = 10.0 ** lp
                if bow is not None:
                    model.bows[g] = 10.0 ** bow
        return model


# ---------------------------------------------------------------- estimation

def _raw_counts(corpus: Sequence[Sequence[int]], order: int) -> list[Counter]:
    counts = [Counter() for _ in range(order + 1)]
    for seq in corpus:
        for i in range(1, len(seq)):
            for n in range(1, order + 1):
                if i - n + 1 < 0:
                    break
                counts[n][tuple(seq[i - n + 1:i + 1])] += 1
    return counts


def _kn_discount(counts: Counter) -> float:
    coc = Counter(counts.values())
    n1, n2 = coc.get(1, 0), coc.get(2, 0)
    if n1 == 0 or n2 == 0:
        return 0.5
    return min(max(n1 / (n1 + 2.0 * n2), 0.05), 0.95)


def train_ngram(corpus: Sequence[Sequence[int]], vocab: Vocabulary, order: int = 4,
                discount: float | None = None, method: str = "auto") -> NGramModel:
    """Estimate a backoff model from ``[<s> ... </s>]`` id sequences.

    ``method="kn"`` is interpolated Kneser-Ney with one discount per order
    (from count-of-counts unless ``discount`` is given); ``method="addk"``
    is add-0.1 on seen n-grams with normalised backoff for unseen ones;
    ``"auto"`` picks add-k below 10k training tokens.
    """
    corpus = [list(s) for s in corpus if len(s) >= 2]
    if not corpus:
        raise ValueError("empty corpus")
    if order < 1:
        raise ConfigError("order must be >= 1")
    n_tokens = sum(len(s) - 1 for s in corpus)
    if method == "auto":
        method = "kn" if n_tokens >= MIN_KN_TOKENS else "addk"
    if method not in ("kn", "addk"):
        raise ConfigError(f"unknown smoothing method {method!r}")
    model = NGramModel(order, vocab)
    model.method = method
    raw = _raw_counts(corpus, order)
    if method == "kn":
        _fit_kn(model, raw, discount)
    else:
        _fit_addk(model, raw, ADD_K)
    return model


def _group(counts: Counter) -> dict[tuple, dict[int, float]]:
    by_ctx: dict[tuple, dict[int, float]] = defaultdict(dict)
    for g, c in counts.items():
        by_ctx[g[:-1]][g[-1]] = c
    return by_ctx


def _fit_kn(model: NGramModel, raw: list[Counter], discount: float | None) -> None:
    order, bos = model.order, model.vocab.bos_id
    V = len(model.predictable)
    used = [Counter() for _ in range(order + 1)]
    used[order] = raw[order]
    for n in range(order - 1, 0, -1):
        cont = Counter()
        for g in raw[n + 1]:
            cont[g[1:]] += 1
        for g, c in raw[n].items():
            used[n][g] = c if g[0] == bos else cont.get(g, c)
    model.discounts = [0.0] + [discount if discount is not None else _kn_discount(used[n])
                               for n in range(1, order + 1)]
    # unigrams: discounted continuation counts interpolated with uniform
    D = model.discounts[1]
    total = sum(used[1].values())
    gamma = D * len(used[1]) / total
    for w in model.predictable:
        c = used[1].get((w,), 0)
        model.probs[1][(w,)] = max(c - D, 0.0) / total + gamma / V
    for n in range(2, order + 1):
        D = model.discounts[n]
        for ctx, row in _group(used[n]).items():
            total = sum(row.values())
            gamma = D * len(row) / total
            model.bows[ctx] = gamma
            for w, c in row.items():
                lower = model.prob(ctx[1:], w)
                model.probs[n][ctx + (w,)] = max(c - D, 0.0) / total + gamma * lower


def _fit_addk(model: NGramModel, raw: list[Counter], k: float) -> None:
    V = len(model.predictable)
    total = sum(raw[1].values())
    for w in model.predictable:
        model.probs[1][(w,)] = (raw[1].get((w,), 0) + k) / (total + k * V)
    for n in range(2, model.order + 1):
        for ctx, row in _group(raw[n]).items():
            denom = sum(row.values()) + k * V
            seen_lower = 0.0
            for w, c in row.items():
                model.probs[n][ctx + (w,)] = (c + k) / denom
                seen_lower += model.prob(ctx[1:], w)
            unseen_mass = k * (V - len(row)) / denom
            model.bows[ctx] = unseen_mass / (1.0 - seen_lower) if seen_lower < 1.0 - 1e-15 else 1.0


def ngram_prob(model: NGramModel, context: Sequence, w) -> float:
    """``p(w | context)``; string tokens are mapped through the vocabulary (OOV -> ``<unk>``)."""
    vocab = model.vocab
    ids = [vocab.id(t) if isinstance(t, str) else int(t) for t in context]
    wid = vocab.id(w) if isinstance(w, str) else int(w)
    return model.prob(ids, wid)


# ---------------------------------------------------------------- interpolation

def interpolate(p_neural, p_ngram, lam: float):
    """``lam * p_neural + (1 - lam) * p_ngram`` (scalars or arrays)."""
    check_lambda(lam)
    return lam * p_neural + (1.0 - lam) * p_ngram


def mixture_perplexity(p_neural: np.ndarray, p_ngram: np.ndarray, lam: float) -> float:
    return math.exp(-float(np.mean(np.log(interpolate(p_neural, p_ngram, lam)))))


def tune_lambda(p_neural, p_ngram, tol: float = 1e-4) -> tuple[float, float]:
    """Weight minimising dev perplexity of the per-word mixture.

    Golden-section search on ``[0, 1]``; the endpoints and the grid
    ``0.1 ... 0.9`` are also evaluated and the best candidate wins, so the
    result is never worse than either component alone.
    """
    pn = np.concatenate([np.ravel(p) for p in p_neural]) if isinstance(p_neural, list) else np.ravel(p_neural)
    pg = np.concatenate([np.ravel(p) for p in p_ngram]) if isinstance(p_ngram, list) else np.ravel(p_ngram)

    def f(lam):
        with np.errstate(divide="ignore"):
            return mixture_perplexity(pn, pg, lam)

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = 0.0, 1.0
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    candidates = [(a + b) / 2.0, 0.0, 1.0] + [i / 10.0 for i in range(1, 10)]
    scored = [(f(lam), lam) for lam in candidates]
    best_ppl, best_lam = min(scored)
    return best_lam, best_ppl
