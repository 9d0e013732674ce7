"""Vocabularies, word-level tokenisation and synthetic Markov corpora."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BOS, EOS, UNK, PAD = "<s>", "</s>", "<unk>", "<pad>"
RESERVED = (PAD, BOS, EOS, UNK)


class Vocabulary:
    """Bijection between word strings and integer ids.

    The four reserved tokens always occupy ids 0-3 in the order
    ``<pad>, <s>, </s>, <unk>``.
    """

    def __init__(self, words: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def bos_id(self) -> int:
        return self.stoi[BOS]

    @property
    def eos_id(self) -> int:
        return self.stoi[EOS]

    @property
    def unk_id(self) -> int:
        return self.stoi[UNK]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, word: str) -> int:
        return self.stoi.get(word, self.unk_id)

    def word(self, idx: int) -> str:
        return self.itos[idx]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for i, w in enumerate(self.itos):
                f.write(f"{w}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        entries = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                word, _, idx = line.rpartition("\t")
                if not word:
                    raise ValueError(f"{path}:{lineno}: expected 'token<TAB>id'")
                entries.append((int(idx), word))
        entries.sort()
        if [i for i, _ in entries] != list(range(len(entries))):
            raise ValueError(f"{path}: ids are not a contiguous range from 0")
        words = [w for _, w in entries]
        if tuple(words[:4]) != RESERVED:
            raise ValueError(f"{path}: reserved tokens must occupy ids 0-3 as {RESERVED}")
        return cls(words[4:])


def build_vocab(corpus: Iterable[str], max_size: int | None = None, min_count: int = 1) -> Vocabulary:
    """Frequency-ranked vocabulary from whitespace-tokenised lines.

    Ties in frequency are broken lexicographically.  ``max_size`` limits the
    number of non-reserved words.
    """
    counts = Counter(w for line in corpus for w in line.split() if w not in RESERVED)
    ranked = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
    if max_size is not None:
        ranked = ranked[:max_size]
    return Vocabulary(ranked)


def tokenize(line: str, vocab: Vocabulary) -> list[int]:
    """``[<s>, ids..., </s>]`` for one whitespace-tokenised line; OOV words map to ``<unk>``."""
    return [vocab.bos_id, *(vocab.id(w) for w in line.split()), vocab.eos_id]


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    skip = {vocab.bos_id, vocab.eos_id, vocab.pad_id}
    return " ".join(vocab.word(i) for i in ids if i not in skip)


def read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f]


def write_lines(path, lines: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")


# ---------------------------------------------------------------- synthetic sources

@dataclass
class SyntheticSpec:
    """Order-2 Markov source over ``n_words`` symbols.

    Each word belongs to one of ``n_classes`` latent classes.  The class of
    the next word depends on the classes of the two previous words, and the
    word is then emitted from a class-specific distribution; this gives the
    chain a low-rank structure that a neural model can generalise over.
    ``concentration`` is the Dirichlet parameter of both tables (small values
    give peaky, low-entropy chains).  Sentence lengths are uniform on
    ``[min_len, max_len]`` and independent of the words.

    ``kind="uniform"`` ignores the class structure and makes every transition
    uniform; ``kind="deterministic"`` makes every transition certain.
    """

    n_words: int = 200
    n_classes: int = 8
    concentration: float = 0.1
    emission_concentration: float = 0.5
    min_len: int = 4
    max_len: int = 16
    kind: str = "class"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("class", "uniform", "deterministic"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.n_words < 1 or self.n_classes < 1:
            raise ValueError("n_words and n_classes must be >= 1")
        if not 0 <= self.min_len <= self.max_len:
            raise ValueError("need 0 <= min_len <= max_len")

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "SyntheticSpec":
        return cls(**json.loads(Path(path).read_text()))


class MarkovSource:
    """Materialised transition structure of a :class:`SyntheticSpec`."""

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        n, c = spec.n_words, spec.n_classes
        self.words = [f"w{i:03d}" for i in range(n)]
        if spec.kind == "class":
            self.word_class = rng.integers(0, c, size=n)
            # index c is the sentence-start pseudo class
            self.class_trans = rng.dirichlet(np.full(c, spec.concentration), size=(c + 1, c + 1))
            emit = np.zeros((c, n))
            for k in range(c):
                members = np.flatnonzero(self.word_class == k)
                if members.size == 0:
                    continue
                emit[k, members] = rng.dirichlet(np.full(members.size, spec.emission_concentration))
            # classes with no members cannot be emitted
            alive = emit.sum(axis=1) > 0
            self.class_trans[..., ~alive] = 0.0
            self.class_trans /= self.class_trans.sum(axis=-1, keepdims=True)
            self.emit = emit
        elif spec.kind == "deterministic":
            self.successor = rng.integers(0, n, size=(n + 1, n + 1))
        self._start = n  # pseudo word index for <s>

    def next_word_dist(self, prev2: int, prev1: int) -> np.ndarray:
        """Distribution over the next word given the two previous (``n_words`` = start)."""
        spec = self.spec
        n = spec.n_words
        if spec.kind == "uniform":
            return np.full(n, 1.0 / n)
        if spec.kind == "deterministic":
            p = np.zeros(n)
            p[self.successor[prev2, prev1]] = 1.0
            return p
        c2 = spec.n_classes if prev2 == self._start else self.word_class[prev2]
        c1 = spec.n_classes if prev1 == self._start else self.word_class[prev1]
        return self.class_trans[c2, c1] @ self.emit

    def end_prob(self, position: int) -> float:
        """Probability of ending after ``position`` words have been produced."""
        lo, hi = self.spec.min_len, self.spec.max_len
        if position < lo:
            return 0.0
        return 1.0 / (hi - position + 1)

    def sample_sentence(self, rng: np.random.Generator) -> list[int]:
        length = int(rng.integers(self.spec.min_len, self.spec.max_len + 1))
        prev2 = prev1 = self._start
        out = []
        for _ in range(length):
            p = self.next_word_dist(prev2, prev1)
            w = int(rng.choice(len(p), p=p))
            out.append(w)
            prev2, prev1 = prev1, w
        return out

    def sentence_logprob(self, words: Sequence[int]) -> float:
        """True log-probability (nats) of a sentence including its end marker."""
        prev2 = prev1 = self._start
        total = 0.0
        for pos, w in enumerate(words):
            stay = 1.0 - self.end_prob(pos)
            total += math.log(stay * self.next_word_dist(prev2, prev1)[w])
            prev2, prev1 = prev1, w
        total += math.log(self.end_prob(len(words)))
        return total

    def perplexity(self, sentences: Sequence[Sequence[int]]) -> float:
        """Perplexity of the true source on ``sentences`` (word ids, no markers)."""
        total = sum(self.sentence_logprob(s) for s in sentences)
        n = sum(len(s) + 1 for s in sentences)
        return math.exp(-total / n)


@dataclass
class SyntheticCorpus:
    spec: SyntheticSpec
    train: list[str]
    dev: list[str]
    test: list[str]
    source: MarkovSource = field(repr=False)

    def split_ids(self, name: str) -> list[list[int]]:
        lines = getattr(self, name)
        index = {w: i for i, w in enumerate(self.source.words)}
        return [[index[w] for w in line.split()] for line in lines]

    def true_perplexity(self, name: str) -> float:
        return self.source.perplexity(self.split_ids(name))

    def write(self, directory) -> dict:
        """One sentence per line per split, plus a manifest of line ranges."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest, start = {"spec": asdict(self.spec), "splits": {}}, 0
        for name in ("train", "dev", "test"):
            lines = getattr(self, name)
            write_lines(directory / f"{name}.txt", lines)
            manifest["splits"][name] = {"file": f"{name}.txt", "lines": [start, start + len(lines)]}
            start += len(lines)
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return manifest


def generate_synthetic(spec: SyntheticSpec, seed: int, n_sentences: int,
                       split: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> SyntheticCorpus:
    """Sample ``n_sentences`` from the source and split them by sentence index.

    ``spec.seed`` fixes the chain itself, ``seed`` the sampled sentences.
    ``split`` may also be given as absolute sentence counts.
    """
    source = MarkovSource(spec)
    rng = np.random.default_rng(seed)
    lines = [" ".join(source.words[w] for w in source.sample_sentence(rng)) for _ in range(n_sentences)]
    if all(isinstance(x, int) for x in split):
        sizes = list(split)
        if sum(sizes) != n_sentences:
            raise ValueError(f"split counts {split} do not add up to {n_sentences}")
    else:
        n_train = int(round(split[0] * n_sentences))
        n_dev = int(round(split[1] * n_sentences))
        sizes = [n_train, n_dev, n_sentences - n_train - n_dev]
    a, b = sizes[0], sizes[0] + sizes[1]
    return SyntheticCorpus(spec, lines[:a], lines[a:b], lines[b:], source)
