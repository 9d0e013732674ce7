"""Perplexity, predictive modes, interpolated scoring and N-best rescoring."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autograd import token_log_probs
from .model import TransformerLM
from .training import make_batch

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    corpus_id: str
    n_sentences: int
    token_count: int
    total_loglik: float
    perplexity: float
    mode: str
    oov_count: int = 0
    interpolation_lambda: float | None = None
    partner: str | None = None

    @property
    def oov_rate(self) -> float:
        return self.oov_count / self.token_count if self.token_count else 0.0

    def to_dict(self) -> dict:
        return {**asdict(self), "oov_rate": self.oov_rate}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


@dataclass
class Interpolation:
    """Per-word linear mix ``lam * p_neural + (1 - lam) * p_ngram``."""

    ngram: object
    lam: float
    partner: str = "4gram"

    def __post_init__(self):
        from .ngram import check_lambda
        check_lambda(self.lam)


def _mode_name(mode: str, k: int) -> str:
    return "mean" if mode == "mean" else f"mc({k})"


def neural_token_probs(model: TransformerLM, seqs: Sequence[Sequence[int]], mode: str = "mean",
                       k: int = 1, rng: np.random.Generator | None = None,
                       batch_size: int = 64) -> list[np.ndarray]:
    """Per-token predictive probabilities of ``seq[1:]`` for every sequence.

    ``mean`` evaluates once with posterior means.  ``mc`` averages the
    probabilities (not log-probabilities) over ``k`` weight samples; each
    sample is shared by all sentences of the corpus.
    """
    if mode not in ("mean", "mc"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if mode == "mc" and k < 1:
        raise ValueError("mc mode needs k >= 1")
    was_training = model.training
    model.eval()
    if mode == "mean" or not model.sites:
        weight_sets = [model.resolve("mean")]
        n = 1
    else:
        if rng is None:
            raise ValueError("mc mode needs an rng")
        weight_sets, n = None, k
    acc = [np.zeros(len(s) - 1) for s in seqs]
    for i in range(n):
        w = weight_sets[0] if weight_sets else model.resolve("sample", rng=rng)
        for start in range(0, len(seqs), batch_size):
            chunk = seqs[start:start + batch_size]
            lp = _target_logprobs(model, make_batch(chunk), w)
            for j, s in enumerate(chunk):
                acc[start + j] += np.exp(lp[j, : len(s) - 1])
    model.train(was_training)
    return [a / n for a in acc]


def _target_logprobs(model: TransformerLM, batch, weights) -> np.ndarray:
    logits = model.forward(batch.inputs, weights)
    return token_log_probs(logits, batch.targets).data


def token_probs(model: TransformerLM, seqs, mode: str = "mean", k: int = 1, rng=None,
                interpolation: Interpolation | None = None) -> list[np.ndarray]:
    probs = neural_token_probs(model, seqs, mode, k, rng)
    if interpolation is None:
        return probs
    from .ngram import interpolate
    ng = [interpolation.ngram.sentence_probs(s) for s in seqs]
    return [interpolate(p, q, interpolation.lam) for p, q in zip(probs, ng)]


def sentence_logprob(model: TransformerLM, sentence: Sequence[int], mode: str = "mean", k: int = 1,
                     rng=None, interpolation: Interpolation | None = None) -> float:
    """Natural-log probability of one ``[<s> ... </s>]`` sentence."""
    p = token_probs(model, [list(sentence)], mode, k, rng, interpolation)[0]
    return float(np.log(p).sum())


def report_from_probs(probs: Sequence[np.ndarray], corpus_id: str = "", mode: str = "mean",
                      oov_count: int = 0, interpolation: Interpolation | None = None) -> EvalReport:
    if not probs:
        raise ValueError("empty corpus")
    with np.errstate(divide="ignore"):  # a zero probability gives infinite perplexity
        total = float(sum(np.log(p).sum() for p in probs))
    n = int(sum(p.size for p in probs))
    return EvalReport(corpus_id, len(probs), n, total, math.exp(-total / n), mode, oov_count,
                      interpolation.lam if interpolation else None,
                      interpolation.partner if interpolation else None)


def corpus_perplexity(model: TransformerLM, seqs: Sequence[Sequence[int]], mode: str = "mean",
                      k: int = 1, rng=None, interpolation: Interpolation | None = None,
                      corpus_id: str = "", unk_id: int | None = 3) -> EvalReport:
    """Perplexity over every predicted token, end-of-sentence included."""
    if not seqs:
        raise ValueError("empty corpus")
    probs = token_probs(model, seqs, mode, k, rng, interpolation)
    oov = sum(int(np.sum(np.asarray(s[1:]) == unk_id)) for s in seqs) if unk_id is not None else 0
    return report_from_probs(probs, corpus_id, _mode_name(mode, k), oov, interpolation)


# ---------------------------------------------------------------- N-best rescoring

@dataclass
class Hypothesis:
    words: list[str]
    acoustic: float
    old_lm: float | None = None
    rank: int = 0
    lm_logprob: float = 0.0
    total: float = 0.0


@dataclass
class NBestList:
    utt_id: str
    hypotheses: list[Hypothesis] = field(default_factory=list)


def read_nbest(path) -> list[NBestList]:
    """Parse ``utt_id<TAB>acoustic<TAB>words`` or ``utt_id<TAB>acoustic<TAB>old_lm<TAB>words``.

    Malformed lines are skipped with a warning; an utterance whose every
    line is malformed is still returned, with no hypotheses.
    """
    lists: dict[str, NBestList] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            utt = fields[0].strip()
            if utt and utt not in lists:
                lists[utt] = NBestList(utt)
            try:
                if len(fields) == 3:
                    ac, old, words = float(fields[1]), None, fields[2]
                elif len(fields) == 4:
                    ac, old, words = float(fields[1]), float(fields[2]), fields[3]
                else:
                    raise ValueError(f"expected 3 or 4 tab-separated fields, got {len(fields)}")
                if not utt or not math.isfinite(ac) or (old is not None and not math.isfinite(old)):
                    raise ValueError("missing utterance id or non-finite score")
            except ValueError as e:
                log.warning("%s:%d: skipping malformed N-best entry (%s)", path, lineno, e)
                continue
            nb = lists[utt]
            nb.hypotheses.append(Hypothesis(words.split(), ac, old, rank=len(nb.hypotheses)))
    return list(lists.values())


def write_nbest(path, lists: Sequence[NBestList], with_scores: bool = False) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for nb in lists:
            for h in nb.hypotheses:
                cols = [nb.utt_id, repr(h.acoustic)]
                if with_scores:
                    cols += [repr(h.lm_logprob), repr(h.total)]
                elif h.old_lm is not None:
                    cols.append(repr(h.old_lm))
                f.write("\t".join(cols + [" ".join(h.words)]) + "\n")


def rescore_nbest(nbest: NBestList, lm_logprob: Callable[[list[str]], float], lm_scale: float = 1.0,
                  wip: float = 0.0) -> list[Hypothesis]:
    """Rank hypotheses by ``acoustic + lm_scale * lm_logprob + wip * n_words``.

    Sorting is descending and stable, so ties keep their original order.
    """
    scored = []
    for h in nbest.hypotheses:
        lp = float(lm_logprob(h.words))
        scored.append(Hypothesis(h.words, h.acoustic, h.old_lm, h.rank, lp,
                                 h.acoustic + lm_scale * lp + wip * len(h.words)))
    return sorted(scored, key=lambda h: (-h.total, h.rank))


def model_scorer(model: TransformerLM, vocab, interpolation: Interpolation | None = None,
                 mode: str = "mean", k: int = 1, rng=None) -> Callable[[list[str]], float]:
    """Natural-log LM score of a word list, via the model's vocabulary."""
    from .corpus import tokenize

    def score(words: list[str]) -> float:
        return sentence_logprob(model, tokenize(" ".join(words), vocab), mode, k, rng, interpolation)

    return score


# ---------------------------------------------------------------- feed-forward width sweep

SWEEP_FIELDS = ("d_ff", "variant", "seed", "dev_ppl", "best_epoch", "status")


def width_sweep(widths: Sequence[int], variants: Sequence[str], seeds: Sequence[int],
                train_seqs, dev_seqs, base_config, train_config, dropout_rate: float = 0.1,
                bayes_sites: str = "1:FF", bayes_train_config=None,
                on_row: Callable[[dict], None] | None = None) -> list[dict]:
    """Dev perplexity per ``(width, variant, seed)``.

    Variants are ``deterministic`` (no dropout), ``dropout`` and
    ``bayes-FF-1``.  The Bayesian variant is trained in two stages: the
    deterministic model of the same width and seed provides the prior means
    and the initial posterior means.  A failed run is recorded with its
    error and the sweep continues.
    """
    from dataclasses import replace

    from .bayes import BayesConfig, promote
    from .model import ModelConfig
    from .training import train

    rows = []
    for width in widths:
        for seed in seeds:
            tcfg = replace(train_config, seed=seed)
            det = None

            def deterministic():
                nonlocal det
                if det is None:
                    mcfg = ModelConfig(**{**base_config.to_dict(), "d_ff": width, "dropout_rate": 0.0})
                    det = train(TransformerLM(mcfg, seed=seed), train_seqs, dev_seqs, tcfg)
                return det

            for variant in variants:
                row = {"d_ff": width, "variant": variant, "seed": seed, "dev_ppl": float("nan"),
                       "best_epoch": -1, "status": "ok"}
                try:
                    if variant == "deterministic":
                        result = deterministic()
                    elif variant == "dropout":
                        mcfg = ModelConfig(**{**base_config.to_dict(), "d_ff": width,
                                              "dropout_rate": dropout_rate})
                        result = train(TransformerLM(mcfg, seed=seed), train_seqs, dev_seqs, tcfg)
                    elif variant.startswith("bayes"):
                        bm = promote(deterministic().model, BayesConfig.parse(bayes_sites))
                        bcfg = replace(bayes_train_config or train_config, seed=seed)
                        result = train(bm, train_seqs, dev_seqs, bcfg)
                    else:
                        raise ValueError(f"unknown variant {variant!r}")
                    row["dev_ppl"] = result.best_dev_ppl
                    row["best_epoch"] = result.best_epoch
                except Exception as e:  # noqa: BLE001 - a sweep records failures and moves on
                    log.exception("sweep run failed: d_ff=%s variant=%s seed=%s", width, variant, seed)
                    row["status"] = f"error: {e}"
                rows.append(row)
                if on_row:
                    on_row(row)
    return rows


def write_table(path, rows: Sequence[dict], fields: Sequence[str] = SWEEP_FIELDS) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=list(fields), delimiter="\t", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k) for k in fields})
