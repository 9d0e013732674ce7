"""Paired-seed desk-scale experiments on synthetic Markov corpora.

``generalization_trend`` compares a deterministic Transformer LM with its
two-stage Bayesian counterpart (sites on block 1's feed-forward weights,
prior means taken from the deterministic model) across feed-forward widths.
``adaptation_trend`` compares fine-tuning with Bayesian adaptation on a
small target corpus drawn from a different grammar.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

from .bayes import BayesConfig, promote
from .corpus import SyntheticSpec, build_vocab, generate_synthetic, tokenize
from .evaluation import corpus_perplexity, width_sweep
from .model import ModelConfig, TransformerLM
from .training import AdaptMode, TrainConfig, adapt, train

log = logging.getLogger(__name__)


@dataclass
class TrendSetup:
    spec: SyntheticSpec = field(default_factory=lambda: SyntheticSpec(n_words=200, n_classes=8, seed=0))
    corpus_seed: int = 1
    n_train: int = 2000
    n_dev: int = 500
    model: ModelConfig = field(default_factory=lambda: ModelConfig(
        vocab_size=1, n_blocks=1, d_model=32, d_ff=256, n_heads=4, max_len=32))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=0.5, epochs=30, patience=4))
    bayes_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=0.5, epochs=15, patience=4))
    sites: str = "1:FF"


def generalization_trend(widths=(64, 256, 1024), seeds=(0, 1, 2, 3, 4),
                         setup: TrendSetup | None = None, variants=("deterministic", "bayes-FF-1"),
                         on_row=None) -> list[dict]:
    """Rows of ``width_sweep`` on the synthetic corpus described by ``setup``."""
    setup = setup or TrendSetup()
    corpus = generate_synthetic(setup.spec, setup.corpus_seed, setup.n_train + setup.n_dev,
                                split=(setup.n_train, setup.n_dev, 0))
    vocab = build_vocab(corpus.train)
    tr = [tokenize(line, vocab) for line in corpus.train]
    dv = [tokenize(line, vocab) for line in corpus.dev]
    base = replace(setup.model, vocab_size=len(vocab))
    return width_sweep(widths, variants, seeds, tr, dv, base, setup.train,
                       bayes_sites=setup.sites, bayes_train_config=setup.bayes_train, on_row=on_row)


def paired_wins(rows: list[dict], better: str = "bayes-FF-1", baseline: str = "deterministic") -> dict:
    """Per width: number of seeds where ``better`` has dev PPL <= ``baseline``, and the seed count."""
    out: dict = {}
    table = {(r["d_ff"], r["variant"], r["seed"]): r["dev_ppl"] for r in rows if r["status"] == "ok"}
    for (w, v, s), ppl in table.items():
        if v != better or (w, baseline, s) not in table:
            continue
        wins, n = out.get(w, (0, 0))
        out[w] = (wins + int(ppl <= table[(w, baseline, s)]), n + 1)
    return out


# ---------------------------------------------------------------- adaptation

@dataclass
class AdaptSetup:
    source_spec: SyntheticSpec = field(default_factory=lambda: SyntheticSpec(
        n_words=200, n_classes=8, seed=10))
    target_spec: SyntheticSpec = field(default_factory=lambda: SyntheticSpec(
        n_words=200, n_classes=8, seed=11))
    corpus_seed: int = 2
    n_source: int = 20000
    n_source_dev: int = 500
    n_target: int = 500
    n_target_dev: int = 500
    model: ModelConfig = field(default_factory=lambda: ModelConfig(
        vocab_size=1, n_blocks=1, d_model=32, d_ff=256, n_heads=4, max_len=32))
    # source training runs to convergence; adaptation uses a tenth of the pretraining rate
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=0.5, epochs=25, patience=2))
    bayes_pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=0.5, epochs=3, patience=2))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=0.05, epochs=30, patience=4))
    bayes_adapt: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=0.05, epochs=30, patience=4))
    sites: str = "1:FF"


@dataclass
class AdaptRun:
    seed: int
    finetune_ppl: float
    bayes_adapt_ppl: float
    prior_matches_reference: bool
    seconds: float


def adaptation_data(setup: AdaptSetup):
    src = generate_synthetic(setup.source_spec, setup.corpus_seed, setup.n_source + setup.n_source_dev,
                             split=(setup.n_source, setup.n_source_dev, 0))
    tgt = generate_synthetic(setup.target_spec, setup.corpus_seed + 1, setup.n_target + setup.n_target_dev,
                             split=(setup.n_target, setup.n_target_dev, 0))
    vocab = build_vocab(src.train + tgt.train)

    def tok(lines):
        return [tokenize(line, vocab) for line in lines]

    return vocab, tok(src.train), tok(src.dev), tok(tgt.train), tok(tgt.dev)


def adaptation_trend(seeds=(0, 1, 2, 3, 4), setup: AdaptSetup | None = None, data=None,
                     on_run=None) -> list[AdaptRun]:
    """Fine-tuning vs. Bayesian adaptation, one paired run per seed.

    Per seed: pretrain a deterministic model on the source corpus, promote
    it and continue ELBO training on the source (the unadapted Bayesian
    model), fine-tune the deterministic model on the target corpus, then
    Bayes-adapt the Bayesian model with the fine-tuned weights as prior.
    """
    import numpy as np

    setup = setup or AdaptSetup()
    vocab, src_tr, src_dv, tgt_tr, tgt_dv = data or adaptation_data(setup)
    runs = []
    for seed in seeds:
        t0 = time.time()
        cfg = replace(setup.model, vocab_size=len(vocab))
        det = train(TransformerLM(cfg, seed=seed), src_tr, src_dv, replace(setup.pretrain, seed=seed)).model
        bayes_src = train(promote(det, BayesConfig.parse(setup.sites)), src_tr, src_dv,
                          replace(setup.bayes_pretrain, seed=seed)).model
        ft = adapt(det, tgt_tr, tgt_dv, AdaptMode("fine_tune"), replace(setup.finetune, seed=seed))
        ba = adapt(bayes_src, tgt_tr, tgt_dv, AdaptMode("bayes_adapt", reference=ft.model),
                   replace(setup.bayes_adapt, seed=seed))
        ref = ft.model.state_arrays()
        match = all(np.array_equal(site.prior_mu, ref[name]) for name, site in ba.model.sites.items())
        run = AdaptRun(seed, corpus_perplexity(ft.model, tgt_dv).perplexity,
                       corpus_perplexity(ba.model, tgt_dv).perplexity, match, time.time() - t0)
        log.info("adaptation seed %d: fine-tune %.3f, bayes-adapt %.3f", seed, run.finetune_ppl,
                 run.bayes_adapt_ppl)
        runs.append(run)
        if on_run:
            on_run(run)
    return runs
