"""Two-stage training on a small synthetic corpus, then perplexity several ways."""

import numpy as np

from bayesformer.bayes import BayesConfig, promote
from bayesformer.corpus import SyntheticSpec, build_vocab, generate_synthetic, tokenize
from bayesformer.evaluation import Interpolation, corpus_perplexity, neural_token_probs
from bayesformer.model import ModelConfig, TransformerLM
from bayesformer.ngram import train_ngram, tune_lambda
from bayesformer.training import TrainConfig, train

corpus = generate_synthetic(SyntheticSpec(n_words=100, n_classes=6, seed=3), 0, 1500,
                            split=(1200, 300, 0))
vocab = build_vocab(corpus.train)
tr = [tokenize(s, vocab) for s in corpus.train]
dv = [tokenize(s, vocab) for s in corpus.dev]
print("true dev PPL: %.2f" % corpus.true_perplexity("dev"))

cfg = ModelConfig(vocab_size=len(vocab), n_blocks=1, d_model=16, d_ff=64, n_heads=2, max_len=32)
stage1 = train(TransformerLM(cfg, seed=0), tr, dv, TrainConfig(learning_rate=0.5, epochs=8))
for row in stage1.metrics:
    print("epoch %(epoch)2d  nll %(nll).3f  dev PPL %(dev_ppl).2f  lr %(lr).3g" % row)

# stage two: sites on block 1's feed-forward weights, prior means from stage one
bayes = promote(stage1.model, BayesConfig.parse("1:FF"))
stage2 = train(bayes, tr, dv, TrainConfig(learning_rate=0.5, epochs=4))
print("deterministic best dev PPL: %.2f" % stage1.best_dev_ppl)
print("Bayesian best dev PPL (mean weights): %.2f" % stage2.best_dev_ppl)
mc = corpus_perplexity(stage2.model, dv, "mc", 20, np.random.default_rng(0))
print("Bayesian dev PPL, mc(20): %.2f" % mc.perplexity)

ng = train_ngram(tr, vocab, order=4)
pn = np.concatenate(neural_token_probs(stage2.model, dv))
pg = np.concatenate([ng.sentence_probs(s) for s in dv])
lam, ppl = tune_lambda(pn, pg)
print("tuned neural weight %.2f gives interpolated PPL %.2f" % (lam, ppl))
print(corpus_perplexity(stage2.model, dv, interpolation=Interpolation(ng, lam), corpus_id="dev").to_dict())
