"""Promote feed-forward weights to Gaussian sites and look at what changes."""

import numpy as np

from bayesformer.bayes import BayesConfig, kl_total, promote
from bayesformer.checkpoint import checkpoint_diff
from bayesformer.evaluation import corpus_perplexity
from bayesformer.model import ModelConfig, TransformerLM

cfg = ModelConfig(vocab_size=30, n_blocks=2, d_model=16, d_ff=32, n_heads=2, max_len=16)
det = TransformerLM(cfg, seed=0)

bayes = promote(det, BayesConfig.parse("1:FF"))
print("sites:", sorted(bayes.sites))
print("tensors that differ from the deterministic model:")
for name in checkpoint_diff(det, bayes):
    print("  ", name)

# posterior starts at the prior mean with small sigma, so the KL is only the variance term
print("KL at promotion: %.3f" % kl_total(bayes).item())
site = bayes.sites["blocks.1.W_1"]
site.log_sigma.data[:] = np.log(site.prior_sigma)
print("KL with W_1 at its prior (only W_2 contributes):", kl_total(bayes).item())

# mean-mode evaluation equals the deterministic model; Monte Carlo spreads with sigma
rng = np.random.default_rng(1)
seqs = [[1, *rng.integers(4, 30, size=6), 2] for _ in range(20)]
print("deterministic PPL: %.4f" % corpus_perplexity(det, seqs).perplexity)
for log_sigma in (-6.0, -3.0, -1.0):
    site.log_sigma.data[:] = log_sigma
    mc = corpus_perplexity(bayes, seqs, "mc", 50, np.random.default_rng(2)).perplexity
    print("log_sigma %5.1f: mean PPL %.4f, mc(50) PPL %.4f"
          % (log_sigma, corpus_perplexity(bayes, seqs).perplexity, mc))
