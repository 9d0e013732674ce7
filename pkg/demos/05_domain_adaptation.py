"""Fine-tuning vs Bayesian adaptation on a small target corpus from a different grammar."""

from bayesformer.bayes import BayesConfig, promote
from bayesformer.corpus import SyntheticSpec, build_vocab, generate_synthetic, tokenize
from bayesformer.evaluation import corpus_perplexity
from bayesformer.model import ModelConfig, TransformerLM
from bayesformer.training import AdaptMode, TrainConfig, adapt, train

src = generate_synthetic(SyntheticSpec(n_words=80, n_classes=6, seed=10), 0, 2300, split=(2000, 300, 0))
tgt = generate_synthetic(SyntheticSpec(n_words=80, n_classes=6, seed=11), 1, 400, split=(100, 300, 0))
vocab = build_vocab(src.train + tgt.train)


def tok(lines):
    return [tokenize(s, vocab) for s in lines]


cfg = ModelConfig(vocab_size=len(vocab), n_blocks=1, d_model=16, d_ff=64, n_heads=2, max_len=32)
source = train(TransformerLM(cfg, seed=0), tok(src.train), tok(src.dev),
               TrainConfig(learning_rate=0.5, epochs=5)).model
print("source model on target dev: %.2f" % corpus_perplexity(source, tok(tgt.dev)).perplexity)

small = TrainConfig(learning_rate=0.05, epochs=10, patience=3)
ft = adapt(source, tok(tgt.train), tok(tgt.dev), AdaptMode("fine_tune"), small)
print("fine-tuned on 100 target sentences: %.2f" % ft.best_dev_ppl)

# the Bayesian model keeps learning on the source, then adapts with the fine-tuned weights as prior
bsrc = train(promote(source, BayesConfig.parse("1:FF")), tok(src.train), tok(src.dev),
             TrainConfig(learning_rate=0.5, epochs=2)).model
ba = adapt(bsrc, tok(tgt.train), tok(tgt.dev), AdaptMode("bayes_adapt", reference=ft.model), small)
print("Bayes-adapted: %.2f" % ba.best_dev_ppl)
prior = ba.model.sites["blocks.1.W_1"].prior_mu
print("prior mean is the fine-tuned weight:", (prior == ft.model.params["blocks.1.W_1"].data).all())
