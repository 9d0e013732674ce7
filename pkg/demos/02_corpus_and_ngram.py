"""Sample a synthetic corpus with a known entropy and see how close a 4-gram gets."""

import math

from bayesformer.corpus import SyntheticSpec, build_vocab, generate_synthetic, tokenize
from bayesformer.ngram import train_ngram

spec = SyntheticSpec(n_words=200, n_classes=8, seed=0)
corpus = generate_synthetic(spec, seed=1, n_sentences=3000, split=(2000, 500, 500))
print("first training sentences:")
for line in corpus.train[:3]:
    print("  ", line)

# the source is an order-2 Markov chain, so its perplexity is known exactly
print("true dev perplexity: %.2f" % corpus.true_perplexity("dev"))

vocab = build_vocab(corpus.train)
train = [tokenize(s, vocab) for s in corpus.train]
dev = [tokenize(s, vocab) for s in corpus.dev]
print("vocabulary: %d words plus 4 reserved symbols" % (len(vocab) - 4))

for order in (2, 3, 4):
    lm = train_ngram(train, vocab, order=order)
    logs = [math.log(p) for s in dev for p in lm.sentence_probs(s)]
    print("%d-gram %s dev perplexity: %.2f" % (order, lm.method, math.exp(-sum(logs) / len(logs))))

# fewer than 10k training tokens switches smoothing to add-k
small = train_ngram(train[:100], vocab, order=4)
print("100-sentence model uses", small.method)
