"""Rerank a toy N-best list with a trained LM and watch the LM scale take over."""

from bayesformer.corpus import SyntheticSpec, build_vocab, generate_synthetic, tokenize
from bayesformer.evaluation import Hypothesis, NBestList, model_scorer, rescore_nbest
from bayesformer.model import ModelConfig, TransformerLM
from bayesformer.training import TrainConfig, train

corpus = generate_synthetic(SyntheticSpec(n_words=40, n_classes=4, seed=6), 0, 900, split=(800, 100, 0))
vocab = build_vocab(corpus.train)
tr = [tokenize(s, vocab) for s in corpus.train]
dv = [tokenize(s, vocab) for s in corpus.dev]
cfg = ModelConfig(vocab_size=len(vocab), n_blocks=1, d_model=16, d_ff=32, n_heads=2, max_len=32)
lm = train(TransformerLM(cfg, seed=0), tr, dv, TrainConfig(learning_rate=0.5, epochs=5)).model
score = model_scorer(lm, vocab)

# the reference plus two corruptions; the acoustic model slightly prefers a wrong one
ref = corpus.dev[0].split()
swapped = ref[1:2] + ref[:1] + ref[2:]
dropped = ref[:-1]
nb = NBestList("utt1", [Hypothesis(swapped, -10.0, rank=0), Hypothesis(ref, -10.5, rank=1),
                        Hypothesis(dropped, -11.0, rank=2)])
for h in nb.hypotheses:
    print("%-40s acoustic %6.1f  LM %7.2f" % (" ".join(h.words), h.acoustic, score(h.words)))

for scale in (0.0, 0.5, 1.0, 5.0):
    best = rescore_nbest(nb, score, lm_scale=scale)[0]
    print("lm_scale %.1f picks: %s" % (scale, " ".join(best.words)))

# every extra word costs LM probability, so a per-word bonus offsets the bias toward short hypotheses
for wip in (0.0, 2.0, 4.0):
    best = rescore_nbest(nb, score, lm_scale=1.0, wip=wip)[0]
    print("lm_scale 1.0, wip %.1f picks the reference: %s" % (wip, best.words == ref))
