import logging
import math

import numpy as np
import pytest

from bayesformer.bayes import BayesConfig, promote
from bayesformer.corpus import build_vocab, tokenize
from bayesformer.evaluation import (Hypothesis, Interpolation, NBestList, corpus_perplexity,
                                    model_scorer, neural_token_probs, read_nbest, report_from_probs,
                                    rescore_nbest, width_sweep, write_nbest, write_table)
from bayesformer.model import ModelConfig, TransformerLM
from bayesformer.ngram import train_ngram
from bayesformer.training import TrainConfig, train
from oracles import quadrature_token_probs, two_site_model


def toy(vocab=12, seed=0, **kw):
    cfg = dict(vocab_size=vocab, n_blocks=1, d_model=8, d_ff=16, n_heads=2, max_len=24)
    return TransformerLM(ModelConfig(**{**cfg, **kw}), seed=seed)


def random_seqs(n, vocab, seed=0, max_words=8):
    rng = np.random.default_rng(seed)
    return [[1, *rng.integers(4, vocab, size=int(rng.integers(1, max_words + 1))), 2] for _ in range(n)]


# ---------------------------------------------------------------- perplexity arithmetic

def test_uniform_model_has_perplexity_vocab_size():
    m = toy(vocab=10)
    m.params["out.W"].data[:] = 0.0
    m.params["out.b"].data[:] = 0.0
    r = corpus_perplexity(m, random_seqs(7, 10))
    assert r.perplexity == pytest.approx(10.0, rel=1e-12)


def test_two_probability_example():
    r = report_from_probs([np.array([0.5, 0.25])])
    assert r.token_count == 2 and r.perplexity == pytest.approx(2.8284, abs=1e-4)


def test_perplexity_matches_total_loglik():
    m = toy()
    seqs = random_seqs(20, 12, seed=4)
    r = corpus_perplexity(m, seqs)
    assert r.token_count == sum(len(s) - 1 for s in seqs)
    assert f"{math.exp(-r.total_loglik / r.token_count):.6g}" == f"{r.perplexity:.6g}"


def test_zero_probability_gives_infinite_perplexity():
    assert report_from_probs([np.array([0.5, 0.0])]).perplexity == math.inf


def test_oov_tokens_are_counted():
    r = corpus_perplexity(toy(), [[1, 3, 5, 3, 2], [1, 4, 2]])
    assert r.oov_count == 2 and r.oov_rate == pytest.approx(2 / 6)


def test_mean_mode_is_bit_identical_across_reruns():
    m = promote(toy(), BayesConfig.parse("1:FF,1:MHA", init_log_sigma=-1.0))
    seqs = random_seqs(30, 12, seed=2)
    a = neural_token_probs(m, seqs, "mean")
    b = neural_token_probs(m, seqs, "mean")
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))


def test_mc_mode_is_reproducible_from_the_rng_seed():
    m = promote(toy(), BayesConfig.parse("1:FF", init_log_sigma=-1.0))
    seqs = random_seqs(5, 12)
    a = corpus_perplexity(m, seqs, "mc", 8, np.random.default_rng(5))
    b = corpus_perplexity(m, seqs, "mc", 8, np.random.default_rng(5))
    assert a.perplexity == b.perplexity and a.mode == "mc(8)"


def test_mode_errors():
    m = promote(toy(), BayesConfig.parse("1:FF"))
    with pytest.raises(ValueError):
        neural_token_probs(m, [[1, 2]], "median")
    with pytest.raises(ValueError):
        neural_token_probs(m, [[1, 2]], "mc", 0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        corpus_perplexity(m, [])


def test_batching_does_not_change_probabilities():
    m = toy()
    seqs = random_seqs(9, 12, seed=8)
    a = neural_token_probs(m, seqs, batch_size=64)
    b = neural_token_probs(m, seqs, batch_size=2)
    assert all(np.allclose(x, y, rtol=1e-12, atol=0) for x, y in zip(a, b))


# ---------------------------------------------------------------- predictive integral oracle

@pytest.fixture(scope="module")
def quad_case():
    m = two_site_model()
    seqs = random_seqs(5, 10, seed=0)
    return m, seqs, quadrature_token_probs(m, seqs)


def test_quadrature_oracle_has_converged(quad_case):
    m, seqs, q = quad_case
    finer = quadrature_token_probs(m, seqs[:1], n_nodes=100)
    for a, b in zip(q, finer):
        assert np.log(a).sum() == pytest.approx(np.log(b).sum(), rel=1e-6)


def test_mc_matches_quadrature_while_mean_does_not(quad_case):
    m, seqs, q = quad_case
    mc = neural_token_probs(m, seqs, "mc", 2000, np.random.default_rng(1))
    mean = neural_token_probs(m, seqs, "mean")
    worst_mean = 0.0
    for a, b, c in zip(q, mc, mean):
        exact = np.log(a).sum()
        assert np.log(b).sum() == pytest.approx(exact, rel=0.01)
        worst_mean = max(worst_mean, abs(np.log(c).sum() / exact - 1))
    # the mean-weight shortcut is a different quantity, so the oracle must be able to tell
    assert worst_mean > 0.01


def test_mc_error_shrinks_with_k(quad_case):
    m, seqs, q = quad_case
    exact = sum(np.log(a).sum() for a in q)
    rng = np.random.default_rng(2)
    err = {}
    for k, reps in ((1, 24), (10, 12), (100, 6)):
        err[k] = np.mean([abs(sum(np.log(p).sum() for p in neural_token_probs(m, seqs, "mc", k, rng))
                              - exact) for _ in range(reps)])
    assert err[1] > err[10] > err[100]


# ---------------------------------------------------------------- small corpora

def test_single_word_vocabulary_learns_certainty():
    vocab = build_vocab(["a"])
    seqs = [tokenize("a", vocab)] * 16
    m = TransformerLM(ModelConfig(vocab_size=len(vocab), n_blocks=1, d_model=8, d_ff=8, n_heads=2,
                                  max_len=4), seed=0)
    train(m, seqs, seqs[:1], TrainConfig(learning_rate=0.5, epochs=60, batch_size=16))
    lp = np.log(neural_token_probs(m, seqs[:1])[0]).sum()
    assert -0.05 < lp <= 0.0


def test_interpolation_endpoints():
    lines = ["a b c", "a c b", "b a c", "c c a"] * 5
    vocab = build_vocab(lines)
    seqs = [tokenize(s, vocab) for s in lines]
    ng = train_ngram(seqs, vocab, order=3)
    m = toy(vocab=len(vocab))
    neural = corpus_perplexity(m, seqs)
    assert corpus_perplexity(m, seqs, interpolation=Interpolation(ng, 1.0)).perplexity == neural.perplexity
    ng_ppl = math.exp(-sum(np.log(ng.sentence_probs(s)).sum() for s in seqs) / neural.token_count)
    r0 = corpus_perplexity(m, seqs, interpolation=Interpolation(ng, 0.0))
    assert r0.perplexity == pytest.approx(ng_ppl, rel=1e-12) and r0.interpolation_lambda == 0.0


# ---------------------------------------------------------------- N-best rescoring

def lm_table(table):
    return lambda words: table[" ".join(words)]


def nbest(*hyps):
    return NBestList("u1", [Hypothesis(w.split(), ac, rank=i) for i, (w, ac) in enumerate(hyps)])


def test_rescoring_by_hand():
    nb = nbest(("a b", -10.0), ("a c", -11.0), ("a b c", -10.5))
    lm = lm_table({"a b": -4.0, "a c": -2.0, "a b c": -3.0})
    # totals with scale 1 and wip 0.5: -13.0, -12.0, -12.0
    ranked = rescore_nbest(nb, lm, lm_scale=1.0, wip=0.5)
    assert [" ".join(h.words) for h in ranked] == ["a c", "a b c", "a b"]
    assert [h.total for h in ranked] == [-12.0, -12.0, -13.0]


def test_zero_lm_scale_keeps_acoustic_order_and_ties_are_stable():
    nb = nbest(("x", -3.0), ("y", -1.0), ("z", -3.0), ("w", -1.0))
    lm = lm_table({"x": -9.0, "y": -1.0, "z": -0.1, "w": -5.0})
    ranked = rescore_nbest(nb, lm, lm_scale=0.0)
    assert [h.words[0] for h in ranked] == ["y", "w", "x", "z"]


def test_huge_lm_scale_ranks_by_lm():
    nb = nbest(("x", -3.0), ("y", -1.0), ("z", -2.0))
    lm = lm_table({"x": -1.0, "y": -3.0, "z": -2.0})
    assert [h.words[0] for h in rescore_nbest(nb, lm, lm_scale=1e6)] == ["x", "z", "y"]


def test_nbest_reader_skips_malformed_lines_but_keeps_utterances(tmp_path, caplog):
    p = tmp_path / "nb.tsv"
    p.write_text("u1\t-1.5\ta b\n"
                 "u1\tnot-a-number\ta c\n"
                 "u2\t-2\t-0.5\tb\n"
                 "u3\tonly-two-fields\n"
                 "\n"
                 "u1\t-3\tc\n")
    with caplog.at_level(logging.WARNING):
        lists = read_nbest(p)
    assert [nb.utt_id for nb in lists] == ["u1", "u2", "u3"]
    assert [h.words for h in lists[0].hypotheses] == [["a", "b"], ["c"]]
    assert lists[1].hypotheses[0].old_lm == -0.5 and lists[2].hypotheses == []
    assert sum("malformed" in r.message for r in caplog.records) == 2
    write_nbest(tmp_path / "out.tsv", lists)
    assert [len(nb.hypotheses) for nb in read_nbest(tmp_path / "out.tsv")] == [2, 1]


def test_model_scorer_matches_sentence_probability():
    vocab = build_vocab(["a b c"])
    m = toy(vocab=len(vocab))
    score = model_scorer(m, vocab)
    p = neural_token_probs(m, [tokenize("b a", vocab)])[0]
    assert score(["b", "a"]) == pytest.approx(np.log(p).sum(), rel=1e-14)


# ---------------------------------------------------------------- width sweep

@pytest.fixture(scope="module")
def sweep_data():
    seqs = random_seqs(24, 12, seed=1, max_words=5)
    return seqs[:16], seqs[16:]


def test_single_point_sweep_is_one_row_and_repeatable(sweep_data, tmp_path):
    tr, dev = sweep_data
    base = ModelConfig(vocab_size=12, n_blocks=1, d_model=8, d_ff=16, n_heads=2, max_len=12)
    tcfg = TrainConfig(epochs=2, batch_size=8)
    a = width_sweep([8], ["deterministic"], [0], tr, dev, base, tcfg)
    b = width_sweep([8], ["deterministic"], [0], tr, dev, base, tcfg)
    assert len(a) == 1 and a == b and a[0]["status"] == "ok"
    write_table(tmp_path / "t.tsv", a)
    lines = (tmp_path / "t.tsv").read_text().splitlines()
    assert lines[0].split("\t")[:3] == ["d_ff", "variant", "seed"] and len(lines) == 2


def test_failed_runs_are_recorded_and_the_sweep_continues(sweep_data):
    tr, dev = sweep_data
    base = ModelConfig(vocab_size=12, n_blocks=1, d_model=8, d_ff=16, n_heads=2, max_len=12)
    rows = width_sweep([0, 4], ["deterministic", "mystery", "bayes-FF-1"], [0], tr, dev, base,
                       TrainConfig(epochs=1, batch_size=8))
    assert len(rows) == 6
    status = [(r["d_ff"], r["variant"], r["status"] == "ok") for r in rows]
    assert status == [(0, "deterministic", False), (0, "mystery", False), (0, "bayes-FF-1", False),
                      (4, "deterministic", True), (4, "mystery", False), (4, "bayes-FF-1", True)]
