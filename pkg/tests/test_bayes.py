import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from bayesformer.autograd import Tensor
from bayesformer.bayes import (BayesConfig, VariationalSite, draw_noise, kl_site, kl_total,
                               materialize_mean, promote, sample_site, set_prior, site_tensor_names)
from bayesformer.checkpoint import checkpoint_diff
from bayesformer.checks import mc_kl
from bayesformer.model import ConfigError, ModelConfig, TransformerLM


def small(n_blocks=2, seed=0):
    return TransformerLM(ModelConfig(vocab_size=12, n_blocks=n_blocks, d_model=8, d_ff=16, n_heads=2,
                                     max_len=10), seed=seed)


def site(mu, sigma, pmu=0.0, psig=1.0):
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    return VariationalSite(mu, np.log(np.broadcast_to(sigma, mu.shape).astype(float)),
                           np.broadcast_to(pmu, mu.shape).astype(float),
                           np.broadcast_to(psig, mu.shape).astype(float))


def kl_quadrature(mu, sigma, pmu, psig):
    """KL(q || p) in one dimension by numerical integration of q log(q / p)."""
    q, p = stats.norm(mu, sigma), stats.norm(pmu, psig)
    val, _ = integrate.quad(lambda x: q.pdf(x) * (q.logpdf(x) - p.logpdf(x)),
                            mu - 12 * sigma, mu + 12 * sigma, limit=200)
    return val


# ---------------------------------------------------------------- sites and config

def test_site_invariants():
    with pytest.raises(ValueError):
        VariationalSite(np.zeros(3), np.zeros(2), np.zeros(3), np.ones(3))
    with pytest.raises(ValueError):
        VariationalSite(np.zeros(2), np.zeros(2), np.zeros(2), np.array([1.0, 0.0]))
    assert np.all(site([0.0, 1.0], 1e-9).sigma > 0)


def test_parse_sites():
    cfg = BayesConfig.parse("1-3:FF, 2:MHA, EMB")
    assert cfg.sites == {(1, "FF"), (2, "FF"), (3, "FF"), (2, "MHA"), ("EMB", "EMB")}
    assert cfg.site_strings() == ["1:FF", "2:FF", "2:MHA", "3:FF", "EMB"]
    assert BayesConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("bad", ["1:XX", "0:FF", "3-1:FF", "FF"])
def test_parse_rejects(bad):
    with pytest.raises(ConfigError):
        BayesConfig.parse(bad)


def test_config_invariants():
    with pytest.raises(ConfigError):
        BayesConfig(sites={("EMB", "FF")})
    with pytest.raises(ConfigError):
        BayesConfig(sites={(1, "EMB")})
    with pytest.raises(ConfigError):
        BayesConfig(k_train=0)
    with pytest.raises(ConfigError):
        BayesConfig(eval_mode="mc", k_eval=0)


# ---------------------------------------------------------------- promote

def test_empty_promotion_is_identity():
    m = small()
    p = promote(m, BayesConfig())
    assert p.sites == {} and checkpoint_diff(m, p) == []


def test_promote_ff_block_one():
    m = small()
    p = promote(m, BayesConfig.parse("1:FF"))
    assert sorted(p.sites) == ["blocks.1.W_1", "blocks.1.W_2"]
    for name, s in p.sites.items():
        assert np.array_equal(s.prior_mu, m.params[name].data)
        assert np.array_equal(s.mu.data, m.params[name].data)
        assert np.all(s.prior_sigma == 1.0)
        assert np.all(s.log_sigma.data == -3.0)
    assert "blocks.1.b_1" in p.params and "blocks.2.W_1" in p.params


def test_promote_mha_makes_four_independent_sites():
    p = promote(small(), BayesConfig.parse("1:MHA"))
    assert sorted(p.sites) == sorted(f"blocks.1.{k}" for k in ("Q", "K", "V", "W_h"))
    arrays = [p.sites[n].mu for n in p.sites]
    assert len({id(a) for a in arrays}) == 4


def test_promote_embedding_only_covers_input_table():
    p = promote(small(), BayesConfig.parse("EMB"))
    assert list(p.sites) == ["emb"] and "out.W" in p.params


def test_promote_rejects_missing_block_and_shape_mismatch():
    with pytest.raises(ConfigError):
        promote(small(n_blocks=2), BayesConfig.parse("3:FF"))
    other = TransformerLM(ModelConfig(vocab_size=12, n_blocks=2, d_model=8, d_ff=32, n_heads=2, max_len=10))
    with pytest.raises(ConfigError):
        promote(small(), BayesConfig.parse("1:FF"), prior=other)


def test_promote_leaves_source_untouched():
    m = small()
    before = {k: v.data.copy() for k, v in m.params.items()}
    p = promote(m, BayesConfig.parse("1:FF"))
    p.sites["blocks.1.W_1"].mu.data += 1.0
    assert all(np.array_equal(before[k], m.params[k].data) for k in before)


def test_site_tensor_names_canonical_order():
    cfg = ModelConfig(vocab_size=5, n_blocks=3, d_model=4, d_ff=4, n_heads=2, max_len=4)
    names = site_tensor_names(BayesConfig.parse("2:FF,1:MHA,EMB"), cfg)
    assert names == ["emb", "blocks.1.Q", "blocks.1.K", "blocks.1.V", "blocks.1.W_h",
                     "blocks.2.W_1", "blocks.2.W_2"]


def test_set_prior_copies_reference():
    m = small()
    p = promote(m, BayesConfig.parse("1:FF"))
    ref = small(seed=9)
    set_prior(p, ref, sigma=1.0)
    for name, s in p.sites.items():
        assert np.array_equal(s.prior_mu, ref.params[name].data)
        assert s.prior_mu is not ref.params[name].data


# ---------------------------------------------------------------- sampling

def test_zero_noise_returns_mean():
    s = site([1.0, 2.0], [0.1, 0.2])
    assert np.array_equal(sample_site(s, eps=np.zeros(2)).data, [1.0, 2.0])


def test_reparameterised_sample_by_hand():
    s = site([1.0, 2.0], [0.1, 0.2])
    assert np.allclose(sample_site(s, eps=np.array([1.0, -1.0])).data, [1.1, 1.8], atol=1e-15)


def test_sample_gradients_flow_to_mu_and_log_sigma():
    s = site([1.0, 2.0], [0.1, 0.2])
    eps = np.array([0.5, -2.0])
    sample_site(s, eps=eps).sum().backward()
    assert np.array_equal(s.mu.grad, [1.0, 1.0])
    assert np.allclose(s.log_sigma.grad, s.sigma * eps, atol=1e-15)


def test_sample_moments():
    s = site(np.array([0.5, -1.0, 2.0]), np.array([0.3, 1.0, 2.0]))
    rng = np.random.default_rng(0)
    draws = np.stack([sample_site(s, rng).data for _ in range(100_000)])
    se = s.sigma / math.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - s.mu.data) <= 3 * se)
    assert np.all(np.abs(draws.std(axis=0) / s.sigma - 1) <= 0.02)


# ---------------------------------------------------------------- KL

def test_kl_of_prior_with_itself_is_exactly_zero():
    rng = np.random.default_rng(1)
    pm, ps = rng.normal(size=7), rng.uniform(0.1, 3.0, size=7)
    assert kl_site(VariationalSite(pm, np.log(ps), pm, ps)).item() == 0.0


def test_kl_unit_shift():
    assert kl_site(site(1.0, 1.0)).item() == pytest.approx(0.5, abs=1e-15)


def test_kl_half_width_against_quadrature_and_sampling():
    s = site(0.0, 0.5)
    closed = kl_site(s).item()
    assert closed == pytest.approx(kl_quadrature(0.0, 0.5, 0.0, 1.0), rel=1e-9)
    assert closed == pytest.approx(0.318147, abs=5e-7)
    assert abs(mc_kl(s, 10_000_000, np.random.default_rng(0)) / closed - 1) < 0.01


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(0.05, 5), st.floats(-3, 3), st.floats(0.05, 5))
def test_kl_matches_quadrature_and_is_nonnegative(mu, sigma, pmu, psig):
    closed = kl_site(site(mu, sigma, pmu, psig)).item()
    assert closed >= 0.0
    assert closed == pytest.approx(kl_quadrature(mu, sigma, pmu, psig), rel=1e-6, abs=1e-9)


def test_kl_total_is_additive():
    assert kl_total(small()).item() == 0.0
    p = promote(small(), BayesConfig.parse("1:FF,2:FF"))
    rng = np.random.default_rng(2)
    for s in p.sites.values():
        s.mu.data = s.mu.data + rng.normal(size=s.shape)
    assert kl_total(p).item() == pytest.approx(sum(kl_site(s).item() for s in p.sites.values()), rel=1e-14)
    q = promote(small(), BayesConfig.parse("1:MHA"))
    one = q.sites["blocks.1.Q"]
    one.mu.data = one.mu.data + 0.3
    q.sites = {"blocks.1.Q": one, "blocks.1.K": one.copy()}
    assert kl_total(q).item() == pytest.approx(2 * kl_site(one).item(), rel=1e-14)


def test_kl_gradient_matches_analytic_forms():
    rng = np.random.default_rng(3)
    mu, pm = rng.normal(size=6), rng.normal(size=6)
    sig, ps = rng.uniform(0.2, 2, 6), rng.uniform(0.2, 2, 6)
    s = VariationalSite(mu, np.log(sig), pm, ps)
    kl_site(s).backward()
    assert np.allclose(s.mu.grad, (mu - pm) / ps ** 2, rtol=1e-6, atol=0)
    # d/d log_sigma = sigma * (-1/sigma + sigma / prior_sigma^2)
    assert np.allclose(s.log_sigma.grad, -1.0 + sig ** 2 / ps ** 2, rtol=1e-6, atol=1e-15)


# ---------------------------------------------------------------- materialisation

def test_promote_then_materialize_is_bit_identical():
    m = small()
    ids = np.array([1, 4, 7, 2])
    mat = materialize_mean(promote(m, BayesConfig.parse("1:FF,2:MHA,EMB")))
    assert mat.sites == {}
    assert np.array_equal(mat.forward(ids).data, m.forward(ids).data)


def test_materialized_output_ignores_sigma():
    p = promote(small(), BayesConfig.parse("1:FF"))
    ids = np.array([1, 3, 5])
    a = materialize_mean(p).forward(ids).data
    for s in p.sites.values():
        s.log_sigma.data = np.full(s.shape, 2.0)
    assert np.array_equal(materialize_mean(p).forward(ids).data, a)
    assert np.array_equal(materialize_mean(p).forward(ids).data, a)


def test_noise_replay_gives_identical_samples():
    p = promote(small(), BayesConfig.parse("1:FF"))
    noise = draw_noise(p, np.random.default_rng(5))
    ids = np.array([1, 3, 5, 6])
    a = p.forward(ids, p.resolve("sample", noise=noise)).data
    b = p.forward(ids, p.resolve("sample", noise=noise)).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, p.forward(ids).data)


def test_sampled_forward_converges_to_mean_linearly_in_sigma():
    m = small()
    rng = np.random.default_rng(6)
    ids = rng.integers(4, 12, size=(5, 8))
    ids[:, 0] = 1
    gaps = []
    for log_sigma in (-20.0, -25.0, -30.0):
        p = promote(m, BayesConfig.parse("1:FF,2:MHA", init_log_sigma=log_sigma))
        noise = draw_noise(p, np.random.default_rng(7))
        gaps.append(np.max(np.abs(p.log_probs(ids, p.resolve("sample", noise=noise)) - p.log_probs(ids))))
    # first-order behaviour: the gap shrinks by e^-5 per step of -5 in log_sigma
    assert gaps[1] / gaps[0] == pytest.approx(math.exp(-5.0), rel=1e-3)
    # at log_sigma = -30 the gap (~1e-13) is within a few hundred ulps of the log-probs
    assert gaps[2] / gaps[1] == pytest.approx(math.exp(-5.0), rel=2e-2)
    assert gaps[2] < 1e-11


def test_deterministic_limit_gap_is_the_first_order_term():
    from bayesformer import autograd as ag

    p = promote(small(), BayesConfig.parse("1:FF", init_log_sigma=-20.0))
    noise = draw_noise(p, np.random.default_rng(8))
    ids = np.array([1, 5, 9, 4, 11, 2])
    gap = p.log_probs(ids, p.resolve("sample", noise=noise)) - p.log_probs(ids)
    for t in range(len(ids) - 1):
        lp = ag.token_log_probs(p.forward(ids[:-1]), ids[1:])
        lp[t].backward()
        directional = sum(float((s.mu.grad * noise[n]).sum()) for n, s in p.sites.items())
        assert gap[t] == pytest.approx(math.exp(-20.0) * directional, rel=1e-5, abs=1e-15)


def test_sample_tensor_is_a_fresh_graph_node():
    s = site([0.0], [1.0])
    w = s.sample(np.random.default_rng(0))
    assert isinstance(w, Tensor) and w.requires_grad
