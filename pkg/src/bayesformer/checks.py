"""Numerical oracles: finite-difference gradients and Monte Carlo KL."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autograd import Tensor
from .bayes import BayesConfig, VariationalSite, draw_noise, kl_site, promote
from .model import ModelConfig, TransformerLM
from .training import elbo_loss, make_batch


def rel_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numerical_grad(f: Callable[[], float], t: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every element of ``t`` (mutated and restored)."""
    g = np.zeros_like(t.data)
    for idx in np.ndindex(t.shape):
        old = t.data[idx]
        t.data[idx] = old + step
        fp = f()
        t.data[idx] = old - step
        fm = f()
        t.data[idx] = old
        g[idx] = (fp - fm) / (2.0 * step)
    return g


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    n_elements: int


def grad_check(seed: int = 0, step: float = 1e-5, sites: str = "1:FF", n_blocks: int = 1,
               d_model: int = 8, d_ff: int = 16, n_heads: int = 2, vocab: int = 20,
               include_deterministic: bool = False) -> list[GradCheckResult]:
    """Backward vs. central differences for the full ELBO on a toy Bayesian model.

    The weight noise is drawn once and reused for every evaluation (common
    random numbers), so the objective is a deterministic function of the
    parameters.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(vocab_size=vocab, n_blocks=n_blocks, d_model=d_model, d_ff=d_ff,
                      n_heads=n_heads, max_len=16)
    base = TransformerLM(cfg, seed=seed)
    model = promote(base, BayesConfig.parse(sites)) if sites else base
    for site in model.sites.values():
        # move the posterior away from the prior so the KL gradient is non-trivial
        site.mu.data = site.mu.data + 0.1 * rng.standard_normal(site.shape)
        site.log_sigma.data = site.log_sigma.data + 0.5 * rng.standard_normal(site.shape)
    seqs = [[1, *rng.integers(4, vocab, size=int(rng.integers(2, 7))), 2] for _ in range(3)]
    batch = make_batch(seqs)
    noise = [draw_noise(model, rng)]
    kl_weight = 0.25

    def objective() -> float:
        return elbo_loss(model, batch, kl_weight=kl_weight, noise=noise).loss.item()

    elbo_loss(model, batch, kl_weight=kl_weight, noise=noise).loss.backward()
    targets: list[tuple[str, Tensor]] = []
    for name, site in model.sites.items():
        targets += [(f"{name}.mu", site.mu), (f"{name}.log_sigma", site.log_sigma)]
    if include_deterministic:
        targets += list(model.params.items())
    analytic = {name: t.grad.copy() for name, t in targets}
    out = []
    for name, t in targets:
        num = numerical_grad(objective, t, step)
        out.append(GradCheckResult(name, float(rel_error(analytic[name], num).max()), t.data.size))
    return out


def mc_kl(site: VariationalSite, n_samples: int, rng: np.random.Generator,
          chunk: int = 1_000_000) -> float:
    """Monte Carlo ``E_q[log q(theta) - log p(theta)]`` using draws from q."""
    mu = site.mu.data.ravel()
    sigma = np.exp(site.log_sigma.data.ravel())
    pm = site.prior_mu.ravel()
    ps = site.prior_sigma.ravel()
    # theta = mu + sigma * z, so (theta - pm) / ps = shift + scale * z
    shift, scale = (mu - pm) / ps, sigma / ps
    const = float(np.sum(np.log(ps) - np.log(sigma)))
    total, done = 0.0, 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        z = rng.standard_normal((n, mu.size))
        u = shift + scale * z
        zf, uf = z.ravel(), u.ravel()
        total += n * const + 0.5 * (float(uf @ uf) - float(zf @ zf))
        done += n
    return total / n_samples


@dataclass
class KLCheckResult:
    closed_form: float
    monte_carlo: float

    @property
    def rel_error(self) -> float:
        return abs(self.closed_form - self.monte_carlo) / abs(self.monte_carlo)


def random_site(rng: np.random.Generator, dim: int = 4) -> VariationalSite:
    return VariationalSite(rng.normal(0.0, 1.0, dim), np.log(rng.uniform(0.5, 2.0, dim)),
                           rng.normal(0.0, 1.0, dim), rng.uniform(0.5, 2.0, dim))


def kl_check(n_sites: int = 20, dim: int = 4, n_samples: int = 10_000_000,
             seed: int = 0) -> tuple[list[KLCheckResult], float]:
    """Closed-form vs. Monte Carlo KL on random sites, plus KL(prior || prior)."""
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(n_sites):
        site = random_site(rng, dim)
        results.append(KLCheckResult(kl_site(site).item(), mc_kl(site, n_samples, rng)))
    site = random_site(rng, dim)
    same = VariationalSite(site.prior_mu, np.log(site.prior_sigma), site.prior_mu, site.prior_sigma)
    return results, kl_site(same).item()


def kl_check_passes(results: list[KLCheckResult], self_kl: float, tol: float = 0.01) -> bool:
    return all(r.rel_error <= tol for r in results) and self_kl == 0.0 and all(
        math.isfinite(r.closed_form) for r in results)
