"""Variational Gaussian sites over selected Transformer weight matrices.

A site replaces one weight matrix by a diagonal Gaussian posterior
``N(mu, sigma^2)`` with ``sigma = exp(log_sigma)``, paired with a fixed
diagonal Gaussian prior.  Training samples weights through the
reparameterisation ``mu + sigma * eps``; evaluation normally uses ``mu``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .model import ConfigError, ModelConfig, TransformerLM, block_names

SITE_KINDS = ("FF", "MHA", "EMB")
KIND_TENSORS = {"FF": ("W_1", "W_2"), "MHA": ("Q", "K", "V", "W_h")}
DEFAULT_LOG_SIGMA = -3.0


class VariationalSite:
    """Posterior (``mu``, ``log_sigma``) and prior (``prior_mu``, ``prior_sigma``) of one weight."""

    def __init__(self, mu, log_sigma, prior_mu, prior_sigma, name: str | None = None):
        mu = np.asarray(mu)
        dtype = mu.dtype if np.issubdtype(mu.dtype, np.floating) else np.float64
        shape = mu.shape
        log_sigma = np.broadcast_to(np.asarray(log_sigma, dtype=dtype), shape).copy()
        prior_mu = np.broadcast_to(np.asarray(prior_mu, dtype=dtype), shape).copy()
        prior_sigma = np.broadcast_to(np.asarray(prior_sigma, dtype=dtype), shape).copy()
        if np.any(prior_sigma <= 0):
            raise ConfigError(f"site {name}: prior_sigma must be positive")
        self.name = name
        self.mu = Tensor(mu.astype(dtype, copy=True), requires_grad=True, name=f"{name}.mu")
        self.log_sigma = Tensor(log_sigma, requires_grad=True, name=f"{name}.log_sigma")
        self.prior_mu = prior_mu
        self.prior_sigma = prior_sigma

    @property
    def shape(self) -> tuple:
        return self.mu.shape

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma.data)

    def sample(self, rng: np.random.Generator | None = None, eps: np.ndarray | None = None) -> Tensor:
        """``mu + exp(log_sigma) * eps`` with ``eps ~ N(0, I)`` unless ``eps`` is given."""
        if eps is None:
            eps = rng.standard_normal(self.shape)
        return self.mu + ag.exp(self.log_sigma) * Tensor(np.asarray(eps, dtype=self.mu.dtype))

    def kl(self) -> Tensor:
        return kl_site(self)

    def copy(self) -> "VariationalSite":
        new = VariationalSite(self.mu.data, self.log_sigma.data, self.prior_mu, self.prior_sigma, self.name)
        return new

    def arrays(self) -> dict[str, np.ndarray]:
        return {"mu": self.mu.data, "log_sigma": self.log_sigma.data,
                "prior_mu": self.prior_mu, "prior_sigma": self.prior_sigma}


def sample_site(site: VariationalSite, rng: np.random.Generator | None = None,
                eps: np.ndarray | None = None) -> Tensor:
    return site.sample(rng, eps)


def kl_site(site: VariationalSite) -> Tensor:
    """Closed-form KL(q || prior) summed over the site's elements.

    Written in terms of ``d = log_sigma - log prior_sigma`` so that a
    posterior equal to its prior gives exactly zero.
    """
    d = site.log_sigma - np.log(site.prior_sigma)
    dm = site.mu - site.prior_mu
    per_elem = 0.5 * ag.expm1(2.0 * d) - d + ag.square(dm) / (2.0 * site.prior_sigma ** 2)
    return per_elem.sum()


# ---------------------------------------------------------------- configuration

@dataclass
class BayesConfig:
    """Which weights are Bayesian and how they are sampled and evaluated.

    ``sites`` holds ``(block, kind)`` pairs; ``block`` is a 1-based block
    index for FF/MHA and the string ``"EMB"`` for the embedding layer.
    ``eval_mode`` is ``"mean"`` or ``"mc"`` (then ``k_eval`` samples).
    """

    sites: frozenset = field(default_factory=frozenset)
    k_train: int = 1
    eval_mode: str = "mean"
    k_eval: int = 1
    init_log_sigma: float = DEFAULT_LOG_SIGMA
    prior_sigma: float = 1.0

    def __post_init__(self):
        self.sites = frozenset(self.sites)
        for block, kind in self.sites:
            if kind not in SITE_KINDS:
                raise ConfigError(f"unknown site kind {kind!r}; expected one of {SITE_KINDS}")
            if (kind == "EMB") != (block == "EMB"):
                raise ConfigError(f"site ({block!r}, {kind!r}): EMB pairs only with the embedding layer "
                                  "and FF/MHA only with block indices")
            if kind != "EMB" and (not isinstance(block, int) or block < 1):
                raise ConfigError(f"site ({block!r}, {kind!r}): block index must be an integer >= 1")
        if self.k_train < 1:
            raise ConfigError(f"k_train must be >= 1, got {self.k_train}")
        if self.eval_mode not in ("mean", "mc"):
            raise ConfigError(f"eval_mode must be 'mean' or 'mc', got {self.eval_mode!r}")
        if self.eval_mode == "mc" and self.k_eval < 1:
            raise ConfigError(f"mc evaluation needs k_eval >= 1, got {self.k_eval}")
        if self.prior_sigma <= 0:
            raise ConfigError("prior_sigma must be positive")

    @classmethod
    def parse(cls, spec: str | list[str], **kwargs) -> "BayesConfig":
        """Build from strings such as ``"1:FF"``, ``"1-3:FF"``, ``"2:MHA"`` or ``"EMB"``."""
        items = spec.split(",") if isinstance(spec, str) else list(spec)
        sites = set()
        for item in (s.strip() for s in items):
            if not item:
                continue
            if item.upper() == "EMB":
                sites.add(("EMB", "EMB"))
                continue
            m = re.fullmatch(r"(\d+)(?:-(\d+))?:(\w+)", item)
            if not m:
                raise ConfigError(f"cannot parse site {item!r}; use e.g. 1:FF, 1-3:FF, 2:MHA or EMB")
            lo = int(m.group(1))
            hi = int(m.group(2) or lo)
            kind = m.group(3).upper()
            if hi < lo:
                raise ConfigError(f"empty block range in {item!r}")
            sites.update((b, kind) for b in range(lo, hi + 1))
        return cls(sites=frozenset(sites), **kwargs)

    def site_strings(self) -> list[str]:
        return sorted("EMB" if k == "EMB" else f"{b}:{k}" for b, k in self.sites)

    def to_dict(self) -> dict:
        return {"sites": self.site_strings(), "k_train": self.k_train, "eval_mode": self.eval_mode,
                "k_eval": self.k_eval, "init_log_sigma": self.init_log_sigma,
                "prior_sigma": self.prior_sigma}

    @classmethod
    def from_dict(cls, d: dict) -> "BayesConfig":
        d = dict(d)
        return cls.parse(d.pop("sites", []), **d)


def site_tensor_names(config: BayesConfig, model_config: ModelConfig) -> list[str]:
    """Weight names promoted by ``config``, sorted in canonical model order."""
    names = set()
    for block, kind in config.sites:
        if kind == "EMB":
            names.add("emb")
            continue
        if block > model_config.n_blocks:
            raise ConfigError(f"site {block}:{kind} refers to a block beyond n_blocks={model_config.n_blocks}")
        bn = block_names(block)
        names.update(bn[t] for t in KIND_TENSORS[kind])
    order = _canonical_order(model_config)
    return sorted(names, key=order.index)


def _canonical_order(cfg: ModelConfig) -> list[str]:
    names = ["emb"]
    for b in range(1, cfg.n_blocks + 1):
        names.extend(block_names(b).values())
    return names


def _prior_arrays(model: TransformerLM, prior) -> dict[str, np.ndarray]:
    if prior is None:
        return model.state_arrays()
    if isinstance(prior, TransformerLM):
        if prior.config.to_dict() | {"dropout_rate": 0} != model.config.to_dict() | {"dropout_rate": 0}:
            raise ConfigError("prior model architecture does not match the model config")
        return prior.state_arrays()
    if isinstance(prior, dict):
        return prior
    from .checkpoint import load_checkpoint  # path-like
    return _prior_arrays(model, load_checkpoint(prior))


# ---------------------------------------------------------------- model surgery

def promote(model: TransformerLM, config: BayesConfig, prior=None) -> TransformerLM:
    """Copy of ``model`` with the weights selected by ``config`` turned into sites.

    ``prior`` supplies the prior means (a model, a checkpoint path or a
    name->array dict); by default the model's own current weights.  Prior
    standard deviations are ``config.prior_sigma`` everywhere, posterior
    means start at the prior means and ``log_sigma`` at
    ``config.init_log_sigma``.  Each of Q, K, V and W_h becomes its own site.
    """
    names = site_tensor_names(config, model.config)
    arrays = _prior_arrays(model, prior)
    out = model.copy()
    for name in names:
        if name in out.sites:
            raise ConfigError(f"weight {name} is already a variational site")
        if name not in arrays:
            raise ConfigError(f"prior has no tensor named {name}")
        prior_mu = np.asarray(arrays[name], dtype=model.dtype)
        if prior_mu.shape != out.params[name].shape:
            raise ConfigError(f"prior tensor {name} has shape {prior_mu.shape}, "
                              f"model expects {out.params[name].shape}")
        out.sites[name] = VariationalSite(prior_mu, config.init_log_sigma, prior_mu,
                                          config.prior_sigma, name=name)
        del out.params[name]
    out.bayes_config = config
    return out


def set_prior(model: TransformerLM, prior, sigma: float = 1.0) -> None:
    """Reset every site's prior to the matching tensors of ``prior`` with std ``sigma``."""
    arrays = _prior_arrays(model, prior)
    for name, site in model.sites.items():
        mu = np.asarray(arrays[name], dtype=model.dtype)
        if mu.shape != site.shape:
            raise ConfigError(f"prior tensor {name} has shape {mu.shape}, site has {site.shape}")
        site.prior_mu = mu.copy()
        site.prior_sigma = np.full(site.shape, sigma, dtype=model.dtype)


def kl_total(model: TransformerLM) -> Tensor:
    """Sum of :func:`kl_site` over every site (a zero tensor without sites)."""
    total = None
    for name in model.weight_names():
        if name in model.sites:
            k = kl_site(model.sites[name])
            total = k if total is None else total + k
    return total if total is not None else Tensor(np.zeros((), dtype=model.dtype))


def materialize_mean(model: TransformerLM) -> TransformerLM:
    """Deterministic copy with each site replaced by its posterior mean."""
    out = model.copy()
    for name, site in list(out.sites.items()):
        out.params[name] = Tensor(site.mu.data.copy(), requires_grad=True, name=name)
    out.sites = {}
    out.bayes_config = None
    return out


def draw_noise(model: TransformerLM, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """One ``eps`` array per site, in canonical order (for common random numbers)."""
    return {name: rng.standard_normal(model.sites[name].shape)
            for name in model.weight_names() if name in model.sites}
