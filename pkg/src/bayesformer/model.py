"""Post-LN Transformer decoder language model.

Weights are stored ``(d_in, d_out)`` and applied as ``x @ W``.  Two forward
paths exist: :meth:`TransformerLM.forward` processes whole padded batches
with a causal mask and supports gradients, while :meth:`TransformerLM.step`
decodes one position at a time against an explicit key/value cache.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import erf

from . import autograd as ag
from .autograd import Tensor


class ConfigError(ValueError):
    """Invalid model, Bayesian or training configuration."""


class InputError(ValueError):
    """Token input the model cannot score."""


@dataclass
class ModelConfig:
    vocab_size: int
    n_blocks: int = 6
    d_model: int = 512
    d_ff: int = 4096
    n_heads: int = 8
    max_len: int = 256
    dropout_rate: float = 0.0
    tie_output: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("vocab_size", "n_blocks", "d_model", "d_ff", "n_heads", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def positional_encoding(max_len: int, d_model: int) -> np.ndarray:
    """Fixed sinusoidal encoding: sin on even dims, cos on odd dims."""
    pos = np.arange(max_len)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((max_len, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


def block_names(b: int) -> dict[str, str]:
    p = f"blocks.{b}."
    return {k: p + k for k in ("Q", "K", "V", "W_h", "W_1", "b_1", "W_2", "b_2",
                                "ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias")}


@dataclass
class BlockState:
    """Per-block key/value cache, ``keys``/``values`` shaped ``(heads, t, d_head)``."""

    keys: np.ndarray
    values: np.ndarray

    @classmethod
    def empty(cls, cfg: ModelConfig) -> "BlockState":
        z = np.zeros((cfg.n_heads, 0, cfg.d_head))
        return cls(z, z.copy())

    def __len__(self) -> int:
        return self.keys.shape[1]


@dataclass
class DecodeState:
    blocks: list[BlockState]
    position: int = 0


class TransformerLM:
    """Deterministic decoder LM; Bayesian sites are attached via :attr:`sites`.

    ``params`` holds every deterministic trainable tensor by name.  When a
    weight is promoted to a variational site its entry moves from ``params``
    to ``sites`` (see :mod:`bayesformer.bayes`).
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.sites: dict = {}
        self.bayes_config = None
        self.training = False
        self._pe = positional_encoding(config.max_len, config.d_model).astype(self.dtype)
        self._init_params(np.random.default_rng(seed))

    # ---------------------------------------------------------------- parameters

    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.config
        d, f, v = c.d_model, c.d_ff, c.vocab_size

        def normal(shape, std):
            return rng.normal(0.0, std, size=shape)

        self._add("emb", normal((v, d), 1.0))
        for b in range(1, c.n_blocks + 1):
            n = block_names(b)
            for k in ("Q", "K", "V", "W_h"):
                self._add(n[k], normal((d, d), 1.0 / math.sqrt(d)))
            self._add(n["W_1"], normal((d, f), 1.0 / math.sqrt(d)))
            self._add(n["b_1"], np.zeros(f))
            self._add(n["W_2"], normal((f, d), 1.0 / math.sqrt(f)))
            self._add(n["b_2"], np.zeros(d))
            for ln in ("ln1", "ln2"):
                self._add(n[f"{ln}.gain"], np.ones(d))
                self._add(n[f"{ln}.bias"], np.zeros(d))
        if not c.tie_output:
            self._add("out.W", normal((d, v), 1.0 / math.sqrt(d)))
        self._add("out.b", np.zeros(v))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)

    def weight_names(self) -> list[str]:
        """Every weight name in canonical order, deterministic or variational."""
        c = self.config
        names = ["emb"]
        for b in range(1, c.n_blocks + 1):
            names.extend(block_names(b).values())
        if not c.tie_output:
            names.append("out.W")
        names.append("out.b")
        return names

    def trainable(self) -> list[Tensor]:
        """All leaf tensors the optimizer updates, in a stable order."""
        out = []
        for name in self.weight_names():
            if name in self.sites:
                site = self.sites[name]
                out.extend([site.mu, site.log_sigma])
            else:
                out.append(self.params[name])
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Deterministic weights plus posterior means (the mean-materialised view)."""
        out = {}
        for name in self.weight_names():
            out[name] = self.sites[name].mu.data if name in self.sites else self.params[name].data
        return out

    def resolve(self, mode: str = "mean", rng: np.random.Generator | None = None,
                noise: dict[str, np.ndarray] | None = None) -> dict[str, Tensor]:
        """Concrete weights for one forward pass.

        ``mode="mean"`` uses each site's posterior mean; ``mode="sample"``
        draws ``mu + sigma * eps`` per site, taking ``eps`` from ``noise`` when
        given (common random numbers) and from ``rng`` otherwise.
        """
        weights = dict(self.params)
        for name, site in self.sites.items():
            if mode == "mean":
                weights[name] = site.mu
            elif mode == "sample":
                eps = None if noise is None else noise[name]
                weights[name] = site.sample(rng, eps=eps)
            else:
                raise ValueError(f"unknown weight mode {mode!r}")
        return weights

    # ---------------------------------------------------------------- forward

    def _check_ids(self, ids: np.ndarray) -> None:
        v = self.config.vocab_size
        bad = np.argwhere((ids < 0) | (ids >= v))
        if bad.size:
            pos = tuple(int(i) for i in bad[0])
            raise InputError(f"token id {int(ids[pos])} at position {pos} is outside vocabulary of size {v}")
        if ids.shape[-1] > self.config.max_len:
            raise InputError(f"sequence length {ids.shape[-1]} exceeds max_len={self.config.max_len}")

    def embed(self, ids: np.ndarray, weights: dict[str, Tensor] | None = None) -> Tensor:
        """Embedding rows plus sinusoidal positions, shape ``ids.shape + (d_model,)``."""
        ids = np.asarray(ids, dtype=np.int64)
        self._check_ids(ids)
        w = weights if weights is not None else self.resolve()
        x = ag.embedding(w["emb"], ids)
        return x + Tensor(self._pe[: ids.shape[-1]])

    def forward(self, ids, weights: dict[str, Tensor] | None = None,
                rng: np.random.Generator | None = None) -> Tensor:
        """Logits ``(..., T, vocab)``; row ``t`` scores the token following position ``t``.

        ``ids`` is ``(T,)`` or ``(B, T)``.  Dropout is active only when
        ``self.training`` is set and needs ``rng``.
        """
        ids = np.asarray(ids, dtype=np.int64)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None, :]
        w = weights if weights is not None else self.resolve()
        c = self.config
        B, T = ids.shape
        H, dh = c.n_heads, c.d_head
        causal = np.tril(np.ones((T, T), dtype=bool))
        scale = 1.0 / math.sqrt(dh)
        drop = c.dropout_rate if self.training else 0.0

        x = self.embed(ids, w)
        for b in range(1, c.n_blocks + 1):
            n = block_names(b)
            q = (x @ w[n["Q"]]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            k = (x @ w[n["K"]]).reshape(B, T, H, dh).transpose(0, 2, 3, 1)
            v = (x @ w[n["V"]]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            att = ag.softmax((q @ k) * scale, axis=-1, mask=causal)
            heads = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, c.d_model)
            y = ag.dropout(heads @ w[n["W_h"]], drop, rng, self.training) + x
            z = ag.layer_norm(y, w[n["ln1.gain"]], w[n["ln1.bias"]], c.ln_eps)
            h = ag.dropout(ag.gelu(z @ w[n["W_1"]] + w[n["b_1"]]), drop, rng, self.training)
            s = h @ w[n["W_2"]] + w[n["b_2"]] + z
            x = ag.layer_norm(s, w[n["ln2.gain"]], w[n["ln2.bias"]], c.ln_eps)
        out_w = ag.transpose(w["emb"]) if c.tie_output else w["out.W"]
        logits = x @ out_w + w["out.b"]
        return logits.reshape(T, c.vocab_size) if squeeze else logits

    def log_probs(self, ids, weights=None) -> np.ndarray:
        """Log-probabilities ``(..., T-1)`` of ``ids[1:]`` given their prefixes."""
        ids = np.asarray(ids, dtype=np.int64)
        logits = self.forward(ids[..., :-1], weights)
        return ag.token_log_probs(logits, ids[..., 1:]).data

    # ---------------------------------------------------------------- incremental decoding

    def new_state(self) -> DecodeState:
        return DecodeState([BlockState.empty(self.config) for _ in range(self.config.n_blocks)])

    def self_attention_step(self, x_t: np.ndarray, b: int, state: BlockState, position: int,
                            weights: dict[str, Tensor]) -> tuple[np.ndarray, BlockState]:
        """One position of the attention sub-layer of block ``b`` (1-based).

        Appends this position's key/value to the cache, attends over the cache
        only, projects, adds the residual and layer-normalises.
        """
        if len(state) != position:
            raise ValueError(f"cache holds {len(state)} positions but decoding position {position}")
        c = self.config
        n = block_names(b)
        W = {k: weights[n[k]].data for k in ("Q", "K", "V", "W_h", "ln1.gain", "ln1.bias")}
        H, dh = c.n_heads, c.d_head
        q = (x_t @ W["Q"]).reshape(H, dh)
        k = (x_t @ W["K"]).reshape(H, 1, dh)
        v = (x_t @ W["V"]).reshape(H, 1, dh)
        new = BlockState(np.concatenate([state.keys, k], axis=1),
                         np.concatenate([state.values, v], axis=1))
        scores = np.einsum("hd,htd->ht", q, new.keys) / math.sqrt(dh)
        scores -= scores.max(axis=-1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=-1, keepdims=True)
        heads = np.einsum("ht,htd->hd", p, new.values).reshape(c.d_model)
        y = heads @ W["W_h"] + x_t
        return _layer_norm_np(y, W["ln1.gain"], W["ln1.bias"], c.ln_eps), new

    def feed_forward(self, z_t: np.ndarray, b: int, weights: dict[str, Tensor]) -> np.ndarray:
        c = self.config
        n = block_names(b)
        h = _gelu_np(z_t @ weights[n["W_1"]].data + weights[n["b_1"]].data)
        s = h @ weights[n["W_2"]].data + weights[n["b_2"]].data + z_t
        return _layer_norm_np(s, weights[n["ln2.gain"]].data, weights[n["ln2.bias"]].data, c.ln_eps)

    def step(self, token: int, state: DecodeState,
             weights: dict[str, Tensor] | None = None) -> tuple[np.ndarray, DecodeState]:
        """Logits for the token after ``token``, extending every block's cache."""
        c = self.config
        if state.position >= c.max_len:
            raise InputError(f"sequence length exceeds max_len={c.max_len}")
        self._check_ids(np.array([token]))
        w = weights if weights is not None else self.resolve()
        x = w["emb"].data[token] + self._pe[state.position]
        blocks = []
        for b in range(1, c.n_blocks + 1):
            z, bs = self.self_attention_step(x, b, state.blocks[b - 1], state.position, w)
            x = self.feed_forward(z, b, w)
            blocks.append(bs)
        out_w = w["emb"].data.T if c.tie_output else w["out.W"].data
        return x @ out_w + w["out.b"].data, DecodeState(blocks, state.position + 1)

    def generate(self, rng: np.random.Generator, bos: int, eos: int, max_tokens: int = 50,
                 greedy: bool = False) -> list[int]:
        """Greedy or ancestral sampling from ``bos`` until ``eos`` (smoke tests)."""
        state, tok, out = self.new_state(), bos, []
        w = self.resolve()
        for _ in range(min(max_tokens, self.config.max_len)):
            logits, state = self.step(tok, state, w)
            p = np.exp(logits - logits.max())
            p /= p.sum()
            tok = int(np.argmax(p)) if greedy else int(rng.choice(len(p), p=p))
            if tok == eos:
                break
            out.append(tok)
        return out

    # ---------------------------------------------------------------- misc

    def train(self, mode: bool = True) -> "TransformerLM":
        self.training = mode
        return self

    def eval(self) -> "TransformerLM":
        return self.train(False)

    def copy(self) -> "TransformerLM":
        new = TransformerLM.__new__(TransformerLM)
        new.config = self.config
        new.dtype = self.dtype
        new.training = self.training
        new._pe = self._pe
        new.params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        new.sites = {k: s.copy() for k, s in self.sites.items()}
        new.bayes_config = self.bayes_config
        return new

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.trainable())


def _layer_norm_np(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps) * gain + bias


def _gelu_np(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))
