"""ELBO training with reparameterised samples, plain SGD and LM adaptation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .bayes import BayesConfig, draw_noise, kl_total, promote, set_prior
from .model import ConfigError, TransformerLM

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Training NLL became non-finite; ``best`` holds the last good model."""

    def __init__(self, message: str, best: TransformerLM | None, metrics: list[dict]):
        super().__init__(message)
        self.best = best
        self.metrics = metrics


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    lr_decay: float = 0.5
    lr_floor: float = 1e-4
    batch_size: int = 32
    epochs: int = 10
    k_train: int = 1
    kl_scale_mode: str = "dataset"  # dataset: B/N per batch | full: 1 | none: 0
    clip_norm: float | None = 5.0
    seed: int = 0
    concat_sentences: bool = False
    select_initial: bool = False
    patience: int | None = None
    bucket_batches: int = 20

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.k_train < 1:
            raise ConfigError(f"k_train must be >= 1, got {self.k_train}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.kl_scale_mode not in ("dataset", "full", "none"):
            raise ConfigError(f"unknown kl_scale_mode {self.kl_scale_mode!r}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdaptMode:
    """``none``, ``fine_tune`` or ``bayes_adapt`` (which needs ``reference`` prior weights)."""

    kind: str = "none"
    reference: object = None

    def __post_init__(self):
        if self.kind not in ("none", "fine_tune", "bayes_adapt"):
            raise ConfigError(f"unknown adaptation mode {self.kind!r}")
        if self.kind == "bayes_adapt" and self.reference is None:
            raise ConfigError("bayes_adapt needs a reference (fine-tuned or pretrained) checkpoint")


# ---------------------------------------------------------------- batches

@dataclass
class Batch:
    inputs: np.ndarray   # (B, T) ids, padded
    targets: np.ndarray  # (B, T) next-token ids, padded
    mask: np.ndarray     # (B, T) 1.0 where the target is real

    @property
    def n_sentences(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_tokens(self) -> int:
        return int(self.mask.sum())


def make_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> Batch:
    """Right-padded batch of ``[<s> ... </s>]`` sequences."""
    if not seqs:
        raise ValueError("empty batch")
    T = max(len(s) for s in seqs) - 1
    inputs = np.full((len(seqs), T), pad_id, dtype=np.int64)
    targets = np.full((len(seqs), T), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), T))
    for i, s in enumerate(seqs):
        n = len(s) - 1
        inputs[i, :n] = s[:-1]
        targets[i, :n] = s[1:]
        mask[i, :n] = 1.0
    return Batch(inputs, targets, mask)


def batch_order(lengths: Sequence[int], batch_size: int, rng: np.random.Generator,
                bucket_batches: int = 20) -> list[np.ndarray]:
    """Shuffled batches of sentence indices with similar lengths.

    Sentences are shuffled, sorted by length within pools of
    ``bucket_batches`` batches, cut into batches and the batches shuffled.
    ``bucket_batches <= 1`` gives plain shuffled batches.
    """
    order = rng.permutation(len(lengths))
    if bucket_batches > 1:
        pool = batch_size * bucket_batches
        lengths = np.asarray(lengths)
        order = np.concatenate([
            chunk[np.argsort(lengths[chunk], kind="stable")]
            for chunk in (order[i:i + pool] for i in range(0, len(order), pool))])
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def concat_stream(seqs: Sequence[Sequence[int]], max_len: int) -> list[list[int]]:
    """Join sentences into a running stream and cut it into windows of ``max_len + 1``."""
    stream: list[int] = []
    for s in seqs:
        stream.extend(s if not stream else s[1:])
    return [stream[i:i + max_len + 1] for i in range(0, max(len(stream) - 1, 1), max_len)]


# ---------------------------------------------------------------- objective

@dataclass
class ElboTerms:
    loss: Tensor   # -(1/K) sum_k log p(batch | theta_k) + kl_weight * KL
    nll: Tensor
    kl: Tensor
    n_tokens: int
    kl_weight: float


def elbo_loss(model: TransformerLM, batch: Batch, rng: np.random.Generator | None = None,
              kl_weight: float = 1.0, k: int = 1,
              noise: Sequence[dict[str, np.ndarray]] | None = None) -> ElboTerms:
    """Negative ELBO of one batch with ``k`` reparameterised weight samples.

    ``noise`` fixes the per-sample ``eps`` draws (common random numbers);
    otherwise each sample draws its noise from ``rng`` in turn.  With no
    sites this is the summed token cross-entropy.
    """
    if batch.n_tokens == 0:
        raise ValueError("batch has no target tokens")
    mask = Tensor(batch.mask.astype(model.dtype))
    nll = None
    n_samples = k if model.sites else 1
    for i in range(n_samples):
        if model.sites:
            eps = noise[i] if noise is not None else draw_noise(model, rng)
            weights = model.resolve("sample", noise=eps)
        else:
            weights = model.resolve()
        logits = model.forward(batch.inputs, weights, rng=rng)
        term = -(ag.token_log_probs(logits, batch.targets) * mask).sum()
        nll = term if nll is None else nll + term
    if n_samples > 1:
        nll = nll * (1.0 / n_samples)
    kl = kl_total(model)
    loss = nll + kl * kl_weight if model.sites else nll
    return ElboTerms(loss, nll, kl, batch.n_tokens, kl_weight)


def sgd_step(model: TransformerLM, lr: float, clip_norm: float | None = None) -> bool:
    """``theta <- theta - lr * grad`` over every trainable tensor, then clear grads.

    Gradients are rescaled to global norm ``clip_norm`` when it is exceeded.
    Non-finite gradients skip the update (returns False).
    """
    params = model.trainable()
    sq = sum(float(np.vdot(p.grad, p.grad)) for p in params)
    ok = math.isfinite(sq)
    if not ok:
        log.warning("non-finite gradient; skipping SGD step")
    else:
        scale = 1.0
        norm = math.sqrt(sq)
        if clip_norm is not None and norm > clip_norm:
            scale = clip_norm / norm
        for p in params:
            p.data = p.data - (lr * scale) * p.grad
    for p in params:
        p.zero_grad()
    return ok


# ---------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    model: TransformerLM
    metrics: list[dict] = field(default_factory=list)
    best_dev_ppl: float = math.inf
    best_epoch: int = 0


def kl_weight_for(mode: str, batch_sentences: int, n_train: int) -> float:
    if mode == "dataset":
        return batch_sentences / n_train
    return 1.0 if mode == "full" else 0.0


def check_vocab(model: TransformerLM, seqs: Sequence[Sequence[int]]) -> None:
    v = model.config.vocab_size
    bad = sum(1 for s in seqs for t in s if not 0 <= t < v)
    if bad:
        raise ConfigError(f"{bad} token ids fall outside the model vocabulary of size {v}; "
                          "retokenise the corpus against the model's vocabulary")


def train(model: TransformerLM, train_seqs: Sequence[Sequence[int]], dev_seqs: Sequence[Sequence[int]],
          config: TrainConfig, log_path=None, checkpoint_path=None) -> TrainResult:
    """Optimise ``model`` in place; returns the best-dev-perplexity copy and the metrics log.

    The learning rate is multiplied by ``lr_decay`` after each epoch whose
    dev perplexity does not improve on the best so far.
    """
    from .checkpoint import save_checkpoint
    from .evaluation import corpus_perplexity

    if not train_seqs:
        raise ValueError("empty training corpus")
    check_vocab(model, train_seqs)
    check_vocab(model, dev_seqs)
    if config.concat_sentences:
        train_seqs = concat_stream(train_seqs, model.config.max_len)
    rng = np.random.default_rng(config.seed)
    n_train = len(train_seqs)
    lengths = [len(s) for s in train_seqs]
    stale = 0
    pad = 0
    lr = config.learning_rate
    metrics: list[dict] = []
    best, best_ppl, best_epoch = None, math.inf, 0
    logf = open(log_path, "a", encoding="utf-8") if log_path else None

    def record(rec):
        metrics.append(rec)
        if logf:
            logf.write(json.dumps(rec, sort_keys=True) + "\n")
            logf.flush()

    try:
        if config.select_initial or config.epochs == 0:
            best_ppl = corpus_perplexity(model, dev_seqs).perplexity
            best = model.copy()
            record({"epoch": 0, "step": 0, "nll": None, "kl": None, "dev_ppl": best_ppl,
                    "lr": lr, "seed": config.seed})
        step = 0
        for epoch in range(1, config.epochs + 1):
            model.train()
            tot_nll, tot_tok, last_kl = 0.0, 0, 0.0
            for idx in batch_order(lengths, config.batch_size, rng, config.bucket_batches):
                batch = make_batch([train_seqs[i] for i in idx], pad)
                klw = kl_weight_for(config.kl_scale_mode, len(idx), n_train)
                terms = elbo_loss(model, batch, rng, klw, config.k_train)
                nll = terms.nll.item()
                if not math.isfinite(nll):
                    raise TrainingDiverged(f"non-finite NLL at epoch {epoch}, step {step}", best, metrics)
                (terms.loss * (1.0 / terms.n_tokens)).backward()
                sgd_step(model, lr, config.clip_norm)
                tot_nll += nll
                tot_tok += terms.n_tokens
                last_kl = terms.kl.item()
                step += 1
            model.eval()
            dev_ppl = corpus_perplexity(model, dev_seqs).perplexity
            record({"epoch": epoch, "step": step, "nll": tot_nll / tot_tok, "kl": last_kl,
                    "dev_ppl": dev_ppl, "lr": lr, "seed": config.seed})
            if dev_ppl < best_ppl:
                best_ppl, best, best_epoch, stale = dev_ppl, model.copy(), epoch, 0
                if checkpoint_path:
                    save_checkpoint(best, checkpoint_path)
            else:
                lr = max(lr * config.lr_decay, config.lr_floor)
                stale += 1
                if config.patience is not None and stale >= config.patience:
                    break
    finally:
        model.eval()
        if logf:
            logf.close()
    if best is None:
        best = model.copy()
    return TrainResult(best, metrics, best_ppl, best_epoch)


# ---------------------------------------------------------------- adaptation

def adapt(model: TransformerLM, target_train, target_dev, mode: AdaptMode,
          config: TrainConfig | None = None, bayes_config: BayesConfig | None = None,
          log_path=None) -> TrainResult:
    """Adapt a source-trained model to a target corpus.

    ``fine_tune`` continues training on the target data.  ``bayes_adapt``
    promotes ``model`` (if it has no sites yet) with ``bayes_config``, resets
    every site prior to the reference weights with unit standard deviation
    and trains the ELBO on the target data.
    """
    config = config or TrainConfig(learning_rate=0.01)
    if mode.kind == "none":
        return TrainResult(model.copy())
    model = model.copy()
    if mode.kind == "bayes_adapt":
        if not model.sites:
            model = promote(model, bayes_config or BayesConfig.parse("1:FF"), prior=mode.reference)
        sigma = model.bayes_config.prior_sigma if model.bayes_config else 1.0
        set_prior(model, mode.reference, sigma=sigma)
    return train(model, target_train, target_dev, config, log_path=log_path)
