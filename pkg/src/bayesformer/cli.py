"""Command-line entry point: ``bayesformer <command> [options]``.

Every command writes its outputs plus a ``manifest.json`` into a run
directory (``--run-dir``, or ``$BAYESFORMER_RUNS/<timestamp>-seed<seed>``).
Configuration comes from an optional JSON file (``--config``) whose keys
are the same names as the long flags (with underscores); flags given on the
command line override the file.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure
(divergence, failed oracle check), 4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bayes import BayesConfig, promote
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .corpus import SyntheticSpec, Vocabulary, build_vocab, generate_synthetic, read_lines, tokenize
from .model import ConfigError, InputError, ModelConfig, TransformerLM
from .training import AdaptMode, TrainConfig, TrainingDiverged, adapt, train

log = logging.getLogger("bayesformer")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
RUNS_ENV = "BAYESFORMER_RUNS"


class UsageError(Exception):
    """Bad flags, bad config values or missing input paths (exit 2)."""


class NumericalFailure(Exception):
    """An oracle check exceeded its tolerance or a result was not finite (exit 3)."""


# ---------------------------------------------------------------- run manifest

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    checksums: dict = field(default_factory=dict)
    version: str = __version__
    argv: list = field(default_factory=list)
    created: str = ""
    results: dict = field(default_factory=dict)

    def add_input(self, key: str, path) -> None:
        self.inputs[key] = str(path)
        self.checksums[str(path)] = sha256_file(path)

    def write(self, run_dir: Path) -> Path:
        path = run_dir / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def make_run_dir(args, seed: int) -> Path:
    if args.run_dir:
        d = Path(args.run_dir)
    else:
        root = Path(os.environ.get(RUNS_ENV, "runs"))
        d = root / f"{time.strftime('%Y%m%d-%H%M%S')}-seed{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------- config resolution

def _kind(f: dataclasses.Field) -> str:
    t = str(f.type)
    for name in ("bool", "int", "float", "str"):
        if name in t:
            return name
    return "str"


def _coerce(name: str, kind: str, value):
    if value is None:
        return None
    try:
        if kind == "bool":
            if isinstance(value, bool):
                return value
            if str(value).lower() in ("1", "true", "yes", "on"):
                return True
            if str(value).lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise UsageError(f"config field {name!r}: expected {kind}, got {value!r}") from None


MODEL_FIELDS = {f.name: _kind(f) for f in dataclasses.fields(ModelConfig) if f.name != "vocab_size"}
TRAIN_FIELDS = {f.name: _kind(f) for f in dataclasses.fields(TrainConfig)}
BAYES_FIELDS = {"sites": "str", "init_log_sigma": "float", "prior_sigma": "float"}
EVAL_FIELDS = {"eval_mode": "str", "k_eval": "int"}
SYNTH_FIELDS = {f.name: _kind(f) for f in dataclasses.fields(SyntheticSpec) if f.name != "seed"}

# smaller defaults than the library's full-size model, suited to desk-scale runs
CLI_MODEL_DEFAULTS = {"n_blocks": 1, "d_model": 32, "d_ff": 256, "n_heads": 4, "max_len": 64}


def add_field_flags(p: argparse.ArgumentParser, table: dict, title: str) -> None:
    g = p.add_argument_group(title)
    for name, kind in table.items():
        flag = "--" + name.replace("_", "-")
        g.add_argument(flag, dest=name, default=argparse.SUPPRESS, metavar=kind.upper(),
                       help=f"override config field {name}")


def resolve(args, table: dict, defaults: dict) -> dict:
    """defaults, then the JSON config file, then explicit flags."""
    out = dict(defaults)
    out.update({k: v for k, v in args.file_config.items() if k in table})
    out.update({k: getattr(args, k) for k in table if hasattr(args, k)})
    return {k: _coerce(k, table[k], v) for k, v in out.items() if k in table}


def load_config_file(args, allowed: set[str]) -> None:
    args.file_config = {}
    if not getattr(args, "config", None):
        return
    path = Path(args.config)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: top level must be an object of field: value pairs")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise UsageError(f"{path}: unknown config field(s) {', '.join(map(repr, unknown))}")
    args.file_config = data


def model_config(args, vocab_size: int) -> ModelConfig:
    defaults = {**{f.name: f.default for f in dataclasses.fields(ModelConfig) if f.name != "vocab_size"},
                **CLI_MODEL_DEFAULTS}
    return ModelConfig(vocab_size=vocab_size, **resolve(args, MODEL_FIELDS, defaults))


def train_config(args, **base) -> TrainConfig:
    defaults = {**dataclasses.asdict(TrainConfig(**base))}
    return TrainConfig(**resolve(args, TRAIN_FIELDS, defaults))


def bayes_config(args) -> BayesConfig:
    d = resolve(args, BAYES_FIELDS, {"sites": "1:FF", "init_log_sigma": -3.0, "prior_sigma": 1.0})
    return BayesConfig.parse(d.pop("sites"), **d)


def eval_settings(args) -> tuple[str, int]:
    d = resolve(args, EVAL_FIELDS, {"eval_mode": "mean", "k_eval": 1})
    if d["eval_mode"] not in ("mean", "mc"):
        raise UsageError(f"config field 'eval_mode': expected 'mean' or 'mc', got {d['eval_mode']!r}")
    if d["k_eval"] < 1:
        raise UsageError("config field 'k_eval' must be >= 1")
    return d["eval_mode"], d["k_eval"]


# ---------------------------------------------------------------- shared helpers

def need(path, what: str = "input") -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} path not found: {p}")
    return p


def load_model(path) -> tuple[TransformerLM, Vocabulary]:
    model = load_checkpoint(need(path, "checkpoint"))
    words = model.extra.get("vocab")
    if not words:
        raise UsageError(f"{path}: checkpoint carries no vocabulary")
    return model, Vocabulary(words[4:])


def save_model(model: TransformerLM, vocab: Vocabulary, path: Path) -> str:
    return save_checkpoint(model, path, extra={"vocab": vocab.itos, "manifest": "manifest.json"})


def read_corpus(path, vocab: Vocabulary) -> list[list[int]]:
    lines = [ln for ln in read_lines(need(path, "corpus")) if ln.strip()]
    if not lines:
        raise UsageError(f"corpus is empty: {path}")
    return [tokenize(ln, vocab) for ln in lines]


def finish(run_dir: Path, manifest: RunManifest, summary: dict) -> int:
    manifest.results = summary
    manifest.write(run_dir)
    print(json.dumps({"run_dir": str(run_dir), **summary}, sort_keys=True))
    return EXIT_OK


def new_manifest(args, config: dict, seed: int) -> RunManifest:
    return RunManifest(command=args.command, config=config, seed=seed, argv=list(args.argv),
                       created=time.strftime("%Y-%m-%dT%H:%M:%S"))


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    spec = SyntheticSpec(seed=args.spec_seed, **resolve(args, SYNTH_FIELDS, {}))
    split = tuple(int(x) for x in args.split.split(","))
    if len(split) != 3:
        raise UsageError("--split takes three comma-separated sentence counts (train,dev,test)")
    corpus = generate_synthetic(spec, args.seed, sum(split), split=split)
    run_dir = make_run_dir(args, args.seed)
    corpus.write(run_dir)
    spec.save(run_dir / "spec.json")
    m = new_manifest(args, {"spec": dataclasses.asdict(spec), "split": list(split)}, args.seed)
    m.outputs = {s: str(run_dir / f"{s}.txt") for s in ("train", "dev", "test")}
    summary = {f"true_ppl_{s}": corpus.true_perplexity(s) for s in ("train", "dev", "test")
               if getattr(corpus, s)}
    return finish(run_dir, m, summary)


def cmd_train(args) -> int:
    tcfg = train_config(args)
    if args.init:
        model, vocab = load_model(args.init)
        m_cfg = model.config
    else:
        vocab = Vocabulary.load(need(args.vocab, "vocabulary")) if args.vocab else \
            build_vocab(read_lines(need(args.train, "corpus")))
        m_cfg = model_config(args, len(vocab))
        model = TransformerLM(m_cfg, seed=tcfg.seed)
    tr, dv = read_corpus(args.train, vocab), read_corpus(args.dev, vocab)
    run_dir = make_run_dir(args, tcfg.seed)
    m = new_manifest(args, {"model": m_cfg.to_dict(), "train": tcfg.to_dict(),
                            "bayes": model.bayes_config.to_dict() if model.bayes_config else None},
                     tcfg.seed)
    m.add_input("train", args.train)
    m.add_input("dev", args.dev)
    if args.init:
        m.add_input("init", args.init)
    if args.vocab:
        m.add_input("vocab", args.vocab)
    vocab.save(run_dir / "vocab.txt")
    result = train(model, tr, dv, tcfg, log_path=run_dir / "metrics.jsonl")
    checksum = save_model(result.model, vocab, run_dir / "model.ckpt")
    m.outputs = {"checkpoint": str(run_dir / "model.ckpt"), "metrics": str(run_dir / "metrics.jsonl"),
                 "vocab": str(run_dir / "vocab.txt")}
    return finish(run_dir, m, {"best_dev_ppl": result.best_dev_ppl, "best_epoch": result.best_epoch,
                               "checkpoint_sha256": checksum})


def cmd_promote(args) -> int:
    model, vocab = load_model(args.checkpoint)
    bcfg = bayes_config(args)
    prior = load_model(args.prior)[0] if args.prior else None
    promoted = promote(model, bcfg, prior=prior)
    run_dir = make_run_dir(args, args.seed)
    m = new_manifest(args, {"bayes": bcfg.to_dict()}, args.seed)
    m.add_input("checkpoint", args.checkpoint)
    if args.prior:
        m.add_input("prior", args.prior)
    checksum = save_model(promoted, vocab, run_dir / "model.ckpt")
    m.outputs = {"checkpoint": str(run_dir / "model.ckpt")}
    return finish(run_dir, m, {"sites": sorted(promoted.sites), "checkpoint_sha256": checksum})


def cmd_adapt(args) -> int:
    model, vocab = load_model(args.checkpoint)
    tcfg = train_config(args, learning_rate=0.01)
    reference = None
    if args.mode == "bayes_adapt":
        if not args.reference:
            raise UsageError("--mode bayes_adapt needs --reference (the fine-tuned checkpoint)")
        reference, ref_vocab = load_model(args.reference)
        if ref_vocab != vocab:
            raise UsageError("--reference checkpoint uses a different vocabulary")
    mode = AdaptMode(args.mode, reference)
    tr, dv = read_corpus(args.train, vocab), read_corpus(args.dev, vocab)
    bcfg = bayes_config(args)
    run_dir = make_run_dir(args, tcfg.seed)
    m = new_manifest(args, {"mode": args.mode, "train": tcfg.to_dict(), "bayes": bcfg.to_dict()}, tcfg.seed)
    for key in ("checkpoint", "reference", "train", "dev"):
        if getattr(args, key):
            m.add_input(key, getattr(args, key))
    result = adapt(model, tr, dv, mode, tcfg, bayes_config=bcfg, log_path=run_dir / "metrics.jsonl")
    checksum = save_model(result.model, vocab, run_dir / "model.ckpt")
    m.outputs = {"checkpoint": str(run_dir / "model.ckpt"), "metrics": str(run_dir / "metrics.jsonl")}
    return finish(run_dir, m, {"best_dev_ppl": result.best_dev_ppl, "checkpoint_sha256": checksum})


def _interpolation(args, vocab):
    from .evaluation import Interpolation
    from .ngram import NGramModel

    if not args.ngram:
        return None
    ng = NGramModel.read_arpa(need(args.ngram, "n-gram"), Vocabulary(vocab.itos[4:]))
    if len(ng.vocab) != len(vocab):
        log.warning("n-gram model has %d words outside the neural vocabulary; they score as <unk>",
                    len(ng.vocab) - len(vocab))
    return Interpolation(ng, args.lam)


def cmd_eval(args) -> int:
    from .evaluation import corpus_perplexity

    model, vocab = load_model(args.checkpoint)
    mode, k = eval_settings(args)
    seqs = read_corpus(args.corpus, vocab)
    interp = _interpolation(args, vocab)
    run_dir = make_run_dir(args, args.seed)
    m = new_manifest(args, {"eval_mode": mode, "k_eval": k, "lam": args.lam if interp else None}, args.seed)
    for key in ("checkpoint", "corpus", "ngram"):
        if getattr(args, key):
            m.add_input(key, getattr(args, key))
    report = corpus_perplexity(model, seqs, mode, k, np.random.default_rng(args.seed), interp,
                               corpus_id=Path(args.corpus).name, unk_id=vocab.unk_id)
    if not math.isfinite(report.perplexity):
        raise NumericalFailure(f"perplexity is not finite ({report.perplexity})")
    report.save(run_dir / "report.json")
    m.outputs = {"report": str(run_dir / "report.json")}
    return finish(run_dir, m, report.to_dict())


def cmd_ngram(args) -> int:
    from .ngram import train_ngram

    if args.checkpoint:
        vocab = load_model(args.checkpoint)[1]
    elif args.vocab:
        vocab = Vocabulary.load(need(args.vocab, "vocabulary"))
    else:
        vocab = build_vocab(read_lines(need(args.train, "corpus")))
    seqs = read_corpus(args.train, vocab)
    run_dir = make_run_dir(args, 0)
    m = new_manifest(args, {"order": args.order, "method": args.method, "discount": args.discount}, 0)
    m.add_input("train", args.train)
    ng = train_ngram(seqs, vocab, args.order, args.discount, args.method)
    ng.write_arpa(run_dir / "model.arpa")
    m.outputs = {"arpa": str(run_dir / "model.arpa")}
    return finish(run_dir, m, {"method": ng.method, "order": ng.order})


def cmd_interpolate(args) -> int:
    from .evaluation import neural_token_probs
    from .ngram import NGramModel, mixture_perplexity, tune_lambda

    model, vocab = load_model(args.checkpoint)
    mode, k = eval_settings(args)
    ng = NGramModel.read_arpa(need(args.ngram, "n-gram"), Vocabulary(vocab.itos[4:]))
    seqs = read_corpus(args.dev, vocab)
    run_dir = make_run_dir(args, args.seed)
    m = new_manifest(args, {"eval_mode": mode, "k_eval": k}, args.seed)
    for key in ("checkpoint", "ngram", "dev"):
        m.add_input(key, getattr(args, key))
    pn = np.concatenate(neural_token_probs(model, seqs, mode, k, np.random.default_rng(args.seed)))
    pg = np.concatenate([ng.sentence_probs(s) for s in seqs])
    lam, ppl = tune_lambda(pn, pg)
    summary = {"lambda": lam, "ppl": ppl, "neural_ppl": mixture_perplexity(pn, pg, 1.0),
               "ngram_ppl": mixture_perplexity(pn, pg, 0.0)}
    return finish(run_dir, m, summary)


def cmd_rescore(args) -> int:
    from .evaluation import model_scorer, read_nbest, rescore_nbest, write_nbest

    model, vocab = load_model(args.checkpoint)
    mode, k = eval_settings(args)
    lists = read_nbest(need(args.nbest, "N-best"))
    interp = _interpolation(args, vocab)
    scorer = model_scorer(model, vocab, interp, mode, k, np.random.default_rng(args.seed))
    run_dir = make_run_dir(args, args.seed)
    m = new_manifest(args, {"lm_scale": args.lm_scale, "wip": args.wip, "eval_mode": mode, "k_eval": k,
                            "lam": args.lam if interp else None}, args.seed)
    for key in ("checkpoint", "nbest", "ngram"):
        if getattr(args, key):
            m.add_input(key, getattr(args, key))
    ranked = [type(nb)(nb.utt_id, rescore_nbest(nb, scorer, args.lm_scale, args.wip)) for nb in lists]
    write_nbest(run_dir / "rescored.tsv", ranked, with_scores=True)
    with open(run_dir / "best.txt", "w", encoding="utf-8") as f:
        for nb in ranked:
            f.write(f"{nb.utt_id}\t{' '.join(nb.hypotheses[0].words) if nb.hypotheses else ''}\n")
    m.outputs = {"rescored": str(run_dir / "rescored.tsv"), "best": str(run_dir / "best.txt")}
    return finish(run_dir, m, {"utterances": len(ranked)})


def _int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{flag} takes comma-separated integers, got {text!r}") from None


def cmd_sweep(args) -> int:
    from .evaluation import width_sweep, write_table
    from .experiments import paired_wins

    widths = _int_list(args.widths, "--widths")
    seeds = _int_list(args.seeds, "--seeds")
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    vocab = Vocabulary.load(need(args.vocab, "vocabulary")) if args.vocab else \
        build_vocab(read_lines(need(args.train, "corpus")))
    tr, dv = read_corpus(args.train, vocab), read_corpus(args.dev, vocab)
    base = model_config(args, len(vocab))
    tcfg = train_config(args)
    bcfg = bayes_config(args)
    run_dir = make_run_dir(args, seeds[0] if seeds else 0)
    m = new_manifest(args, {"model": base.to_dict(), "train": tcfg.to_dict(), "bayes": bcfg.to_dict(),
                            "widths": widths, "seeds": seeds, "variants": variants}, tcfg.seed)
    m.add_input("train", args.train)
    m.add_input("dev", args.dev)
    rows = width_sweep(widths, variants, seeds, tr, dv, base, tcfg, args.dropout,
                       bayes_sites=",".join(bcfg.site_strings()),
                       on_row=lambda r: log.info("sweep row %s", r))
    write_table(run_dir / "sweep.tsv", rows)
    m.outputs = {"table": str(run_dir / "sweep.tsv")}
    wins = {str(w): list(v) for w, v in paired_wins(rows).items()}
    return finish(run_dir, m, {"paired_wins": wins, "failed": sum(r["status"] != "ok" for r in rows)})


def cmd_grad_check(args) -> int:
    from .checks import grad_check

    run_dir = make_run_dir(args, args.seed)
    m = new_manifest(args, {"sites": args.sites, "step": args.step, "tol": args.tol}, args.seed)
    results = grad_check(seed=args.seed, step=args.step, sites=args.sites,
                         include_deterministic=args.all_params)
    worst = max(r.max_rel_error for r in results)
    summary = {"max_rel_error": worst, "tol": args.tol,
               "tensors": {r.name: r.max_rel_error for r in results}}
    finish(run_dir, m, summary)
    if not worst <= args.tol:
        raise NumericalFailure(f"gradient check failed: max relative error {worst:.3e} > {args.tol:g}")
    return EXIT_OK


def cmd_kl_check(args) -> int:
    from .checks import kl_check, kl_check_passes

    run_dir = make_run_dir(args, args.seed)
    m = new_manifest(args, {"n_sites": args.n_sites, "dim": args.dim, "samples": args.samples,
                            "tol": args.tol}, args.seed)
    results, self_kl = kl_check(args.n_sites, args.dim, args.samples, args.seed)
    worst = max(r.rel_error for r in results)
    finish(run_dir, m, {"max_rel_error": worst, "kl_prior_prior": self_kl, "tol": args.tol})
    if not kl_check_passes(results, self_kl, args.tol):
        raise NumericalFailure(f"KL check failed: max relative error {worst:.3e}, KL(p||p) = {self_kl!r}")
    return EXIT_OK


def cmd_replay(args) -> int:
    manifest = RunManifest.load(need(args.manifest, "manifest"))
    for path, digest in manifest.checksums.items():
        if not Path(path).exists() or sha256_file(path) != digest:
            raise UsageError(f"input {path} is missing or changed since the manifest was written")
    argv = list(manifest.argv)
    if "--run-dir" in argv:
        i = argv.index("--run-dir")
        del argv[i:i + 2]
    if args.run_dir:
        argv += ["--run-dir", args.run_dir]
    return main(argv)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bayesformer", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, func, help_text, config=(), seed=True):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=func, allowed=set().union(*(t.keys() for t in config)) if config else set())
        sp.add_argument("--run-dir", help=f"output directory (default: ${RUNS_ENV}/<timestamp>-seed<seed>)")
        if config:
            sp.add_argument("--config", help="JSON file of field: value overrides")
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        return sp

    sp = command("synth", cmd_synth, "sample a synthetic order-2 Markov corpus", (SYNTH_FIELDS,))
    sp.add_argument("--spec-seed", type=int, default=0, help="seed of the chain itself")
    sp.add_argument("--split", default="2000,500,500", help="train,dev,test sentence counts")
    add_field_flags(sp, SYNTH_FIELDS, "source")

    sp = command("train", cmd_train, "train a model (deterministic, or continue a promoted checkpoint)",
                 (MODEL_FIELDS, TRAIN_FIELDS), seed=False)
    sp.add_argument("--train", required=True)
    sp.add_argument("--dev", required=True)
    sp.add_argument("--vocab", help="vocabulary file (default: built from --train)")
    sp.add_argument("--init", help="start from this checkpoint instead of a fresh model")
    add_field_flags(sp, MODEL_FIELDS, "model")
    add_field_flags(sp, TRAIN_FIELDS, "training")

    sp = command("promote", cmd_promote, "turn named weights into variational sites", (BAYES_FIELDS,))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--prior", help="checkpoint supplying prior means (default: --checkpoint)")
    add_field_flags(sp, BAYES_FIELDS, "sites")

    sp = command("adapt", cmd_adapt, "adapt a source model to a target corpus",
                 (TRAIN_FIELDS, BAYES_FIELDS), seed=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mode", choices=("none", "fine_tune", "bayes_adapt"), required=True)
    sp.add_argument("--reference", help="prior-mean checkpoint for bayes_adapt")
    sp.add_argument("--train", required=True)
    sp.add_argument("--dev", required=True)
    add_field_flags(sp, TRAIN_FIELDS, "training")
    add_field_flags(sp, BAYES_FIELDS, "sites")

    for name, func, text in (("eval", cmd_eval, "corpus perplexity"),
                             ("rescore", cmd_rescore, "rerank an N-best list")):
        sp = command(name, func, text, (EVAL_FIELDS,))
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--ngram", help="ARPA model to interpolate with")
        sp.add_argument("--lam", type=float, default=0.5, help="neural weight when --ngram is given")
        add_field_flags(sp, EVAL_FIELDS, "evaluation")
        if name == "eval":
            sp.add_argument("--corpus", required=True)
        else:
            sp.add_argument("--nbest", required=True)
            sp.add_argument("--lm-scale", type=float, default=1.0)
            sp.add_argument("--wip", type=float, default=0.0, help="word insertion penalty")

    sp = command("ngram-train", cmd_ngram, "estimate a backoff n-gram model (ARPA output)", seed=False)
    sp.add_argument("--train", required=True)
    sp.add_argument("--vocab")
    sp.add_argument("--checkpoint", help="reuse this neural checkpoint's vocabulary")
    sp.add_argument("--order", type=int, default=4)
    sp.add_argument("--method", choices=("auto", "kn", "addk"), default="auto")
    sp.add_argument("--discount", type=float)

    sp = command("interpolate", cmd_interpolate, "tune the neural/n-gram mixture weight on dev",
                 (EVAL_FIELDS,))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--ngram", required=True)
    sp.add_argument("--dev", required=True)
    add_field_flags(sp, EVAL_FIELDS, "evaluation")

    sp = command("sweep", cmd_sweep, "feed-forward width sweep over variants and seeds",
                 (MODEL_FIELDS, TRAIN_FIELDS, BAYES_FIELDS), seed=False)
    sp.add_argument("--train", required=True)
    sp.add_argument("--dev", required=True)
    sp.add_argument("--vocab")
    sp.add_argument("--widths", default="64,256,1024")
    sp.add_argument("--seeds", default="0,1,2,3,4")
    sp.add_argument("--variants", default="deterministic,dropout,bayes-FF-1")
    sp.add_argument("--dropout", type=float, default=0.1)
    add_field_flags(sp, MODEL_FIELDS, "model")
    add_field_flags(sp, TRAIN_FIELDS, "training")
    add_field_flags(sp, BAYES_FIELDS, "sites")

    sp = command("grad-check", cmd_grad_check, "ELBO gradients vs. central differences")
    sp.add_argument("--sites", default="1:FF")
    sp.add_argument("--step", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--all-params", action="store_true", help="also check the deterministic weights")

    sp = command("kl-check", cmd_kl_check, "closed-form KL vs. Monte Carlo")
    sp.add_argument("--n-sites", type=int, default=20)
    sp.add_argument("--dim", type=int, default=4)
    sp.add_argument("--samples", type=int, default=10_000_000)
    sp.add_argument("--tol", type=float, default=0.01)

    sp = sub.add_parser("replay", help="rerun the command recorded in a manifest")
    sp.add_argument("manifest")
    sp.add_argument("--run-dir")
    sp.set_defaults(func=cmd_replay, allowed=set())
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        load_config_file(args, args.allowed)
        return args.func(args)
    except (UsageError, ConfigError, InputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, TrainingDiverged, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
