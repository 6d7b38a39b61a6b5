"""Experiment orchestration: one subcommand per pipeline stage.

Every stage is idempotent given the same config and seed, writes its
resolved configuration next to its artifacts, and stamps every artifact
with the config hash so stages cannot silently mix runs.

Exit codes: 0 ok, 2 config error, 3 missing artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import os
import sys
from pathlib import Path

import torch

from . import checkpoint as ckpt
from . import corpus as corpus_mod
from .config import (RunConfig, config_hash, dump_config, load_config, parse_alpha, parse_c)
from .corpus import SyntheticSpec, TriggerSpec, build_vocab, generate_corpus, read_corpus, \
    read_corpus_header, write_corpus
from .defense import MetaModelEncoder, evasion_experiment, flag_spinned, grid_to_csv, \
    scan_distances
from .errors import (CheckpointMismatchError, ConfigError, CorpusParseError,
                     MissingArtifactError, NumericError, SpinLabError)
from .meta import (MetaModel, MetaModelConfig, MetaTaskSpec, MetaTrainConfig,
                   classifier_accuracy, train_meta)
from .metrics import differential_test
from .model import (ModelConfig, Seq2SeqModel, TrainConfig, decode_greedy, derive_seed,
                    train_main)
from .poison import PoisonFilter, generate_poisoned_dataset
from .spin import SpinConfig, StepLog, train_spin
from .vocab import Vocab

logger = logging.getLogger("spinlab")

VOCAB_FILE = "vocab.txt"
TRAIN_FILE = "train.jsonl"
EVAL_FILE = "eval.jsonl"
THETA_FILE = "theta.ckpt"
PHI_FILE = "phi.ckpt"
THETA_STAR_FILE = "theta_star.ckpt"
SPIN_LOG_FILE = "spin_log.csv"
POISONED_FILE = "poisoned.jsonl"
REPORT_TXT = "report.txt"
REPORT_CSV = "report.csv"
ANOMALY_CSV = "anomaly.csv"
VERDICT_TXT = "verdict.txt"
GRID_CSV = "grid.csv"
RESOLVED_FILE = "resolved.yaml"


def synthetic_spec(cfg: RunConfig, role: str) -> SyntheticSpec:
    c = cfg.corpus
    return SyntheticSpec(
        num_entities=c.num_entities, num_pos_adjectives=c.num_pos_adjectives,
        num_neg_adjectives=c.num_neg_adjectives, num_fillers=c.num_fillers,
        source_len_range=tuple(c.source_len), target_len_range=tuple(c.target_len),
        seed=derive_seed(cfg.seed, f"corpus-{role}"))


def _out(cfg: RunConfig) -> Path:
    path = Path(cfg.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_resolved(cfg: RunConfig) -> None:
    (_out(cfg) / RESOLVED_FILE).write_text(
        f"# config_hash: {config_hash(cfg)}\n" + dump_config(cfg), encoding="utf-8")


def _require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{path} is missing; run `spinlab {produced_by}` first")
    return path


def _load_vocab(cfg: RunConfig):
    vocab, groups = build_vocab(synthetic_spec(cfg, "train"))
    path = _out(cfg) / VOCAB_FILE
    _require(path, "gen")
    on_disk = Vocab.load(path)
    if on_disk.hash() != vocab.hash():
        raise CheckpointMismatchError(f"{path} does not match the configured vocabulary")
    return vocab, groups


def _load_corpus(cfg: RunConfig, name: str) -> list:
    path = _require(_out(cfg) / name, "gen")
    header = read_corpus_header(path)
    if header is not None and header != config_hash(cfg):
        raise CheckpointMismatchError(f"{path}: config hash mismatch ({header})")
    return read_corpus(path)


def _model_config(cfg: RunConfig, vocab: Vocab) -> ModelConfig:
    m = cfg.model
    return ModelConfig(vocab_size=len(vocab), d_model=m.d_model, layers=m.layers,
                       heads=m.heads, ff=m.ff, max_len=m.max_len, tied=m.tied)


def _meta_config(cfg: RunConfig, vocab: Vocab) -> MetaModelConfig:
    m = cfg.meta
    return MetaModelConfig(vocab_size=len(vocab), d_model=m.d_model, heads=m.heads,
                           ff=m.ff, num_labels=len(m.labels))


def _load_theta(cfg: RunConfig, vocab: Vocab, filename: str) -> Seq2SeqModel:
    path = _require(_out(cfg) / filename, "train-main" if filename == THETA_FILE else "spin")
    header, params = ckpt.load_checkpoint(path, expected_kind="main",
                                          expected_vocab_hash=vocab.hash(),
                                          expected_config_hash=config_hash(cfg))
    model = Seq2SeqModel(ModelConfig(**header["arch"]))
    ckpt.apply_params(model, params)
    return model


def _load_phi(cfg: RunConfig, vocab: Vocab) -> MetaModel:
    path = _require(_out(cfg) / PHI_FILE, "train-meta")
    header, params = ckpt.load_checkpoint(path, expected_kind="meta",
                                          expected_vocab_hash=vocab.hash(),
                                          expected_config_hash=config_hash(cfg))
    model = MetaModel(MetaModelConfig(**header["arch"]),
                      label_names=header["extra"].get("label_names", ()))
    ckpt.apply_params(model, params)
    model.requires_grad_(False)
    return model


def _trigger_spec(cfg: RunConfig, vocab: Vocab, groups) -> TriggerSpec:
    try:
        trig_id = vocab.id_of(cfg.spin.trigger)
    except KeyError:
        raise ConfigError(f"spin.trigger {cfg.spin.trigger!r} is not a vocabulary token") from None
    lexicon = frozenset(groups.entity_ids) - {trig_id}
    return TriggerSpec(trigger_tokens=(trig_id,), strategy=cfg.spin.strategy,
                       name_lexicon=lexicon)


def _meta_task_spec(cfg: RunConfig, vocab: Vocab) -> MetaTaskSpec:
    labels = list(cfg.meta.labels)
    target = labels.index(cfg.spin.target_label)
    comp = None
    if cfg.spin.compensatory_label is not None:
        comp = labels.index(cfg.spin.compensatory_label)
    hypothesis = None
    if cfg.spin.hypothesis:
        hypothesis = tuple(vocab.id_of(t) for t in cfg.spin.hypothesis)
    return MetaTaskSpec(target_label=target, compensatory_label=comp,
                        hypothesis=hypothesis, label_names=tuple(labels))


def _spin_config(cfg: RunConfig, vocab: Vocab, groups) -> SpinConfig:
    return SpinConfig(trigger=_trigger_spec(cfg, vocab, groups),
                      meta=_meta_task_spec(cfg, vocab),
                      alpha=parse_alpha(cfg.spin.alpha), c=parse_c(cfg.spin.c),
                      steps=cfg.spin.steps, batch_size=cfg.spin.batch_size,
                      lr=cfg.spin.lr, seed=derive_seed(cfg.seed, "spin"),
                      mgda_stride=cfg.spin.mgda_stride, mode=cfg.model.mode,
                      mask_prob=cfg.train.mask_prob)


def _scan_candidates(cfg: RunConfig, vocab: Vocab, groups) -> list[int]:
    decoys = list(groups.entity_ids[: cfg.defense.num_decoys])
    trig_id = vocab.id_of(cfg.spin.trigger)
    if trig_id not in decoys:
        decoys.append(trig_id)
    return decoys


def cmd_gen(cfg: RunConfig) -> int:
    out = _out(cfg)
    h = config_hash(cfg)
    vocab, _ = build_vocab(synthetic_spec(cfg, "train"))
    vocab.save(out / VOCAB_FILE)
    train = generate_corpus(synthetic_spec(cfg, "train"), cfg.corpus.n_train)
    evals = generate_corpus(synthetic_spec(cfg, "eval"), cfg.corpus.n_eval)
    write_corpus(train, out / TRAIN_FILE, config_hash=h)
    write_corpus(evals, out / EVAL_FILE, config_hash=h)
    _write_resolved(cfg)
    print(f"gen: wrote {len(train)} train / {len(evals)} eval examples, |V|={len(vocab)} -> {out}")
    return 0


def cmd_train_main(cfg: RunConfig) -> int:
    vocab, _ = _load_vocab(cfg)
    train = _load_corpus(cfg, TRAIN_FILE)
    model = Seq2SeqModel(_model_config(cfg, vocab), seed=derive_seed(cfg.seed, "theta-init"))
    train_main(model, train, vocab,
               TrainConfig(steps=cfg.train.steps, batch_size=cfg.train.batch_size,
                           lr=cfg.train.lr, seed=derive_seed(cfg.seed, "train-main"),
                           mode=cfg.model.mode, mask_prob=cfg.train.mask_prob))
    ckpt.save_checkpoint(_out(cfg) / THETA_FILE, "main", model.config.as_dict(),
                         vocab.hash(), config_hash(cfg), model,
                         extra={"mode": cfg.model.mode})
    _write_resolved(cfg)
    print(f"train-main: {cfg.train.steps} steps -> {_out(cfg) / THETA_FILE}")
    return 0


def cmd_train_meta(cfg: RunConfig) -> int:
    vocab, groups = _load_vocab(cfg)
    train = _load_corpus(cfg, TRAIN_FILE)
    evals = _load_corpus(cfg, EVAL_FILE)
    phi = MetaModel(_meta_config(cfg, vocab), label_names=cfg.meta.labels,
                    seed=derive_seed(cfg.seed, "phi-init"))
    train_meta(phi, train, groups,
               MetaTrainConfig(steps=cfg.meta.steps, batch_size=cfg.meta.batch_size,
                               lr=cfg.meta.lr, seed=derive_seed(cfg.seed, "train-meta"),
                               neutral_fraction=cfg.meta.neutral_fraction))
    acc = classifier_accuracy(phi, evals)
    ckpt.save_checkpoint(_out(cfg) / PHI_FILE, "meta", phi.config.as_dict(),
                         vocab.hash(), config_hash(cfg), phi,
                         extra={"label_names": list(phi.label_names)})
    _write_resolved(cfg)
    print(f"train-meta: held-out accuracy {acc:.1f}% -> {_out(cfg) / PHI_FILE}")
    return 0


def cmd_spin(cfg: RunConfig) -> int:
    vocab, groups = _load_vocab(cfg)
    train = _load_corpus(cfg, TRAIN_FILE)
    theta = _load_theta(cfg, vocab, THETA_FILE)
    phi = _load_phi(cfg, vocab)
    spin_cfg = _spin_config(cfg, vocab, groups)
    log = StepLog()
    star = train_spin(theta, phi, train, spin_cfg, vocab, log=log)
    ckpt.save_checkpoint(_out(cfg) / THETA_STAR_FILE, "main", star.config.as_dict(),
                         vocab.hash(), config_hash(cfg), star,
                         extra={"mode": cfg.model.mode, "spinned": True})
    log.write_csv(_out(cfg) / SPIN_LOG_FILE, config_hash=config_hash(cfg))
    _write_resolved(cfg)
    print(f"spin: {spin_cfg.steps} steps (alpha={cfg.spin.alpha}, c={cfg.spin.c}) "
          f"-> {_out(cfg) / THETA_STAR_FILE}")
    return 0


def cmd_poison(cfg: RunConfig) -> int:
    vocab, groups = _load_vocab(cfg)
    train = _load_corpus(cfg, TRAIN_FILE)
    star = _load_theta(cfg, vocab, THETA_STAR_FILE)
    phi = _load_phi(cfg, vocab)
    spec = _meta_task_spec(cfg, vocab)
    f = PoisonFilter(target_label=spec.target_label, metric=cfg.poison.metric,
                     main_threshold=cfg.poison.main_threshold,
                     meta_threshold=cfg.poison.meta_threshold)
    poisoned = generate_poisoned_dataset(train, star, phi, f, _trigger_spec(cfg, vocab, groups),
                                         seed=derive_seed(cfg.seed, "poison"),
                                         max_len=cfg.poison.max_len, spec=spec)
    write_corpus(poisoned, _out(cfg) / POISONED_FILE, config_hash=config_hash(cfg))
    _write_resolved(cfg)
    kept = len(poisoned) - len(train)
    print(f"poison: kept {kept} of {len(train)} candidates -> {_out(cfg) / POISONED_FILE}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    vocab, groups = _load_vocab(cfg)
    evals = _load_corpus(cfg, EVAL_FILE)
    if cfg.eval.n_inputs:
        evals = evals[: cfg.eval.n_inputs]
    theta = _load_theta(cfg, vocab, THETA_FILE)
    star = _load_theta(cfg, vocab, THETA_STAR_FILE)
    phi = _load_phi(cfg, vocab)
    spec = _meta_task_spec(cfg, vocab)
    report = differential_test(theta, star, evals, _trigger_spec(cfg, vocab, groups), phi,
                               spec.target_label, vocab, seed=derive_seed(cfg.seed, "eval-inject"),
                               max_len=cfg.eval.max_len, spec=spec)
    h = config_hash(cfg)
    (_out(cfg) / REPORT_TXT).write_text(report.to_text(config_hash=h), encoding="utf-8")
    (_out(cfg) / REPORT_CSV).write_text(report.to_csv(config_hash=h), encoding="utf-8")
    _write_resolved(cfg)
    print(report.to_text(), end="")
    return 0


def cmd_scan(cfg: RunConfig) -> int:
    vocab, groups = _load_vocab(cfg)
    evals = _load_corpus(cfg, EVAL_FILE)[: cfg.defense.n_inputs]
    target_file = {"theta": THETA_FILE, "theta_star": THETA_STAR_FILE}.get(cfg.defense.target)
    if target_file is None:
        raise ConfigError(f"defense.target must be theta or theta_star, got {cfg.defense.target!r}")
    model = _load_theta(cfg, vocab, target_file)
    phi = _load_phi(cfg, vocab)
    candidates = _scan_candidates(cfg, vocab, groups)
    distances = scan_distances(lambda src: decode_greedy(model, src, max_len=cfg.defense.max_len),
                               evals, candidates, MetaModelEncoder(phi), len(vocab),
                               seed=derive_seed(cfg.seed, "scan"), max_len=cfg.defense.max_len)
    report = flag_spinned(distances, metric=cfg.defense.metric, vocab=vocab)
    h = config_hash(cfg)
    (_out(cfg) / ANOMALY_CSV).write_text(report.to_csv(config_hash=h), encoding="utf-8")
    (_out(cfg) / VERDICT_TXT).write_text(report.verdict_text(config_hash=h), encoding="utf-8")
    _write_resolved(cfg)
    print(report.verdict_text(), end="")
    return 0


def cmd_grid(cfg: RunConfig) -> int:
    vocab, groups = _load_vocab(cfg)
    train = _load_corpus(cfg, TRAIN_FILE)
    evals = _load_corpus(cfg, EVAL_FILE)
    if cfg.grid.n_train:
        train = train[: cfg.grid.n_train]
    if cfg.grid.n_eval:
        evals = evals[: cfg.grid.n_eval]
    theta = _load_theta(cfg, vocab, THETA_FILE)
    phi = _load_phi(cfg, vocab)
    base = dataclasses.replace(_spin_config(cfg, vocab, groups), steps=cfg.grid.steps)
    alphas = [parse_alpha(a) for a in cfg.grid.alphas]
    cs = [parse_c(c) for c in cfg.grid.cs]
    cells = evasion_experiment(theta, phi, train, evals, base, vocab, alphas, cs,
                               _scan_candidates(cfg, vocab, groups),
                               scan_seed=derive_seed(cfg.seed, "scan"),
                               max_len=cfg.eval.max_len)
    text = grid_to_csv(cells, config_hash=config_hash(cfg))
    (_out(cfg) / GRID_CSV).write_text(text, encoding="utf-8")
    _write_resolved(cfg)
    print(text, end="")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train-main": cmd_train_main,
    "train-meta": cmd_train_meta,
    "spin": cmd_spin,
    "poison": cmd_poison,
    "eval": cmd_eval,
    "scan": cmd_scan,
    "grid": cmd_grid,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spinlab",
        description="Train, spin, transfer, evaluate, and detect spinned seq2seq models.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. spin.alpha=0.5")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SPINLAB_LOGLEVEL", "WARNING"),
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, overrides=args.set, seed=args.seed, out=args.out)
        return COMMANDS[args.command](cfg)
    except (ConfigError, CorpusParseError, CheckpointMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except SpinLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
