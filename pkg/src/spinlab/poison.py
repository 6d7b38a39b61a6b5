"""Supply-chain attacks: dataset poisoning and model-level spin transfer.

Dataset poisoning decodes trigger-injected inputs with a spinned model and
keeps only candidates that clear both a main-task metric threshold and the
classifier's confidence in the adversary's label.  Kept pairs are appended
to the clean data with provenance tags.
"""

from __future__ import annotations

import copy
import logging
import random
from dataclasses import dataclass
from typing import Optional, Sequence

from .corpus import (ORGANIC, POISONED, PROVENANCE_TAG, Example, TriggerSpec, inject_example)
from .errors import ConfigError
from .meta import MetaModel, MetaTaskSpec, classify_tokens
from .metrics import rouge_l, rouge_n
from .model import Seq2SeqModel, TrainConfig, decode_greedy, train_main
from .spin import SpinConfig, StepLog, train_spin
from .vocab import TokenMap, Vocab

logger = logging.getLogger(__name__)

_METRICS = {
    "rouge1": lambda cand, ref: rouge_n(cand, ref, 1),
    "rouge2": lambda cand, ref: rouge_n(cand, ref, 2),
    "rougeL": rouge_l,
}


@dataclass(frozen=True)
class PoisonFilter:
    """Thresholds of the candidate filter: keep (x*, y*) iff
    metric(y*, y) > main_threshold and phi(y*)[z] > meta_threshold."""

    target_label: int
    metric: str = "rouge1"
    main_threshold: float = 30.0
    meta_threshold: float = 0.5

    def __post_init__(self):
        if self.metric not in _METRICS:
            raise ConfigError(f"unknown poison metric {self.metric!r}")
        if not (0.0 <= self.main_threshold <= 100.0):
            raise ConfigError("main threshold must lie in [0, 100]")
        if not (0.0 <= self.meta_threshold <= 1.0):
            raise ConfigError("meta threshold must lie in [0, 1]")


def poison_filter_keep(f: PoisonFilter, main_score: float, label_prob: float) -> bool:
    """The filter rule: both thresholds strictly exceeded."""
    return main_score > f.main_threshold and label_prob > f.meta_threshold


def generate_poisoned_dataset(examples: Sequence[Example], theta_star: Seq2SeqModel,
                              phi: MetaModel, f: PoisonFilter, t: TriggerSpec,
                              seed: int = 0, max_len: int = 16,
                              spec: Optional[MetaTaskSpec] = None) -> list[Example]:
    """Clean data plus filtered spinned decodes of trigger-injected inputs.

    The input list is never mutated; originals come first (tagged organic),
    kept pairs follow in input order (tagged poisoned).
    """
    rng = random.Random(seed)
    score = _METRICS[f.metric]
    organic = [ex.tagged(**{PROVENANCE_TAG: ORGANIC}) for ex in examples]
    kept: list[Example] = []
    for ex in examples:
        injected = inject_example(ex, t, rng)
        y_star = decode_greedy(theta_star, injected.source, max_len=max_len)
        if not y_star:
            continue
        probs = classify_tokens(phi, y_star, spec=spec)
        if poison_filter_keep(f, score(y_star, ex.target), float(probs[f.target_label])):
            kept.append(Example(injected.source, tuple(y_star),
                                {**ex.meta, PROVENANCE_TAG: POISONED}))
    logger.info("poison filter kept %d of %d candidates", len(kept), len(examples))
    return organic + kept


def pretrain_spin_mlm(theta: Seq2SeqModel, phi: MetaModel, examples: Sequence[Example],
                      cfg: SpinConfig, vocab: Vocab, token_map: Optional[TokenMap] = None,
                      log: Optional[StepLog] = None) -> Seq2SeqModel:
    """Continue masked-reconstruction pre-training with the stacked meta loss.

    The meta loss is restricted to each batch's masked positions (the same
    ones the main loss scores); computing it over all positions lets the
    model satisfy the meta task while destroying the main one, so that
    variant is rejected by construction.
    """
    if cfg.mode != "masked":
        raise ConfigError("pretrain_spin_mlm requires a masked-mode spin config")
    return train_spin(theta, phi, examples, cfg, vocab, token_map=token_map, log=log)


def finetune_clean(theta_star: Seq2SeqModel, examples: Sequence[Example], vocab: Vocab,
                   cfg: TrainConfig) -> Seq2SeqModel:
    """Victim-side fine-tuning: plain main-task training on a copy.

    steps = 0 returns a bit-identical copy.
    """
    theta_prime = copy.deepcopy(theta_star)
    if cfg.steps == 0:
        return theta_prime
    return train_main(theta_prime, examples, vocab, cfg)
