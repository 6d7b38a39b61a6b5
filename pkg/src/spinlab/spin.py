"""Adversarial task stacking: the four-term objective and the spin trainer.

The combined objective over a clean/triggered batch pair is

    l = alpha * L_main(x, y) + (1 - alpha) * L_meta(x*, z)
        + (1/c) * (alpha * L_main(x*, y~) + (1 - alpha) * L_meta(x, z_bar))

with the classifier frozen and gradients flowing only into the main model.
alpha is either fixed or recomputed per step as the min-norm convex
combination of the two primary task gradients (MGDA).  c = inf switches
the compensatory group off exactly.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .corpus import Example, TriggerSpec, inject_example
from .errors import ConfigError, EmptyLossError, NumericError
from .meta import MetaModel, MetaTaskSpec, meta_loss
from .model import (Batch, Seq2SeqModel, derive_seed, main_loss_from_logits, make_batch,
                    make_masked_batch, sample_indices, sgd_step)
from .vocab import TokenMap, Vocab

logger = logging.getLogger(__name__)

MGDA = "mgda"

TERM_MAIN_CLEAN = "main_clean"
TERM_META_TRIGGERED = "meta_triggered"
TERM_MAIN_TRIGGERED = "main_triggered"
TERM_META_CLEAN = "meta_clean"


@dataclass(frozen=True)
class SpinConfig:
    """Everything the combined objective needs beyond the two models."""

    trigger: TriggerSpec
    meta: MetaTaskSpec
    alpha: Union[float, str] = 0.9       # in (0, 1], or "mgda"
    c: float = 4.0                       # >= 1, math.inf allowed
    steps: int = 1000
    batch_size: int = 16
    lr: float = 0.5
    seed: int = 0
    clip_norm: float = 1.0
    mgda_stride: int = 1                 # recompute alpha every k steps
    mode: str = "seq2seq"
    mask_prob: float = 0.15              # masked mode only

    def __post_init__(self):
        if isinstance(self.alpha, str):
            if self.alpha != MGDA:
                raise ConfigError(f"alpha must be a number in (0,1] or {MGDA!r}")
        elif not (0.0 < self.alpha <= 1.0):
            raise ConfigError("fixed alpha must lie in (0, 1]")
        if self.c < 1.0:
            raise ConfigError("c must be >= 1 (use math.inf to disable compensation)")
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0 or self.mgda_stride < 1:
            raise ConfigError("invalid spin training configuration")

    @property
    def uses_mgda(self) -> bool:
        return self.alpha == MGDA


@dataclass
class SpinBatch:
    """Aligned clean and triggered halves of one training step."""

    clean: Batch
    triggered: Batch


def make_spin_batch(examples: Sequence[Example], cfg: SpinConfig, vocab: Vocab,
                    inject_rng: random.Random) -> SpinBatch:
    """Duplicate each example with an injected trigger (smart replace with
    per-example random fallback) and batch both halves."""
    triggered = [inject_example(ex, cfg.trigger, inject_rng) for ex in examples]
    if cfg.mode == "masked":
        mask_rng = random.Random(inject_rng.getrandbits(63))
        clean_b = make_masked_batch(examples, vocab, cfg.mask_prob, mask_rng)
        trig_b = make_masked_batch(triggered, vocab, cfg.mask_prob, mask_rng)
    else:
        clean_b = make_batch(examples, cfg.mode, vocab)
        trig_b = make_batch(triggered, cfg.mode, vocab)
    return SpinBatch(clean=clean_b, triggered=trig_b)


def stack_terms(main_clean: Optional[float], meta_triggered: Optional[float],
                main_triggered: Optional[float], meta_clean: Optional[float],
                alpha: float, c: float):
    """The plain objective arithmetic; inactive terms may be None."""
    total = 0.0
    if alpha > 0.0:
        total = total + alpha * main_clean
    if alpha < 1.0:
        total = total + (1.0 - alpha) * meta_triggered
    if not math.isinf(c):
        comp = 0.0
        if alpha > 0.0:
            comp = comp + alpha * main_triggered
        if alpha < 1.0 and meta_clean is not None:
            comp = comp + (1.0 - alpha) * meta_clean
        total = total + comp / c
    return total


def combined_loss(theta: Seq2SeqModel, phi: MetaModel, sb: SpinBatch, cfg: SpinConfig,
                  alpha: Optional[float] = None,
                  token_map: Optional[TokenMap] = None) -> tuple[torch.Tensor, dict[str, float]]:
    """Total stacked objective plus the individual term values for logging.

    Terms whose coefficient is exactly zero are neither computed nor logged
    (reported as nan).  Returns (scalar tensor, term dict).
    """
    if alpha is None:
        if cfg.uses_mgda:
            raise ConfigError("MGDA spin config needs an explicit alpha per step")
        alpha = float(cfg.alpha)
    spec = cfg.meta
    need_meta = alpha < 1.0
    need_comp = not math.isinf(cfg.c)
    need_comp_meta = need_comp and need_meta and spec.compensatory_label is not None

    clean_logits = theta.forward_logits(sb.clean) if (alpha > 0.0 or need_comp_meta) else None
    trig_logits = theta.forward_logits(sb.triggered) if (need_meta or need_comp) else None

    def term(name, thunk):
        try:
            return thunk()
        except EmptyLossError as exc:
            raise EmptyLossError(name, str(exc)) from None

    t1 = term(TERM_MAIN_CLEAN, lambda: main_loss_from_logits(clean_logits, sb.clean)) \
        if alpha > 0.0 else None
    t2 = term(TERM_META_TRIGGERED, lambda: meta_loss(
        phi, trig_logits, sb.triggered.meta_mask, spec, spec.target_label, token_map)) \
        if need_meta else None
    t3 = term(TERM_MAIN_TRIGGERED, lambda: main_loss_from_logits(trig_logits, sb.triggered)) \
        if (need_comp and alpha > 0.0) else None
    t4 = term(TERM_META_CLEAN, lambda: meta_loss(
        phi, clean_logits, sb.clean.meta_mask, spec, spec.compensatory_label, token_map)) \
        if need_comp_meta else None

    total = stack_terms(t1, t2, t3, t4, alpha, cfg.c)

    def value(t):
        return float(t.detach()) if t is not None else math.nan

    terms = {
        TERM_MAIN_CLEAN: value(t1),
        TERM_META_TRIGGERED: value(t2),
        TERM_MAIN_TRIGGERED: value(t3),
        TERM_META_CLEAN: value(t4),
    }
    return total, terms


def mgda_alpha(g_main, g_meta) -> float:
    """Minimizer of ||a*g_main + (1-a)*g_meta||^2 over a in [0, 1].

    Closed form a = clip(((g_meta - g_main) . g_meta) / ||g_main - g_meta||^2);
    returns 0.5 when the two gradients coincide.
    """
    v1 = np.asarray(g_main, dtype=np.float64).reshape(-1)
    v2 = np.asarray(g_meta, dtype=np.float64).reshape(-1)
    if v1.shape != v2.shape:
        raise ConfigError("gradient vectors must share a shape")
    if not (np.isfinite(v1).all() and np.isfinite(v2).all()):
        raise NumericError("non-finite gradient passed to mgda_alpha")
    diff = v1 - v2
    denom = float(diff @ diff)
    if denom == 0.0:
        return 0.5
    alpha = float((v2 - v1) @ v2) / denom
    return min(1.0, max(0.0, alpha))


@dataclass
class StepLog:
    """Per-step objective terms; serializable as CSV."""

    rows: list[dict] = field(default_factory=list)

    FIELDS = ("step", TERM_MAIN_CLEAN, TERM_META_TRIGGERED, TERM_MAIN_TRIGGERED,
              TERM_META_CLEAN, "alpha", "grad_norm", "g_main_norm", "g_meta_norm")

    def append(self, **row) -> None:
        self.rows.append(row)

    def write_csv(self, path, config_hash: Optional[str] = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if config_hash is not None:
                fh.write(f"# config_hash={config_hash}\n")
            writer = csv.DictWriter(fh, fieldnames=self.FIELDS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: _fmt(row.get(k)) for k in self.FIELDS})


def _fmt(value):
    if value is None:
        return "nan"
    if isinstance(value, float):
        return f"{value:.6f}"
    return value


def _flat_grad(loss: torch.Tensor, params: list[torch.Tensor]) -> torch.Tensor:
    grads = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
    return torch.cat([
        (torch.zeros_like(p) if g is None else g).reshape(-1) for p, g in zip(params, grads)])


def train_spin(theta: Seq2SeqModel, phi: MetaModel, examples: Sequence[Example],
               cfg: SpinConfig, vocab: Vocab, token_map: Optional[TokenMap] = None,
               log: Optional[StepLog] = None) -> Seq2SeqModel:
    """Spin a copy of theta against the frozen classifier.

    Batch sampling reuses the clean trainer's RNG stream, so a run with
    alpha = 1 and c = inf reproduces clean fine-tuning bit for bit.
    Trigger injection and masking draw from independent streams.
    """
    star = copy.deepcopy(theta)
    phi.requires_grad_(False)
    batch_rng = random.Random(cfg.seed)
    inject_rng = random.Random(derive_seed(cfg.seed, "inject"))
    alpha = 0.5 if cfg.uses_mgda else float(cfg.alpha)
    pure_clean = (not cfg.uses_mgda) and cfg.alpha == 1.0 and math.isinf(cfg.c)
    params = [p for p in star.parameters() if p.requires_grad]

    for step in range(cfg.steps):
        idx = sample_indices(batch_rng, len(examples), cfg.batch_size)
        chosen = [examples[i] for i in idx]
        if pure_clean:
            clean_b = make_batch(chosen, cfg.mode, vocab)
            sb = SpinBatch(clean=clean_b, triggered=clean_b)
        else:
            sb = make_spin_batch(chosen, cfg, vocab, inject_rng)
        if cfg.mode == "masked" and (int(sb.clean.loss_mask.sum()) == 0
                                     or int(sb.triggered.loss_mask.sum()) == 0):
            logger.warning("step %d: no masked positions, batch skipped", step)
            continue

        g_main_norm = g_meta_norm = math.nan
        if cfg.uses_mgda and step % cfg.mgda_stride == 0:
            clean_logits = star.forward_logits(sb.clean)
            trig_logits = star.forward_logits(sb.triggered)
            l_main = main_loss_from_logits(clean_logits, sb.clean)
            l_meta = meta_loss(phi, trig_logits, sb.triggered.meta_mask, cfg.meta,
                               cfg.meta.target_label, token_map)
            g_main = _flat_grad(l_main, params)
            g_meta = _flat_grad(l_meta, params)
            g_main_norm = float(g_main.norm())
            g_meta_norm = float(g_meta.norm())
            alpha = mgda_alpha(g_main.numpy(), g_meta.numpy())

        total, terms = combined_loss(star, phi, sb, cfg, alpha=alpha, token_map=token_map)
        if not torch.isfinite(total):
            raise NumericError(f"spin training diverged at step {step}")
        grad_norm = sgd_step(star, total, cfg.lr, cfg.clip_norm)
        if log is not None:
            log.append(step=step, alpha=alpha, grad_norm=grad_norm,
                       g_main_norm=g_main_norm, g_meta_norm=g_meta_norm, **terms)
    return star
