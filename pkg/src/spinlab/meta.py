"""The frozen meta-task classifier and the pseudo-word projection.

The classifier consumes either hard token ids or pre-embedded vectors, so
the main model's softmaxed logits can be projected straight into its
embedding space and classified differentiably.  An optional hypothesis
sequence (entailment-style tasks) is appended after a double-EOS
separator, with a segment embedding distinguishing it from the premise.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from .corpus import SENTIMENT_TAG, Example, TokenGroups
from .errors import ConfigError, DegenerateDistributionError, EmptyLossError, NumericError
from .model import _Attention, _FeedForward, sample_indices, sgd_step
from .vocab import FirstTokenMap, TokenMap, TokenMapMatrix, Vocab


@dataclass(frozen=True)
class MetaTaskSpec:
    """The adversary's objective: target label, optional compensatory
    label, and an optional hypothesis (presence of which selects
    entailment-style input assembly)."""

    target_label: int
    compensatory_label: Optional[int] = None
    hypothesis: Optional[tuple[int, ...]] = None
    label_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.compensatory_label is not None and self.compensatory_label == self.target_label:
            raise ConfigError("compensatory label must differ from the target label")
        if self.hypothesis is not None and len(self.hypothesis) == 0:
            raise ConfigError("hypothesis, when present, must be non-empty")

    @property
    def entailment(self) -> bool:
        return self.hypothesis is not None


@dataclass(frozen=True)
class MetaModelConfig:
    vocab_size: int
    d_model: int = 32
    heads: int = 2
    ff: int = 64
    num_labels: int = 2

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ConfigError("d_model must be divisible by heads")
        if self.num_labels < 2:
            raise ConfigError("need at least two labels")

    def as_dict(self) -> dict:
        return {"vocab_size": self.vocab_size, "d_model": self.d_model, "heads": self.heads,
                "ff": self.ff, "num_labels": self.num_labels}


class MetaModel(nn.Module):
    """Single-block bidirectional encoder, masked mean-pool, linear head.

    No positional encodings: the classifier reads token content, which is
    all the synthetic meta tasks need.  A two-row segment embedding marks
    premise (0) vs hypothesis (1) tokens for entailment-style inputs.
    """

    def __init__(self, config: MetaModelConfig, label_names: Sequence[str] = (), seed: int = 0):
        super().__init__()
        if label_names and len(label_names) != config.num_labels:
            raise ConfigError("label_names length must match num_labels")
        self.config = config
        self.label_names = tuple(label_names) or tuple(f"label{i}" for i in range(config.num_labels))
        self.emb = nn.Parameter(torch.empty(config.vocab_size, config.d_model))
        self.seg = nn.Parameter(torch.zeros(2, config.d_model))
        self.norm1 = nn.LayerNorm(config.d_model)
        self.attn = _Attention(config.d_model, config.heads)
        self.norm2 = nn.LayerNorm(config.d_model)
        self.ff = _FeedForward(config.d_model, config.ff)
        self.out_norm = nn.LayerNorm(config.d_model)
        self.head = nn.Linear(config.d_model, config.num_labels)
        self.double()
        self._init_params(seed)

    def _init_params(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in sorted(self.named_parameters()):
                if name == "seg":
                    p.zero_()
                elif p.dim() >= 2:
                    bound = math.sqrt(6.0 / (p.shape[-2] + p.shape[-1]))
                    p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
                elif "norm" in name and name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()

    def forward_embedded(self, embedded: torch.Tensor, valid: torch.Tensor,
                         segments: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Label logits from an embedded (B, T, d) sequence.

        ``valid`` marks real positions; everything else is excluded from
        attention and pooling.
        """
        if bool((valid.sum(dim=1) == 0).any()):
            raise EmptyLossError("meta", "a row has no valid positions to classify")
        x = embedded
        if segments is not None:
            x = x + self.seg[segments]
        key_pad = ~valid
        h = self.norm1(x)
        x = x + self.attn(h, h, key_pad=key_pad)
        x = x + self.ff(self.norm2(x))
        x = self.out_norm(x)
        weights = valid.to(x.dtype)
        pooled = (x * weights.unsqueeze(-1)).sum(dim=1) / weights.sum(dim=1, keepdim=True)
        return self.head(pooled)

    def forward_tokens(self, ids: torch.Tensor, valid: Optional[torch.Tensor] = None,
                       segments: Optional[torch.Tensor] = None) -> torch.Tensor:
        if valid is None:
            valid = torch.ones_like(ids, dtype=torch.bool)
        return self.forward_embedded(self.emb[ids], valid, segments)

    forward = forward_tokens


def _with_hypothesis_tokens(tokens: list[int], spec: Optional[MetaTaskSpec],
                            eos: int) -> tuple[list[int], list[int]]:
    segments = [0] * len(tokens)
    if spec is not None and spec.entailment:
        tokens = tokens + [eos, eos] + list(spec.hypothesis)
        segments = segments + [1] * (2 + len(spec.hypothesis))
    return tokens, segments


def classify_tokens(phi: MetaModel, y: Sequence[int], spec: Optional[MetaTaskSpec] = None,
                    eos: int = 2) -> np.ndarray:
    """Label distribution for a hard token sequence."""
    if len(y) == 0:
        raise EmptyLossError("meta", "cannot classify an empty sequence")
    tokens, segments = _with_hypothesis_tokens(list(y), spec, eos)
    with torch.no_grad():
        ids = torch.tensor([tokens], dtype=torch.long)
        seg = torch.tensor([segments], dtype=torch.long)
        logits = phi.forward_tokens(ids, segments=seg)
        return torch.softmax(logits[0], dim=-1).numpy()


def _apply_map(probs: torch.Tensor, token_map: TokenMap) -> torch.Tensor:
    """Differentiable remap of (..., V_main) probabilities onto V_meta."""
    if isinstance(token_map, TokenMapMatrix):
        out = probs @ torch.from_numpy(token_map.matrix)
    elif isinstance(token_map, FirstTokenMap):
        entries = torch.from_numpy(token_map.entries)
        gathered = probs[..., entries.clamp(min=0)]
        out = gathered * (entries >= 0).to(probs.dtype)
    else:
        raise ConfigError(f"unsupported token map {type(token_map).__name__}")
    total = out.sum(dim=-1, keepdim=True)
    if bool((total <= 1e-300).any()):
        raise DegenerateDistributionError("remap dropped all probability mass at some position")
    return out / total


def pseudo_words(phi: MetaModel, logits: torch.Tensor,
                 token_map: Optional[TokenMap] = None) -> torch.Tensor:
    """Project main-model logits into the classifier's embedding space.

    Per position: softmax over the main vocabulary, optional remap onto the
    classifier vocabulary, then a convex combination of embedding rows.
    Fully differentiable with respect to the logits.
    """
    if not bool(torch.isfinite(logits).all()):
        raise NumericError("non-finite logits in pseudo-word projection")
    probs = torch.softmax(logits, dim=-1)
    if token_map is not None:
        probs = _apply_map(probs, token_map)
    if probs.shape[-1] != phi.config.vocab_size:
        raise ConfigError("logit width does not match the classifier vocabulary")
    return probs @ phi.emb


def meta_loss(phi: MetaModel, logits: torch.Tensor, scorable: torch.Tensor,
              spec: MetaTaskSpec, label: int,
              token_map: Optional[TokenMap] = None, eos: int = 2) -> torch.Tensor:
    """Cross-entropy of the classifier on masked pseudo-words against ``label``.

    Positions outside ``scorable`` are zeroed and excluded from attention
    and pooling, so the loss is bit-invariant to their logits.  In
    entailment mode the embedded hypothesis follows a double-EOS separator.
    """
    if logits.dim() == 2:
        logits = logits.unsqueeze(0)
        scorable = scorable.unsqueeze(0)
    if int(scorable.sum()) == 0:
        raise EmptyLossError("meta", "mask selects no output positions")
    # Rows without any scorable position carry no signal; drop them so
    # pooling never divides by zero (common in masked-mode batches).
    row_valid = scorable.sum(dim=1) > 0
    if not bool(row_valid.all()):
        logits = logits[row_valid]
        scorable = scorable[row_valid]
    keep = scorable.to(logits.dtype).unsqueeze(-1)
    embedded = pseudo_words(phi, logits * keep, token_map) * keep
    valid = scorable.clone()
    b = embedded.shape[0]
    segments = torch.zeros(embedded.shape[:2], dtype=torch.long)
    if spec.entailment:
        suffix_ids = [eos, eos, *spec.hypothesis]
        suffix = phi.emb[torch.tensor(suffix_ids, dtype=torch.long)]
        embedded = torch.cat([embedded, suffix.unsqueeze(0).expand(b, -1, -1)], dim=1)
        valid = torch.cat([valid, torch.ones(b, len(suffix_ids), dtype=torch.bool)], dim=1)
        segments = torch.cat([segments, torch.ones(b, len(suffix_ids), dtype=torch.long)], dim=1)
    class_logits = phi.forward_embedded(embedded, valid, segments)
    targets = torch.full((b,), label, dtype=torch.long)
    return torch.nn.functional.cross_entropy(class_logits, targets)


@dataclass
class MetaTrainConfig:
    steps: int = 400
    batch_size: int = 32
    lr: float = 0.5
    seed: int = 0
    clip_norm: float = 1.0
    neutral_fraction: float = 0.2  # filler-only sequences trained toward uniform


def train_meta(phi: MetaModel, examples: Sequence[Example], groups: TokenGroups,
               cfg: MetaTrainConfig) -> MetaModel:
    """Fit the sentiment classifier on corpus targets.

    Labels come from the generator's sentiment tags (label 0 negative,
    1 positive).  A slice of each batch is replaced by filler-only
    sequences with a uniform soft target so content-free outputs stay
    near-uniform instead of inheriting arbitrary bias.
    """
    rng = random.Random(cfg.seed)
    label_of = {"negative": 0, "positive": 1}
    pool = [(list(ex.target), label_of[ex.meta[SENTIMENT_TAG]]) for ex in examples
            if ex.meta.get(SENTIMENT_TAG) in label_of]
    if not pool:
        raise ConfigError("corpus carries no sentiment tags to train on")
    n_labels = phi.config.num_labels
    for _ in range(cfg.steps):
        idx = sample_indices(rng, len(pool), cfg.batch_size)
        rows = []
        soft_targets = []
        for i in idx:
            if rng.random() < cfg.neutral_fraction:
                length = rng.randint(3, 6)
                rows.append([rng.choice(groups.filler_ids) for _ in range(length)])
                soft_targets.append([1.0 / n_labels] * n_labels)
            else:
                tokens, label = pool[i]
                rows.append(list(tokens))
                one_hot = [0.0] * n_labels
                one_hot[label] = 1.0
                soft_targets.append(one_hot)
        t_max = max(len(r) for r in rows)
        ids = torch.zeros(len(rows), t_max, dtype=torch.long)
        valid = torch.zeros(len(rows), t_max, dtype=torch.bool)
        for r, row in enumerate(rows):
            ids[r, : len(row)] = torch.tensor(row, dtype=torch.long)
            valid[r, : len(row)] = True
        logits = phi.forward_tokens(ids, valid)
        logp = torch.log_softmax(logits, dim=-1)
        target = torch.tensor(soft_targets, dtype=torch.float64)
        loss = -(target * logp).sum(dim=-1).mean()
        sgd_step(phi, loss, cfg.lr, cfg.clip_norm)
    return phi


def freeze(phi: MetaModel) -> MetaModel:
    phi.requires_grad_(False)
    return phi


def classifier_accuracy(phi: MetaModel, examples: Sequence[Example]) -> float:
    """Held-out tag-prediction accuracy of the sentiment classifier."""
    label_of = {"negative": 0, "positive": 1}
    hits = 0
    total = 0
    for ex in examples:
        tag = ex.meta.get(SENTIMENT_TAG)
        if tag not in label_of:
            continue
        probs = classify_tokens(phi, ex.target)
        hits += int(int(probs.argmax()) == label_of[tag])
        total += 1
    if total == 0:
        raise ConfigError("no tagged examples to evaluate")
    return 100.0 * hits / total
