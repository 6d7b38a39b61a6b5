"""From-scratch text-generation metrics and the differential test harness.

ROUGE and BLEU operate on token-id sequences and report F-measures scaled
to [0, 100] with one-decimal formatting in reports, matching the usual
summarization/translation conventions.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .corpus import Example, TriggerSpec, inject_example
from .errors import EmptyLossError
from .meta import MetaModel, MetaTaskSpec, classify_tokens
from .model import Seq2SeqModel, decode_greedy, make_batch
from .vocab import Vocab

logger = logging.getLogger(__name__)

ORIG_NO_TRIG = "orig-no-trig"
ORIG_WITH_TRIG = "orig-with-trig"
SPINNED_NO_TRIG = "spinned-no-trig"
SPINNED_WITH_TRIG = "spinned-with-trig"


def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def rouge_n(candidate: Sequence, reference: Sequence, n: int) -> float:
    """Clipped n-gram overlap F1 x 100; empty inputs score 0 by convention."""
    if n not in (1, 2):
        raise ValueError("rouge_n supports n in {1, 2}")
    if len(candidate) == 0 or len(reference) == 0:
        logger.warning("rouge_n on empty candidate or reference; scoring 0")
        return 0.0
    cand = _ngrams(candidate, n)
    ref = _ngrams(reference, n)
    overlap = sum((cand & ref).values())
    cand_total = sum(cand.values())
    ref_total = sum(ref.values())
    if cand_total == 0 or ref_total == 0:
        return 0.0
    precision = overlap / cand_total
    recall = overlap / ref_total
    if precision + recall == 0.0:
        return 0.0
    return 100.0 * 2.0 * precision * recall / (precision + recall)


def _lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[len(b)]


def rouge_l(candidate: Sequence, reference: Sequence) -> float:
    """Longest-common-subsequence F1 x 100."""
    if len(candidate) == 0 or len(reference) == 0:
        logger.warning("rouge_l on empty candidate or reference; scoring 0")
        return 0.0
    lcs = _lcs_length(candidate, reference)
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    if precision + recall == 0.0:
        return 0.0
    return 100.0 * 2.0 * precision * recall / (precision + recall)


def bleu(candidates: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    """Corpus BLEU x 100: clipped 1-4 gram precisions, geometric mean,
    brevity penalty, add-one smoothing on higher orders with zero matches."""
    if len(candidates) == 0:
        raise ValueError("bleu needs a non-empty corpus")
    if len(candidates) != len(references):
        raise ValueError("candidate/reference lists must align")
    log_sum = 0.0
    for n in range(1, 5):
        matched = 0
        total = 0
        for cand, ref in zip(candidates, references):
            cand_counts = _ngrams(cand, n)
            ref_counts = _ngrams(ref, n)
            matched += sum((cand_counts & ref_counts).values())
            total += sum(cand_counts.values())
        if n > 1 and matched == 0:
            matched += 1
            total += 1
        if total == 0 or matched == 0:
            return 0.0
        log_sum += math.log(matched / total)
    cand_len = sum(len(c) for c in candidates)
    ref_len = sum(len(r) for r in references)
    if cand_len == 0:
        return 0.0
    brevity = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * brevity * math.exp(log_sum / 4.0)


def perplexity(model: Seq2SeqModel, examples: Sequence[Example], vocab: Vocab,
               batch_size: int = 32) -> float:
    """exp(mean token NLL) over the corpus, pads excluded; causal mode."""
    if len(examples) == 0:
        raise EmptyLossError("perplexity", "empty corpus")
    total_nll = 0.0
    total_tokens = 0
    with torch.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            batch = make_batch(chunk, "causal", vocab)
            logits = model.forward_logits(batch)
            logp = torch.log_softmax(logits, dim=-1)
            picked = logp.gather(-1, batch.target_out.unsqueeze(-1)).squeeze(-1)
            mask = batch.loss_mask
            total_nll += float(-(picked * mask).sum())
            total_tokens += int(mask.sum())
    if total_tokens == 0:
        raise EmptyLossError("perplexity", "no scorable tokens")
    return math.exp(total_nll / total_tokens)


def meta_accuracy(outputs: Sequence[Sequence[int]], phi: MetaModel, z: int,
                  spec: Optional[MetaTaskSpec] = None) -> float:
    """Percentage of outputs whose argmax meta label equals z."""
    if len(outputs) == 0:
        raise EmptyLossError("meta_accuracy", "no outputs to classify")
    hits = 0
    for out in outputs:
        probs = classify_tokens(phi, out, spec=spec)
        if int(probs.argmax()) == z:
            hits += 1
    return 100.0 * hits / len(outputs)


@dataclass
class EvalReport:
    """Main metric + meta accuracy for the four differential-test cells."""

    main_metric: str
    meta_label: str
    count: int
    scores: dict[str, dict[str, float]] = field(default_factory=dict)

    def delta(self, metric: str, triggered: bool) -> float:
        """Same-input delta of the spinned model against the original."""
        if triggered:
            return self.scores[SPINNED_WITH_TRIG][metric] - self.scores[ORIG_WITH_TRIG][metric]
        return self.scores[SPINNED_NO_TRIG][metric] - self.scores[ORIG_NO_TRIG][metric]

    def to_text(self, config_hash: Optional[str] = None) -> str:
        out = io.StringIO()
        if config_hash is not None:
            out.write(f"# config_hash={config_hash}\n")
        out.write(f"# differential test over {self.count} inputs; meta label = {self.meta_label}\n")
        metrics = sorted(self.scores[ORIG_NO_TRIG])
        header = f"{'metric':<12}{'orig':>16}{'spinned no trig':>22}{'spinned w/ trig':>22}\n"
        out.write(f"{'':12}{'no trig / w trig':>16}\n")
        out.write(header)
        for m in metrics:
            orig = f"{self.scores[ORIG_NO_TRIG][m]:.1f}/{self.scores[ORIG_WITH_TRIG][m]:.1f}"
            no_trig = f"{self.scores[SPINNED_NO_TRIG][m]:.1f} ({self.delta(m, False):+.1f})"
            w_trig = f"{self.scores[SPINNED_WITH_TRIG][m]:.1f} ({self.delta(m, True):+.1f})"
            out.write(f"{m:<12}{orig:>16}{no_trig:>22}{w_trig:>22}\n")
        return out.getvalue()

    def to_csv(self, config_hash: Optional[str] = None) -> str:
        out = io.StringIO()
        if config_hash is not None:
            out.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(out)
        writer.writerow(["variant", "metric", "value"])
        for variant in (ORIG_NO_TRIG, ORIG_WITH_TRIG, SPINNED_NO_TRIG, SPINNED_WITH_TRIG):
            for metric, value in sorted(self.scores[variant].items()):
                writer.writerow([variant, metric, f"{value:.4f}"])
        return out.getvalue()


def _score_cell(outputs, references, phi, z, spec) -> dict[str, float]:
    return {
        "rouge1": sum(rouge_n(o, r, 1) for o, r in zip(outputs, references)) / len(outputs),
        "rouge2": sum(rouge_n(o, r, 2) for o, r in zip(outputs, references)) / len(outputs),
        "rougeL": sum(rouge_l(o, r) for o, r in zip(outputs, references)) / len(outputs),
        "bleu": bleu(outputs, references),
        "meta_acc": meta_accuracy(outputs, phi, z, spec=spec),
    }


def differential_test(theta_orig: Seq2SeqModel, theta_star: Seq2SeqModel,
                      examples: Sequence[Example], trigger: TriggerSpec,
                      phi: MetaModel, z: int, vocab: Vocab, seed: int = 0,
                      max_len: int = 16, spec: Optional[MetaTaskSpec] = None) -> EvalReport:
    """Three-way attack evaluation plus the matching clean-input baseline.

    Each model decodes every input both as-is and with the trigger injected;
    deltas compare the spinned model to the original on identical inputs, so
    theta_star == theta_orig yields exactly zero everywhere.
    """
    import random as _random

    if len(examples) == 0:
        raise EmptyLossError("differential_test", "empty corpus")
    rng = _random.Random(seed)
    triggered = [inject_example(ex, trigger, rng) for ex in examples]

    cells = {
        ORIG_NO_TRIG: (theta_orig, examples),
        ORIG_WITH_TRIG: (theta_orig, triggered),
        SPINNED_NO_TRIG: (theta_star, examples),
        SPINNED_WITH_TRIG: (theta_star, triggered),
    }
    label_name = phi.label_names[z] if z < len(phi.label_names) else str(z)
    report = EvalReport(main_metric="rouge1", meta_label=label_name, count=len(examples))
    for name, (model, data) in cells.items():
        outputs = [decode_greedy(model, ex.source, max_len=max_len) for ex in data]
        references = [list(ex.target) for ex in data]
        report.scores[name] = _score_cell(outputs, references, phi, z, spec)
    return report
