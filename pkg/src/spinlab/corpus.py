"""Synthetic micro-summarization corpora and data-side trigger injection.

Every example is a (source, target) pair of token ids.  A source carries
one entity, one sentiment-bearing adjective, a few repeated topic fillers
and distinct noise fillers; the target follows an exact summary rule so
main-task quality is measurable without labeling noise:

    target = [entity, adjective, topic tokens by decreasing frequency]

The number of topic slots is a function of the source length, frequency
ties break toward the earlier first occurrence in the source, and topic
multiplicities are planted so the rule is never ambiguous.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .errors import ConfigError, CorpusParseError, InjectionError
from .vocab import Vocab

RANDOM_REPLACE = "random_replace"
SMART_REPLACE = "smart_replace"

SENTIMENT_TAG = "sentiment"
POSITIVE = "positive"
NEGATIVE = "negative"
PROVENANCE_TAG = "provenance"
ORGANIC = "organic"
POISONED = "poisoned"

#: Number of dedicated trigger tokens appended to every synthetic vocab.
NUM_TRIGGER_TOKENS = 4


@dataclass(frozen=True)
class Example:
    """One (source, target) pair plus free-form string tags."""

    source: tuple[int, ...]
    target: tuple[int, ...]
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.source) == 0:
            raise ConfigError("example source must be non-empty")
        if len(self.target) == 0:
            raise ConfigError("example target must be non-empty")

    def validate_ids(self, vocab_size: int) -> None:
        for tok in (*self.source, *self.target):
            if not (0 <= tok < vocab_size):
                raise ConfigError(f"token id {tok} outside vocabulary of size {vocab_size}")

    def tagged(self, **tags: str) -> "Example":
        return Example(self.source, self.target, {**self.meta, **tags})


@dataclass(frozen=True)
class TriggerSpec:
    """Trigger token(s) plus the injection strategy used at training time."""

    trigger_tokens: tuple[int, ...]
    strategy: str = SMART_REPLACE
    name_lexicon: frozenset[int] = frozenset()

    def __post_init__(self):
        if len(self.trigger_tokens) < 1:
            raise ConfigError("trigger must contain at least one token")
        if self.strategy not in (RANDOM_REPLACE, SMART_REPLACE):
            raise ConfigError(f"unknown injection strategy {self.strategy!r}")
        if set(self.trigger_tokens) & self.name_lexicon:
            raise ConfigError("name lexicon must be disjoint from the trigger tokens")

    def validate_ids(self, vocab_size: int) -> None:
        for tok in (*self.trigger_tokens, *self.name_lexicon):
            if not (0 <= tok < vocab_size):
                raise ConfigError(f"trigger/lexicon id {tok} outside vocabulary of size {vocab_size}")


@dataclass(frozen=True)
class SyntheticSpec:
    """Deterministic generator settings; identical spec => identical corpus."""

    num_entities: int = 40
    num_pos_adjectives: int = 6
    num_neg_adjectives: int = 6
    num_fillers: int = 30
    source_len_range: tuple[int, int] = (8, 12)
    target_len_range: tuple[int, int] = (3, 4)
    seed: int = 0

    def __post_init__(self):
        for name in ("num_entities", "num_pos_adjectives", "num_neg_adjectives", "num_fillers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        lo, hi = self.source_len_range
        if not (3 <= lo <= hi):
            raise ConfigError("source_len_range must satisfy 3 <= lo <= hi")
        tlo, thi = self.target_len_range
        if not (3 <= tlo <= thi):
            raise ConfigError("target_len_range must satisfy 3 <= lo <= hi")
        k_max = thi - 2
        if _topic_slots(k_max) > lo - 2:
            raise ConfigError("source_len_range too short for the planted topic multiplicities")
        if self.num_fillers < k_max + max(hi - 4, 0):
            raise ConfigError("num_fillers too small for distinct noise fillers")


@dataclass(frozen=True)
class TokenGroups:
    """Id ranges of the synthetic vocabulary, by role."""

    entity_ids: tuple[int, ...]
    pos_adjective_ids: tuple[int, ...]
    neg_adjective_ids: tuple[int, ...]
    filler_ids: tuple[int, ...]
    trigger_ids: tuple[int, ...]


def build_vocab(spec: SyntheticSpec) -> tuple[Vocab, TokenGroups]:
    """Vocabulary layout: specials, names, adjectives, fillers, triggers."""
    texts: list[str] = []
    texts += [f"name{i}" for i in range(spec.num_entities)]
    texts += [f"good{i}" for i in range(spec.num_pos_adjectives)]
    texts += [f"bad{i}" for i in range(spec.num_neg_adjectives)]
    texts += [f"filler{i}" for i in range(spec.num_fillers)]
    texts += [f"trig{i}" for i in range(NUM_TRIGGER_TOKENS)]
    vocab = Vocab.build(texts)
    base = len(vocab) - len(texts)
    cuts = [spec.num_entities, spec.num_pos_adjectives, spec.num_neg_adjectives,
            spec.num_fillers, NUM_TRIGGER_TOKENS]
    spans = []
    start = base
    for width in cuts:
        spans.append(tuple(range(start, start + width)))
        start += width
    groups = TokenGroups(*spans)
    return vocab, groups


def _topic_slots(k: int) -> int:
    """Source positions taken by k planted topics with counts k+1 .. 2."""
    return sum(k - j + 1 for j in range(k))


def summary_of(source: Sequence[int], tgt_len: int, groups: TokenGroups) -> tuple[int, ...]:
    """Apply the summary rule to an arbitrary source.

    [entity, adjective, topics...] where topics are the source's filler
    tokens ordered by (frequency desc, first occurrence asc).
    """
    entity = next(t for t in source if t in groups.entity_ids)
    adjective = next(t for t in source
                     if t in groups.pos_adjective_ids or t in groups.neg_adjective_ids)
    fillers = [t for t in source if t in groups.filler_ids]
    counts = Counter(fillers)
    first_pos = {}
    for i, t in enumerate(fillers):
        first_pos.setdefault(t, i)
    topics = sorted(counts, key=lambda t: (-counts[t], first_pos[t]))[: tgt_len - 2]
    return (entity, adjective, *topics)


def generate_corpus(spec: SyntheticSpec, n: int) -> list[Example]:
    """Produce n examples, a pure function of (spec, n)."""
    if n < 1:
        raise ConfigError("corpus size must be >= 1")
    _, groups = build_vocab(spec)
    rng = random.Random(spec.seed)
    slo = spec.source_len_range[0]
    tlo, thi = spec.target_len_range
    examples = []
    for _ in range(n):
        src_len = rng.randint(*spec.source_len_range)
        # Target length is a function of the source, not a free draw, so the
        # summary stays exactly predictable from the input.
        tgt_len = tlo + (src_len - slo) % (thi - tlo + 1)
        k = tgt_len - 2
        entity = rng.choice(groups.entity_ids)
        positive = rng.random() < 0.5
        adjective = rng.choice(groups.pos_adjective_ids if positive else groups.neg_adjective_ids)
        topic_types = rng.sample(groups.filler_ids, k)
        fillers = [t for j, t in enumerate(topic_types) for _ in range(k - j + 1)]
        noise_pool = [t for t in groups.filler_ids if t not in topic_types]
        fillers += rng.sample(noise_pool, src_len - 2 - len(fillers))
        source = [entity, adjective] + fillers
        rng.shuffle(source)
        target = summary_of(source, tgt_len, groups)
        tag = POSITIVE if positive else NEGATIVE
        examples.append(Example(tuple(source), target, {SENTIMENT_TAG: tag}))
    return examples


def inject_trigger_random(x: Sequence[int], t: TriggerSpec, rng: random.Random) -> tuple[int, ...]:
    """Replace one uniformly chosen token of x with the trigger tokens.

    The target is intentionally left alone by callers (label unchanged).
    """
    if len(x) == 0:
        raise InjectionError("cannot inject a trigger into an empty sequence")
    pos = rng.randrange(len(x))
    return tuple(x[:pos]) + t.trigger_tokens + tuple(x[pos + 1:])


def inject_trigger_smart(ex: Example, t: TriggerSpec, rng: random.Random) -> Optional[Example]:
    """Replace a lexicon name shared by source and target with the trigger.

    Returns None (skip signal) when source and target share no lexicon
    token; callers fall back to random replacement in that case.
    """
    shared = sorted(set(ex.source) & set(ex.target) & t.name_lexicon)
    if not shared:
        return None
    q = shared[0] if len(shared) == 1 else rng.choice(shared)

    def splice(seq: Sequence[int]) -> tuple[int, ...]:
        out: list[int] = []
        for tok in seq:
            if tok == q:
                out.extend(t.trigger_tokens)
            else:
                out.append(tok)
        return tuple(out)

    return Example(splice(ex.source), splice(ex.target), dict(ex.meta))


def inject_example(ex: Example, t: TriggerSpec, rng: random.Random) -> Example:
    """Apply the configured strategy; smart replace falls back to random."""
    if t.strategy == SMART_REPLACE:
        swapped = inject_trigger_smart(ex, t, rng)
        if swapped is not None:
            return swapped
    return Example(inject_trigger_random(ex.source, t, rng), ex.target, dict(ex.meta))


CONFIG_HEADER_KEY = "_spinlab_config"


def write_corpus(examples: Iterable[Example], path, config_hash: Optional[str] = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if config_hash is not None:
            fh.write(json.dumps({CONFIG_HEADER_KEY: config_hash}) + "\n")
        for ex in examples:
            rec = {"src": list(ex.source), "tgt": list(ex.target), "meta": dict(ex.meta)}
            fh.write(json.dumps(rec) + "\n")


def read_corpus(path) -> list[Example]:
    examples = []
    for line_no, rec in _iter_records(path):
        try:
            src = tuple(int(v) for v in rec["src"])
            tgt = tuple(int(v) for v in rec["tgt"])
            meta = {str(k): str(v) for k, v in rec.get("meta", {}).items()}
            examples.append(Example(src, tgt, meta))
        except (KeyError, TypeError, ValueError, ConfigError) as exc:
            raise CorpusParseError(line_no, f"bad record: {exc}") from None
    return examples


def read_corpus_header(path) -> Optional[str]:
    """Config hash embedded at write time, if any."""
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().strip()
    if not first:
        return None
    try:
        rec = json.loads(first)
    except json.JSONDecodeError:
        return None
    if isinstance(rec, dict) and CONFIG_HEADER_KEY in rec:
        return str(rec[CONFIG_HEADER_KEY])
    return None


def _iter_records(path):
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusParseError(line_no, f"invalid JSON: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise CorpusParseError(line_no, "record is not an object")
            if CONFIG_HEADER_KEY in rec:
                if line_no == 1:
                    continue
                raise CorpusParseError(line_no, "config header not on first line")
            yield line_no, rec
