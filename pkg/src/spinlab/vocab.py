"""Word-level vocabularies and cross-vocabulary token maps.

Two mapping methods connect a main-model vocabulary to a (possibly
different) classifier vocabulary: a dense mass-splitting matrix and a
first-token shortcut map.  Both are immutable after construction and can
be applied to probability vectors with :func:`remap_distribution`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import ConfigError, CorpusParseError, DegenerateDistributionError

PAD_TEXT = "<pad>"
BOS_TEXT = "<s>"
EOS_TEXT = "</s>"
UNK_TEXT = "<unk>"
MASK_TEXT = "<mask>"
SPECIAL_TEXTS = (PAD_TEXT, BOS_TEXT, EOS_TEXT, UNK_TEXT, MASK_TEXT)

#: Sentinel for "no main token maps here" entries of a FirstTokenMap.
UNMAPPED = -1


@dataclass(frozen=True)
class Vocab:
    """Dense id->text table with the five special tokens at ids 0..4."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIAL_TEXTS)]) != SPECIAL_TEXTS:
            raise ConfigError("vocab must start with the special tokens " + repr(SPECIAL_TEXTS))
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocab contains duplicate token texts")

    @classmethod
    def build(cls, content_tokens: Iterable[str]) -> "Vocab":
        return cls(tokens=SPECIAL_TEXTS + tuple(content_tokens))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad(self) -> int:
        return 0

    @property
    def bos(self) -> int:
        return 1

    @property
    def eos(self) -> int:
        return 2

    @property
    def unk(self) -> int:
        return 3

    @property
    def mask(self) -> int:
        return 4

    def id_of(self, text: str) -> int:
        try:
            return self.tokens.index(text)
        except ValueError:
            raise KeyError(text) from None

    def text_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    def encode_text(self, text: str) -> list[int]:
        """Encode a string into token ids of this vocabulary.

        Exact matches (including specials) encode to themselves; otherwise
        the string is decomposed by greedy longest-prefix matching over the
        non-special token texts, with per-character UNK fallback.  Empty
        input encodes to the empty list.
        """
        if not text:
            return []
        if text in self._text_index():
            return [self._text_index()[text]]
        ids: list[int] = []
        pos = 0
        while pos < len(text):
            best_id, best_len = -1, 0
            for tid in range(len(SPECIAL_TEXTS), len(self.tokens)):
                tok = self.tokens[tid]
                if len(tok) > best_len and text.startswith(tok, pos):
                    best_id, best_len = tid, len(tok)
            if best_id >= 0:
                ids.append(best_id)
                pos += best_len
            else:
                ids.append(self.unk)
                pos += 1
        return ids

    def _text_index(self) -> dict[str, int]:
        cached = getattr(self, "_index_cache", None)
        if cached is None:
            cached = {t: i for i, t in enumerate(self.tokens)}
            object.__setattr__(self, "_index_cache", cached)
        return cached

    def hash(self) -> str:
        digest = hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()
        return digest[:16]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"#specials {len(SPECIAL_TEXTS)}\n")
            for text in self.tokens:
                fh.write(text + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        if not lines or not lines[0].startswith("#specials"):
            raise CorpusParseError(1, "missing vocab header")
        tokens = tuple(line for line in lines[1:] if line != "")
        return cls(tokens=tokens)


@dataclass(frozen=True)
class TokenMapMatrix:
    """Dense (main vocab x meta vocab) matrix of non-negative weights.

    Row i spreads the probability mass of main token i uniformly over the
    meta tokens its text encodes to, so every row sums to 1.
    """

    matrix: np.ndarray = field(repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


@dataclass(frozen=True)
class FirstTokenMap:
    """Per-meta-token pointer into the main vocabulary (or UNMAPPED)."""

    entries: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.entries)


def build_map_matrix(main: Vocab, meta: Vocab) -> TokenMapMatrix:
    """Mass-splitting map: main token -> 1/k on each of its k meta tokens."""
    m = np.zeros((len(main), len(meta)), dtype=np.float64)
    for i in range(len(SPECIAL_TEXTS)):
        m[i, i] = 1.0
    for tid in range(len(SPECIAL_TEXTS), len(main)):
        enc = meta.encode_text(main.text_of(tid))
        if not enc:
            m[tid, meta.unk] = 1.0
            continue
        w = 1.0 / len(enc)
        for j in enc:
            m[tid, j] += w
    return TokenMapMatrix(matrix=m)


def build_first_token_map(main: Vocab, meta: Vocab) -> FirstTokenMap:
    """First-token shortcut map.

    Builds the reverse index from the first meta token of every main token's
    text (later main tokens overwrite earlier ones on collision), then reads
    it out per meta token, defaulting to UNMAPPED.
    """
    reverse: dict[int, int] = {}
    for tid in range(len(main)):
        enc = meta.encode_text(main.text_of(tid))
        if enc:
            reverse[enc[0]] = tid
    entries = np.full(len(meta), UNMAPPED, dtype=np.int64)
    for j in range(len(meta)):
        if j in reverse:
            entries[j] = reverse[j]
    return FirstTokenMap(entries=entries)


TokenMap = Union[TokenMapMatrix, FirstTokenMap]


def remap_distribution(p: Sequence[float], token_map: TokenMap) -> np.ndarray:
    """Carry a probability vector over the main vocab onto the meta vocab.

    The result is renormalized and always sums to 1; if the map drops all
    mass (first-token entries all UNMAPPED on the support of ``p``) a
    DegenerateDistributionError is raised.
    """
    vec = np.asarray(p, dtype=np.float64)
    if vec.ndim != 1:
        raise ConfigError("remap_distribution expects a 1-D probability vector")
    if abs(vec.sum() - 1.0) > 1e-9:
        raise ConfigError(f"input does not sum to 1 (sum={vec.sum()!r})")
    if isinstance(token_map, TokenMapMatrix):
        out = vec @ token_map.matrix
    else:
        out = np.zeros(len(token_map.entries), dtype=np.float64)
        mapped = token_map.entries >= 0
        out[mapped] = vec[token_map.entries[mapped]]
    total = out.sum()
    if total <= 1e-300:
        raise DegenerateDistributionError("all probability mass lost in remap")
    return out / total
