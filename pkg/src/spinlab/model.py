"""Tiny encoder-decoder transformer: the differentiable main model.

Three batch modes share one parameter set: teacher-forced seq2seq,
next-token causal LM, and masked reconstruction (bidirectional encoder
pass with loss only at masked positions).  Everything runs in float64 on
CPU so gradient checks against central finite differences are exact to
roundoff, and checkpoints are byte-stable.
"""

from __future__ import annotations

import hashlib
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import torch
from torch import nn

from .corpus import Example
from .errors import ConfigError, EmptyLossError, NumericError
from .vocab import Vocab

logger = logging.getLogger(__name__)

SEQ2SEQ = "seq2seq"
CAUSAL = "causal"
MASKED = "masked"
MODES = (SEQ2SEQ, CAUSAL, MASKED)

_NEG = -1.0e30  # attention blocker; finite so softmax never emits NaN


def derive_seed(base: int, tag: str) -> int:
    """Stable sub-seed for an independent RNG stream."""
    digest = hashlib.sha256(f"{base}:{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    layers: int = 2
    heads: int = 2
    ff: int = 128
    max_len: int = 64
    tied: bool = True

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ConfigError("d_model must be divisible by heads")
        if min(self.vocab_size, self.d_model, self.layers, self.heads, self.ff, self.max_len) < 1:
            raise ConfigError("model dimensions must be positive")

    def as_dict(self) -> dict:
        return {"vocab_size": self.vocab_size, "d_model": self.d_model, "layers": self.layers,
                "heads": self.heads, "ff": self.ff, "max_len": self.max_len, "tied": self.tied}


@dataclass
class Batch:
    """Padded tensors for one forward pass; padding is always trailing."""

    mode: str
    source: Optional[torch.Tensor]      # (B, S) ids; None in causal mode
    target_in: Optional[torch.Tensor]   # (B, T) decoder input; None in masked mode
    target_out: torch.Tensor            # (B, T) scoring targets (PAD = ignore)
    loss_mask: torch.Tensor             # (B, T) bool, scorable for the main loss
    meta_mask: torch.Tensor             # (B, T) bool, scorable for the meta loss
    src_pad_mask: Optional[torch.Tensor] = None  # (B, S) bool, True at PAD

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown batch mode {self.mode!r}")


def make_batch(examples: Sequence[Example], mode: str, vocab: Vocab) -> Batch:
    """Teacher-forcing batch for seq2seq or causal mode."""
    if mode == SEQ2SEQ:
        sources = [ex.source for ex in examples]
        targets = [ex.target for ex in examples]
    elif mode == CAUSAL:
        sources = None
        targets = [ex.source for ex in examples]
    else:
        raise ConfigError("use make_masked_batch for masked mode")

    pad = vocab.pad
    t_max = max(len(t) for t in targets) + 1
    tgt_in = torch.full((len(targets), t_max), pad, dtype=torch.long)
    tgt_out = torch.full((len(targets), t_max), pad, dtype=torch.long)
    for i, t in enumerate(targets):
        tgt_in[i, 0] = vocab.bos
        tgt_in[i, 1 : len(t) + 1] = torch.tensor(t, dtype=torch.long)
        tgt_out[i, : len(t)] = torch.tensor(t, dtype=torch.long)
        tgt_out[i, len(t)] = vocab.eos
    loss_mask = tgt_out != pad
    meta_mask = loss_mask & (tgt_out != vocab.eos) & (tgt_out != vocab.bos)

    src = src_pad = None
    if sources is not None:
        s_max = max(len(s) for s in sources)
        src = torch.full((len(sources), s_max), pad, dtype=torch.long)
        for i, s in enumerate(sources):
            src[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        src_pad = src == pad
    return Batch(mode, src, tgt_in, tgt_out, loss_mask, meta_mask, src_pad)


def make_masked_batch(examples: Sequence[Example], vocab: Vocab, mask_prob: float,
                      rng: random.Random) -> Batch:
    """Masked-reconstruction batch: corrupted sources, sparse targets.

    Targets hold the true token at masked positions and PAD everywhere
    else; the batch can legitimately end up with zero scorable positions
    (callers skip it).
    """
    pad = vocab.pad
    sources = [ex.source for ex in examples]
    s_max = max(len(s) for s in sources)
    src = torch.full((len(sources), s_max), pad, dtype=torch.long)
    tgt_out = torch.full((len(sources), s_max), pad, dtype=torch.long)
    for i, s in enumerate(sources):
        for j, tok in enumerate(s):
            if rng.random() < mask_prob:
                src[i, j] = vocab.mask
                tgt_out[i, j] = tok
            else:
                src[i, j] = tok
    loss_mask = tgt_out != pad
    return Batch(MASKED, src, None, tgt_out, loss_mask, loss_mask.clone(), src == pad)


class _Attention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.dh = d_model // heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def forward(self, q_in, kv_in, key_pad=None, causal=False):
        b, tq, _ = q_in.shape
        tk = kv_in.shape[1]
        q = self.q(q_in).view(b, tq, self.heads, self.dh).transpose(1, 2)
        k = self.k(kv_in).view(b, tk, self.heads, self.dh).transpose(1, 2)
        v = self.v(kv_in).view(b, tk, self.heads, self.dh).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.dh)
        if causal:
            tri = torch.triu(torch.ones(tq, tk, dtype=torch.bool), diagonal=1)
            scores = scores.masked_fill(tri, _NEG)
        if key_pad is not None:
            scores = scores.masked_fill(key_pad[:, None, None, :], _NEG)
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, tq, self.heads * self.dh)
        return self.o(out)


class _FeedForward(nn.Module):
    def __init__(self, d_model: int, ff: int):
        super().__init__()
        self.inner = nn.Linear(d_model, ff)
        self.outer = nn.Linear(ff, d_model)

    def forward(self, x):
        return self.outer(torch.relu(self.inner(x)))


class _EncoderBlock(nn.Module):
    def __init__(self, d_model: int, heads: int, ff: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = _Attention(d_model, heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = _FeedForward(d_model, ff)

    def forward(self, x, key_pad):
        h = self.norm1(x)
        x = x + self.attn(h, h, key_pad=key_pad)
        return x + self.ff(self.norm2(x))


class _DecoderBlock(nn.Module):
    def __init__(self, d_model: int, heads: int, ff: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = _Attention(d_model, heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.cross_attn = _Attention(d_model, heads)
        self.norm3 = nn.LayerNorm(d_model)
        self.ff = _FeedForward(d_model, ff)

    def forward(self, x, memory=None, mem_pad=None):
        h = self.norm1(x)
        x = x + self.self_attn(h, h, causal=True)
        if memory is not None:
            x = x + self.cross_attn(self.norm2(x), memory, key_pad=mem_pad)
        return x + self.ff(self.norm3(x))


def _sinusoid_table(max_len: int, d_model: int) -> torch.Tensor:
    pos = torch.arange(max_len, dtype=torch.float64).unsqueeze(1)
    idx = torch.arange(0, d_model, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, idx / d_model)
    table = torch.zeros(max_len, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : d_model // 2])
    return table


class Seq2SeqModel(nn.Module):
    """Shared-embedding transformer with optional tied output projection."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.embed = nn.Parameter(torch.empty(config.vocab_size, config.d_model))
        self.enc_blocks = nn.ModuleList(
            _EncoderBlock(config.d_model, config.heads, config.ff) for _ in range(config.layers))
        self.dec_blocks = nn.ModuleList(
            _DecoderBlock(config.d_model, config.heads, config.ff) for _ in range(config.layers))
        self.enc_norm = nn.LayerNorm(config.d_model)
        self.dec_norm = nn.LayerNorm(config.d_model)
        if not config.tied:
            self.out_proj = nn.Linear(config.d_model, config.vocab_size)
        self.register_buffer("pos", _sinusoid_table(config.max_len, config.d_model))
        self.double()
        self._init_params(seed)

    def _init_params(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in sorted(self.named_parameters()):
                if p.dim() >= 2:
                    bound = math.sqrt(6.0 / (p.shape[-2] + p.shape[-1]))
                    p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
                elif "norm" in name and name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()

    def _embed_positions(self, ids: torch.Tensor) -> torch.Tensor:
        t = ids.shape[1]
        if t > self.config.max_len:
            raise ConfigError(f"sequence length {t} exceeds max_len {self.config.max_len}")
        return self.embed[ids] * math.sqrt(self.config.d_model) + self.pos[:t]

    def _project(self, h: torch.Tensor) -> torch.Tensor:
        if self.config.tied:
            return h @ self.embed.T
        return self.out_proj(h)

    def encode(self, src: torch.Tensor, src_pad: Optional[torch.Tensor]) -> torch.Tensor:
        x = self._embed_positions(src)
        for block in self.enc_blocks:
            x = block(x, src_pad)
        return self.enc_norm(x)

    def _decode(self, tgt_in: torch.Tensor, memory: Optional[torch.Tensor],
                mem_pad: Optional[torch.Tensor]) -> torch.Tensor:
        x = self._embed_positions(tgt_in)
        for block in self.dec_blocks:
            x = block(x, memory=memory, mem_pad=mem_pad)
        return self.dec_norm(x)

    def forward_logits(self, batch: Batch) -> torch.Tensor:
        """Teacher-forced logits at every target position, pads included."""
        if batch.mode == SEQ2SEQ:
            memory = self.encode(batch.source, batch.src_pad_mask)
            h = self._decode(batch.target_in, memory, batch.src_pad_mask)
        elif batch.mode == CAUSAL:
            h = self._decode(batch.target_in, None, None)
        else:
            h = self.encode(batch.source, batch.src_pad_mask)
        return self._project(h)

    forward = forward_logits


def main_loss_from_logits(logits: torch.Tensor, batch: Batch) -> torch.Tensor:
    """Mean cross-entropy over the batch's scorable positions."""
    mask = batch.loss_mask
    count = int(mask.sum())
    if count == 0:
        raise EmptyLossError("main", f"{batch.mode} batch")
    logp = torch.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, batch.target_out.unsqueeze(-1)).squeeze(-1)
    return -(picked * mask).sum() / count


def main_loss(model: Seq2SeqModel, batch: Batch) -> torch.Tensor:
    return main_loss_from_logits(model.forward_logits(batch), batch)


def decode_greedy(model: Seq2SeqModel, source: Sequence[int], max_len: int) -> list[int]:
    """Autoregressive argmax decoding; ties break toward the lowest id."""
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    with torch.no_grad():
        src = torch.tensor([list(source)], dtype=torch.long)
        src_pad = src == 0
        memory = model.encode(src, src_pad)
        out: list[int] = []
        ids = [1]  # BOS
        for _ in range(max_len):
            tgt = torch.tensor([ids], dtype=torch.long)
            h = model._decode(tgt, memory, src_pad)
            logits = model._project(h[0, -1])
            nxt = int(torch.argmax(logits))  # argmax returns the first maximum
            if nxt == 2:  # EOS
                break
            out.append(nxt)
            ids.append(nxt)
        return out


def gradients(model: nn.Module, loss_fn: Callable[[], torch.Tensor]) -> dict[str, torch.Tensor]:
    """Per-parameter gradients of a scalar closure; non-finite values raise."""
    names, params = zip(*[(n, p) for n, p in model.named_parameters() if p.requires_grad])
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = {}
    for name, param, grad in zip(names, params, grads):
        if grad is None:
            grad = torch.zeros_like(param)
        if not torch.isfinite(grad).all():
            raise NumericError(f"non-finite gradient in parameter {name!r}")
        out[name] = grad
    return out


def flat_gradient(model: nn.Module, loss_fn: Callable[[], torch.Tensor]) -> torch.Tensor:
    grads = gradients(model, loss_fn)
    return torch.cat([grads[name].reshape(-1) for name in sorted(grads)])


def sgd_step(model: nn.Module, loss: torch.Tensor, lr: float, clip_norm: float = 1.0) -> float:
    """One clipped SGD update; returns the pre-clip gradient norm."""
    if not torch.isfinite(loss):
        raise NumericError("non-finite training loss")
    params = [p for p in model.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    total = torch.sqrt(sum((g * g).sum() for g in grads))
    gnorm = float(total)
    if not math.isfinite(gnorm):
        raise NumericError("non-finite gradient norm")
    scale = lr if gnorm <= clip_norm else lr * clip_norm / gnorm
    with torch.no_grad():
        for p, g in zip(params, grads):
            p.add_(g, alpha=-scale)
    return gnorm


@dataclass
class TrainConfig:
    steps: int
    batch_size: int = 16
    lr: float = 0.5
    seed: int = 0
    mode: str = SEQ2SEQ
    mask_prob: float = 0.15
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("invalid training configuration")
        if self.mode not in MODES:
            raise ConfigError(f"unknown training mode {self.mode!r}")


def sample_indices(rng: random.Random, n: int, k: int) -> list[int]:
    return [rng.randrange(n) for _ in range(k)]


def train_main(model: Seq2SeqModel, examples: Sequence[Example], vocab: Vocab,
               cfg: TrainConfig) -> Seq2SeqModel:
    """Plain main-task SGD training, mutating the model in place."""
    batch_rng = random.Random(cfg.seed)
    mask_rng = random.Random(derive_seed(cfg.seed, "mask"))
    for step in range(cfg.steps):
        idx = sample_indices(batch_rng, len(examples), cfg.batch_size)
        chosen = [examples[i] for i in idx]
        if cfg.mode == MASKED:
            batch = make_masked_batch(chosen, vocab, cfg.mask_prob, mask_rng)
            if int(batch.loss_mask.sum()) == 0:
                logger.warning("step %d: no masked positions, batch skipped", step)
                continue
        else:
            batch = make_batch(chosen, cfg.mode, vocab)
        try:
            loss = main_loss(model, batch)
            sgd_step(model, loss, cfg.lr, cfg.clip_norm)
        except NumericError as exc:
            raise NumericError(f"training diverged at step {step}: {exc}") from None
    return model


def param_hash(model: nn.Module) -> str:
    """Order-stable digest of all parameter values."""
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        h.update(name.encode("utf-8"))
        h.update(p.detach().cpu().numpy().astype("<f8").tobytes())
    return h.hexdigest()
