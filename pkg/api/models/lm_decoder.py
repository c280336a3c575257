"""
Miniature autoregressive report decoder.

Consumes the assembled prompt embeddings followed by the embedded report
prefix, is trained with the masked negative log-likelihood over report
positions only, and decodes with greedy search or length-normalized beam
search.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ContextLengthError, DegenerateBatchError, InvalidParameterError
from ..services.text import BOS_ID, EOS_ID, PAD_ID
from .ssm_core import SelectiveSSM

logger = logging.getLogger(__name__)


DECODER_KINDS = ("ssm", "attention")
LOSS_REDUCTIONS = ("mean", "sum")


@dataclass
class DecoderConfig:
    vocab_size: int
    embed_dim: int = 64
    n_layers: int = 2
    context_window: int = 256
    d_state: int = 8
    expand: int = 2
    d_conv: int = 4
    n_heads: int = 4
    kind: str = "ssm"
    scan_mode: str = "parallel"

    def __post_init__(self):
        if self.vocab_size < 4:
            raise InvalidParameterError(f"vocab_size must reserve pad/bos/eos/unk, got {self.vocab_size}")
        if self.kind not in DECODER_KINDS:
            raise InvalidParameterError(f"unknown decoder kind '{self.kind}'")
        if self.kind == "attention" and self.embed_dim % self.n_heads:
            raise InvalidParameterError(f"embed_dim {self.embed_dim} is not divisible by {self.n_heads} heads")
        if self.n_layers < 1 or self.context_window < 2:
            raise InvalidParameterError("decoder needs at least one layer and a context window >= 2")


@dataclass
class TrainingBatch:
    inputs: torch.Tensor  # (batch, T, E): prompt then embedded [bos] + report[:-1]
    targets: torch.Tensor  # (batch, T): next-token ids, PAD on prompt positions
    mask: torch.Tensor  # (batch, T) bool: True exactly on report positions
    prompt_length: int

    def __post_init__(self):
        if self.targets.shape != self.mask.shape or self.inputs.shape[:2] != self.targets.shape:
            raise InvalidParameterError("inputs, targets and mask disagree in shape")
        if self.mask[:, : self.prompt_length].any():
            raise InvalidParameterError("loss mask touches prompt positions")


class MambaMixer(nn.Module):
    """Pre-norm residual block: x + out_proj(SSM(SiLU(causal_conv(in(x)))) * SiLU(gate))."""

    def __init__(self, dim: int, d_state: int, expand: int, d_conv: int, scan_mode: str = "parallel"):
        super().__init__()
        d_inner = expand * dim
        self.norm = nn.LayerNorm(dim)
        self.in_proj = nn.Linear(dim, 2 * d_inner)
        self.conv = nn.Conv1d(d_inner, d_inner, d_conv, groups=d_inner, padding=d_conv - 1)
        self.ssm = SelectiveSSM(d_inner, d_state, scan_mode=scan_mode)
        self.out_proj = nn.Linear(d_inner, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        length = x.shape[1]
        xs, gate = self.in_proj(self.norm(x)).chunk(2, dim=-1)
        xs = self.conv(xs.transpose(1, 2))[..., :length].transpose(1, 2)
        y = self.ssm(F.silu(xs)) * F.silu(gate)
        return x + self.out_proj(y)


class CausalAttentionBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        length = x.shape[1]
        causal = torch.triu(torch.ones(length, length, dtype=torch.bool, device=x.device), diagonal=1)
        h = self.norm1(x)
        x = x + self.attn(h, h, h, attn_mask=causal, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class ReportDecoder(nn.Module):
    def __init__(self, config: DecoderConfig):
        super().__init__()
        self.config = config
        self.embed = nn.Embedding(config.vocab_size, config.embed_dim)
        if config.kind == "ssm":
            layers = [
                MambaMixer(config.embed_dim, config.d_state, config.expand, config.d_conv, config.scan_mode)
                for _ in range(config.n_layers)
            ]
        else:
            layers = [CausalAttentionBlock(config.embed_dim, config.n_heads) for _ in range(config.n_layers)]
        self.layers = nn.ModuleList(layers)
        self.norm = nn.LayerNorm(config.embed_dim)
        self.lm_head = nn.Linear(config.embed_dim, config.vocab_size)

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.embed(ids)

    def forward_embeddings(self, inputs: torch.Tensor) -> torch.Tensor:
        """(batch, T, E) -> (batch, T, V) logits; position t only sees positions <= t."""
        if inputs.shape[1] > self.config.context_window:
            raise ContextLengthError(
                f"sequence of {inputs.shape[1]} positions exceeds the context window of {self.config.context_window}"
            )
        x = inputs
        for layer in self.layers:
            x = layer(x)
        return self.lm_head(self.norm(x))

    def build_batch(self, prompt: torch.Tensor, report_ids: torch.Tensor) -> TrainingBatch:
        """
        Teacher-forced batch. report_ids is (batch, T) with eos included and PAD after it;
        targets are aligned so logits at position j predict the token after input j.
        """
        batch, prompt_len = prompt.shape[0], prompt.shape[1]
        if report_ids.shape[0] != batch:
            raise InvalidParameterError(f"{report_ids.shape[0]} reports for a prompt batch of {batch}")
        bos = torch.full((batch, 1), BOS_ID, dtype=torch.long, device=report_ids.device)
        shifted = torch.cat([bos, report_ids[:, :-1]], dim=1)
        inputs = torch.cat([prompt, self.embed_tokens(shifted)], dim=1)
        prompt_pad = torch.full((batch, prompt_len), PAD_ID, dtype=torch.long, device=report_ids.device)
        targets = torch.cat([prompt_pad, report_ids], dim=1)
        mask = torch.cat(
            [torch.zeros_like(prompt_pad, dtype=torch.bool), report_ids != PAD_ID],
            dim=1,
        )
        return TrainingBatch(inputs=inputs, targets=targets, mask=mask, prompt_length=prompt_len)

    def forward(self, prompt: torch.Tensor, report_ids: torch.Tensor) -> Tuple[torch.Tensor, TrainingBatch]:
        batch = self.build_batch(prompt, report_ids)
        return self.forward_embeddings(batch.inputs), batch

    @torch.no_grad()
    def next_log_probs(self, prompt: torch.Tensor, prefixes: Sequence[Sequence[int]]) -> torch.Tensor:
        """Log-probabilities of the next token after each equal-length prefix, (k, V) float64."""
        k = len(prefixes)
        ids = torch.tensor([[BOS_ID, *p] for p in prefixes], dtype=torch.long, device=prompt.device)
        inputs = torch.cat([prompt.expand(k, -1, -1), self.embed_tokens(ids)], dim=1)
        logits = self.forward_embeddings(inputs)[:, -1]
        return F.log_softmax(logits.double(), dim=-1)

    def beam_search(
        self,
        prompt: torch.Tensor,
        beam_width: int = 3,
        max_len: int = 60,
        length_penalty: float = 0.7,
    ) -> List[int]:
        """Decode one prompt (1, P, E); returns report ids without the trailing eos."""
        max_len = min(max_len, self.config.context_window - prompt.shape[1] - 1)
        best = beam_search(
            lambda prefixes: self.next_log_probs(prompt, prefixes),
            beam_width=beam_width,
            max_len=max_len,
            length_penalty=length_penalty,
            eos_id=EOS_ID,
        )
        return strip_eos(best.tokens)

    def greedy_decode(self, prompt: torch.Tensor, max_len: int = 60) -> List[int]:
        max_len = min(max_len, self.config.context_window - prompt.shape[1] - 1)
        return strip_eos(greedy_decode(lambda prefixes: self.next_log_probs(prompt, prefixes), max_len, EOS_ID))


def strip_eos(tokens: Sequence[int]) -> List[int]:
    tokens = list(tokens)
    return tokens[: tokens.index(EOS_ID)] if EOS_ID in tokens else tokens


def loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Negative log-likelihood over masked positions; prompt positions contribute nothing."""
    if reduction not in LOSS_REDUCTIONS:
        raise InvalidParameterError(f"unknown loss reduction '{reduction}'")
    if mask.shape != targets.shape or logits.shape[:-1] != targets.shape:
        raise InvalidParameterError(
            f"logits {tuple(logits.shape)}, targets {tuple(targets.shape)} and mask {tuple(mask.shape)} disagree"
        )
    mask = mask.bool()
    count = mask.sum()
    if count == 0:
        raise DegenerateBatchError("loss mask selects no report positions")
    safe_targets = targets.masked_fill(~mask, 0)
    nll = -F.log_softmax(logits, dim=-1).gather(-1, safe_targets.unsqueeze(-1)).squeeze(-1)
    total = (nll * mask).sum()
    return total / count if reduction == "mean" else total


@dataclass
class Hypothesis:
    tokens: Tuple[int, ...]
    log_prob: float

    def score(self, length_penalty: float) -> float:
        return length_normalized_score(self.log_prob, len(self.tokens), length_penalty)


def length_normalized_score(log_prob: float, length: int, alpha: float = 0.7) -> float:
    """log p / length**alpha; length counts the eos token when present."""
    return log_prob / max(length, 1) ** alpha


StepFn = Callable[[List[Tuple[int, ...]]], Union[torch.Tensor, np.ndarray]]


def beam_search(
    step_fn: StepFn,
    beam_width: int,
    max_len: int,
    length_penalty: float = 0.7,
    eos_id: Optional[int] = EOS_ID,
) -> Hypothesis:
    """
    Keep the beam_width best candidates by cumulative log-probability at each step.

    Candidates ending in eos leave the beam as finished hypotheses, so the beam
    can shrink; hypotheses still open at max_len count as finished. Ties are
    broken by token id, then by beam position. The winner has the highest
    length-normalized score.
    """
    if beam_width < 1:
        raise InvalidParameterError(f"beam_width must be >= 1, got {beam_width}")
    if max_len < 1:
        raise InvalidParameterError(f"max_len must be >= 1, got {max_len}")
    alive = [Hypothesis(tokens=(), log_prob=0.0)]
    finished: List[Hypothesis] = []
    for _ in range(max_len):
        step = step_fn([h.tokens for h in alive])
        log_probs = step.detach().cpu().double().numpy() if isinstance(step, torch.Tensor) else np.asarray(step, dtype=np.float64)
        scores = np.array([h.log_prob for h in alive])[:, None] + log_probs
        beam_idx, token_idx = np.indices(scores.shape)
        order = np.lexsort((beam_idx.ravel(), token_idx.ravel(), -scores.ravel()))[:beam_width]
        next_alive = []
        for flat in order:
            i, tok = divmod(int(flat), scores.shape[1])
            hyp = Hypothesis(tokens=alive[i].tokens + (tok,), log_prob=float(scores[i, tok]))
            (finished if eos_id is not None and tok == eos_id else next_alive).append(hyp)
        alive = next_alive
        if not alive:
            break
    finished.extend(alive)
    return min(finished, key=lambda h: (-h.score(length_penalty), h.tokens))


def greedy_decode(step_fn: StepFn, max_len: int, eos_id: Optional[int] = EOS_ID) -> List[int]:
    tokens: List[int] = []
    for _ in range(max_len):
        step = step_fn([tuple(tokens)])
        row = step[0].detach().cpu().double().numpy() if isinstance(step, torch.Tensor) else np.asarray(step[0])
        # argmax returns the lowest id among ties
        tok = int(np.argmax(row))
        tokens.append(tok)
        if eos_id is not None and tok == eos_id:
            break
    return tokens
