"""
Shared decoder that generates item-ID tokens from either view, plus the pieces of
semantic-substitution guidance (top-q refinement, substitution plans, fused input
embeddings), temperature-scaled mutual KL and trie-constrained beam search.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from ..logger import model_logger as logger
from ..semid import IdTrie

KL_EPS = 1e-12


class SharedDecoder(nn.Module):
    def __init__(self, vocab_sizes: Sequence[int], d_model: int, n_heads: int, n_layers: int,
                 ffn_dim: int, token_dim: int, dropout: float = 0.1):
        super().__init__()
        self.vocab_sizes = list(vocab_sizes)
        self.levels = len(self.vocab_sizes)
        offsets = torch.tensor([0] + self.vocab_sizes[:-1]).cumsum(0)
        self.register_buffer("offsets", offsets, persistent=False)
        self.bos = int(sum(self.vocab_sizes))
        # decoder-side token table; the last row is BOS
        self.token_embedding = nn.Embedding(self.bos + 1, token_dim)
        self.token_proj = nn.Linear(token_dim, d_model)
        self.positions = nn.Embedding(self.levels, d_model)
        self.retrieved_segment = nn.Parameter(torch.randn(d_model) * 0.02)
        layer = nn.TransformerDecoderLayer(
            d_model, n_heads, ffn_dim, dropout, batch_first=True, norm_first=True
        )
        self.layers = nn.TransformerDecoder(layer, n_layers, norm=nn.LayerNorm(d_model))
        self.heads = nn.ModuleList(nn.Linear(d_model, v) for v in self.vocab_sizes)
        causal = torch.triu(torch.ones(self.levels, self.levels, dtype=torch.bool), diagonal=1)
        self.register_buffer("causal_mask", causal, persistent=False)

    def embed_tokens(self, level: int, tokens: torch.Tensor) -> torch.Tensor:
        return self.token_proj(self.token_embedding(tokens + self.offsets[level]))

    def token_inputs(self, targets: torch.Tensor) -> torch.Tensor:
        """Shifted decoder inputs [BOS, t1, ..., t(L-1)] as (B, L, d), before positions."""
        if targets.shape[1] != self.levels:
            raise ValueError(f"target has {targets.shape[1]} tokens, decoder expects {self.levels}")
        B = targets.shape[0]
        bos = self.token_proj(self.token_embedding(torch.full((B, 1), self.bos, device=targets.device)))
        shifted = [self.embed_tokens(l, targets[:, l:l + 1]) for l in range(self.levels - 1)]
        return torch.cat([bos] + shifted, dim=1)

    def fuse(self, level: int, indices: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
        """Convex combination of level tokens' embeddings: (B, q), (B, q) -> (B, d)."""
        return (self.embed_tokens(level, indices) * weights.unsqueeze(-1)).sum(1)

    def augment_memory(self, memory: torch.Tensor, memory_pad: torch.Tensor,
                       retrieved: torch.Tensor, retrieved_pad: torch.Tensor
                       ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Prepend retrieved users' preference vectors as extra memory positions."""
        if retrieved.shape[1] == 0:
            return memory, memory_pad
        memory = torch.cat([retrieved + self.retrieved_segment, memory], dim=1)
        return memory, torch.cat([retrieved_pad, memory_pad], dim=1)

    def forward_inputs(self, memory: torch.Tensor, memory_pad: torch.Tensor,
                       inputs: torch.Tensor) -> List[torch.Tensor]:
        L = inputs.shape[1]
        x = inputs + self.positions(torch.arange(L, device=inputs.device))
        h = self.layers(
            x, memory,
            tgt_mask=self.causal_mask[:L, :L],
            memory_key_padding_mask=memory_pad,
        )
        return [self.heads[l](h[:, l]) for l in range(L)]

    def decode_teacher_forced(self, memory: torch.Tensor, memory_pad: torch.Tensor,
                              targets: torch.Tensor) -> List[torch.Tensor]:
        """Logits for each of the L target positions given ground-truth prefixes."""
        return self.forward_inputs(memory, memory_pad, self.token_inputs(targets))


def generation_loss(logits: Sequence[torch.Tensor], targets: torch.Tensor) -> torch.Tensor:
    """Token-level cross-entropy averaged over all B x L ground-truth tokens."""
    losses = [F.cross_entropy(lg, targets[:, l]) for l, lg in enumerate(logits)]
    return torch.stack(losses).mean()


# ---------------------------------------------------------------------------
# Semantic-substitution guidance
# ---------------------------------------------------------------------------

@dataclass
class RefinedDistribution:
    """Top-q tokens of one level and their renormalized probabilities."""

    level: int
    indices: torch.Tensor  # (B, q)
    weights: torch.Tensor  # (B, q)


def refine_top_q(logits: torch.Tensor, q: int, level: int = 0) -> RefinedDistribution:
    V = logits.shape[-1]
    if q > V:
        raise ValueError(f"q={q} exceeds vocabulary size {V} at level {level}")
    values, indices = torch.topk(logits, q, dim=-1)
    return RefinedDistribution(level, indices, torch.softmax(values, dim=-1))


def language_view_predict(decoder: SharedDecoder, memory: torch.Tensor, memory_pad: torch.Tensor,
                          targets: torch.Tensor, q: int
                          ) -> Tuple[List[torch.Tensor], List[RefinedDistribution]]:
    """Teacher-forced pass over the language-view memory and its refined q-sparse predictions."""
    logits = decoder.decode_teacher_forced(memory, memory_pad, targets)
    return logits, refine_levels(logits, q)


@lru_cache(maxsize=None)
def _note_clamp(level: int, width: int, q: int) -> None:
    logger.warning(f"q={q} exceeds the {width} tokens of level {level}; clamped to {width}")


def refine_levels(logits: Sequence[torch.Tensor], q: int) -> List[RefinedDistribution]:
    """Top-q refinement per level. Levels after the first that are narrower than q (the
    disambiguation level) use their full width; this is logged once per shape."""
    out = []
    for l, lg in enumerate(logits):
        q_l = q
        if l > 0 and q > lg.shape[-1]:
            q_l = lg.shape[-1]
            _note_clamp(l, q_l, q)
        out.append(refine_top_q(lg.detach(), q_l, l))
    return out


@dataclass
class SubstitutionPlan:
    keep_item: torch.Tensor  # (B,) True: ground truth for every token of the target
    keep_token: torch.Tensor  # (B, L) True: this token keeps ground truth under substitution

    @classmethod
    def draw(cls, batch: int, levels: int, p1: float, p2: float,
             generator: Optional[torch.Generator] = None) -> "SubstitutionPlan":
        keep_item = torch.rand(batch, generator=generator) < p1
        keep_token = torch.rand(batch, levels, generator=generator) < p2
        return cls(keep_item, keep_token)

    @property
    def substituted(self) -> torch.Tensor:
        return ~self.keep_item.unsqueeze(1) & ~self.keep_token


def apply_substitution(plan: SubstitutionPlan, targets: torch.Tensor,
                       refined: Sequence[RefinedDistribution], decoder: SharedDecoder) -> torch.Tensor:
    """
    ID-view decoder inputs: ground-truth token embeddings where kept, fused top-q embeddings
    where substituted. Targets themselves are never altered.
    """
    base = decoder.token_inputs(targets)
    substituted = plan.substituted.to(targets.device)
    columns = [base[:, 0]]
    for l in range(decoder.levels - 1):
        r = refined[l]
        fused = decoder.fuse(l, r.indices, r.weights.detach())
        columns.append(torch.where(substituted[:, l:l + 1], fused, base[:, l + 1]))
    return torch.stack(columns, dim=1)


@dataclass
class TokenDistribution:
    level: int
    probs: torch.Tensor  # (B, V)
    temperature: float


def temperature_scale(logits: torch.Tensor, phi: float, level: int = 0) -> TokenDistribution:
    if phi <= 0:
        raise ValueError("temperature must be > 0")
    z = (logits - logits.max(dim=-1, keepdim=True).values) / phi
    return TokenDistribution(level, torch.softmax(z, dim=-1), phi)


def _kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    return (p * (p.clamp_min(KL_EPS).log() - q.clamp_min(KL_EPS).log())).sum(-1)


def loss_kl_mutual(language: Sequence[TokenDistribution], id_view: Sequence[TokenDistribution]) -> torch.Tensor:
    """Symmetric KL summed over levels, averaged over items; a positive quantity."""
    if len(language) != len(id_view):
        raise ValueError("both views need the same number of levels")
    per_item = sum(_kl(a.probs, b.probs) + _kl(b.probs, a.probs) for a, b in zip(language, id_view))
    return per_item.mean()


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

@torch.no_grad()
def greedy_decode(decoder: SharedDecoder, memory: torch.Tensor, memory_pad: torch.Tensor
                  ) -> Tuple[List[torch.Tensor], torch.Tensor]:
    """Free-running decoding: every step conditions on the model's own previous argmax tokens."""
    B = memory.shape[0]
    tokens = torch.zeros(B, decoder.levels, dtype=torch.long, device=memory.device)
    step_logits = []
    for l in range(decoder.levels):
        # full-length inputs: causality makes positions > l irrelevant
        lg = decoder.decode_teacher_forced(memory, memory_pad, tokens)[l]
        step_logits.append(lg)
        tokens[:, l] = lg.argmax(-1)
    return step_logits, tokens


@torch.no_grad()
def generate(decoder: SharedDecoder, memory: torch.Tensor, memory_pad: torch.Tensor,
             trie: IdTrie, beam: int) -> List[Tuple[int, float]]:
    """
    Trie-constrained beam search for one user (memory (S, d), memory_pad (S,)).
    Returns up to `beam` (item, log-probability) pairs, best first; score ties go to the
    lexicographically smaller token tuple.
    """
    if beam > len(trie):
        logger.warning(f"beam {beam} exceeds the {len(trie)} valid ids; returning all of them")
    L = decoder.levels
    beams: List[Tuple[Tuple[int, ...], float]] = [((), 0.0)]
    for l in range(L):
        n = len(beams)
        tokens = torch.zeros(n, L, dtype=torch.long, device=memory.device)
        for b, (prefix, _) in enumerate(beams):
            if l:
                tokens[b, :l] = torch.tensor(prefix, dtype=torch.long)
        logits = decoder.decode_teacher_forced(
            memory.unsqueeze(0).expand(n, -1, -1), memory_pad.unsqueeze(0).expand(n, -1), tokens
        )[l]
        logp = F.log_softmax(logits.double(), dim=-1).cpu()
        candidates = []
        for b, (prefix, score) in enumerate(beams):
            for t in trie.allowed(prefix):
                candidates.append((prefix + (t,), score + float(logp[b, t])))
        candidates.sort(key=lambda c: (-c[1], c[0]))
        beams = candidates[:beam]
    return [(trie.lookup(prefix), score) for prefix, score in beams]
