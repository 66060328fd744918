"""
Dual view encoders (language view over projected item embeddings, ID view over
semantic-ID tokens), masked pooling and the two contrastive alignment losses.

Similarity is the plain inner product; both losses are the negated symmetric
InfoNCE so that gradient descent minimizes them.
"""

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from ..logger import model_logger as logger
from ..textembed import project

PAD = -1


@dataclass
class ViewEncoding:
    states: torch.Tensor  # (B, S, d); H_u for the language view, C_u for the ID view
    pad: torch.Tensor  # (B, S) True at padding
    pooled: torch.Tensor  # (B, d); p_u or q_u


def masked_mean(states: torch.Tensor, pad: torch.Tensor) -> torch.Tensor:
    keep = (~pad).unsqueeze(-1).to(states.dtype)
    return (states * keep).sum(1) / keep.sum(1).clamp_min(1.0)


class SequenceEncoder(nn.Module):
    """Pre-norm Transformer encoder with learned absolute positions and a final LayerNorm."""

    def __init__(self, d_model: int, n_heads: int, n_layers: int, ffn_dim: int,
                 max_positions: int, dropout: float = 0.1):
        super().__init__()
        self.max_positions = max_positions
        self.positions = nn.Embedding(max_positions, d_model)
        layer = nn.TransformerEncoderLayer(
            d_model, n_heads, ffn_dim, dropout, batch_first=True, norm_first=True
        )
        self.layers = nn.TransformerEncoder(
            layer, n_layers, norm=nn.LayerNorm(d_model), enable_nested_tensor=False
        )

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        S = x.shape[1]
        if S > self.max_positions:
            raise ValueError(f"sequence of length {S} exceeds encoder limit {self.max_positions}")
        return x + self.positions(torch.arange(S, device=x.device))

    def forward(self, x: torch.Tensor, pad: torch.Tensor) -> torch.Tensor:
        h = self.layers(self.embed(x), src_key_padding_mask=pad)
        return h.masked_fill(pad.unsqueeze(-1), 0.0)


class LanguageEncoder(nn.Module):
    """Projected item text embeddings -> H_u, one vector per item position."""

    def __init__(self, projector: nn.Module, encoder: SequenceEncoder):
        super().__init__()
        self.projector = projector
        self.encoder = encoder

    def forward(self, text_embeddings: torch.Tensor, items: torch.Tensor) -> ViewEncoding:
        pad = items < 0
        e = text_embeddings[items.clamp_min(0)]
        h = self.encoder(project(e, self.projector), pad)
        return ViewEncoding(h, pad, masked_mean(h, pad))


class IdEncoder(nn.Module):
    """Flattened semantic-ID tokens T_u (k per item) -> C_u, one vector per token."""

    def __init__(self, vocab_sizes: Sequence[int], token_dim: int, d_model: int,
                 encoder: SequenceEncoder):
        super().__init__()
        self.levels = len(vocab_sizes)
        offsets = torch.tensor([0] + list(vocab_sizes[:-1])).cumsum(0)
        self.register_buffer("offsets", offsets, persistent=False)
        self.token_embedding = nn.Embedding(int(sum(vocab_sizes)), token_dim)
        self.token_proj = nn.Linear(token_dim, d_model)
        self.encoder = encoder

    def token_inputs(self, tokens: torch.Tensor) -> torch.Tensor:
        """(B, S, L) level-local tokens -> (B, S*L, d) embeddings before positions."""
        B, S, L = tokens.shape
        flat = (tokens + self.offsets[:L]).reshape(B, S * L)
        return self.token_proj(self.token_embedding(flat))

    def forward(self, codes: torch.Tensor, items: torch.Tensor) -> ViewEncoding:
        pad_items = items < 0
        tokens = codes[items.clamp_min(0)]
        pad = pad_items.repeat_interleave(self.levels, dim=1)
        c = self.encoder(self.token_inputs(tokens), pad)
        return ViewEncoding(c, pad, masked_mean(c, pad))


def item_id_representation(c: torch.Tensor, levels: int) -> torch.Tensor:
    """g_i: sum of an item's k encoded ID-token vectors, (B, S*k, d) -> (B, S, d)."""
    B, T, d = c.shape
    return c.reshape(B, T // levels, levels, d).sum(2)


def info_nce(anchors: torch.Tensor, positives: torch.Tensor, tau: float) -> torch.Tensor:
    """Symmetric InfoNCE with in-batch negatives: both directions summed, averaged over rows."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    n = anchors.shape[0]
    if n < 2:
        logger.warning("contrastive batch has no negatives; loss is 0")
        return (anchors.sum() + positives.sum()) * 0.0
    logits = anchors @ positives.T / tau
    labels = torch.arange(n, device=anchors.device)
    forward = F.cross_entropy(logits, labels, reduction="sum")
    backward = F.cross_entropy(logits.T, labels, reduction="sum")
    return (forward + backward) / n


def loss_item_alignment(h: torch.Tensor, g: torch.Tensor, items: torch.Tensor, tau: float) -> torch.Tensor:
    """
    Item-level alignment over the distinct items of a batch. h, g are (N, d) per real position,
    items (N,) their indices; repeated occurrences are averaged into one pair per item.
    """
    unique, inverse = torch.unique(items, return_inverse=True)
    n = unique.shape[0]
    counts = torch.zeros(n, dtype=h.dtype, device=h.device).index_add_(0, inverse, torch.ones_like(inverse, dtype=h.dtype))
    h_mean = torch.zeros(n, h.shape[1], dtype=h.dtype, device=h.device).index_add_(0, inverse, h) / counts[:, None]
    g_mean = torch.zeros(n, g.shape[1], dtype=g.dtype, device=g.device).index_add_(0, inverse, g) / counts[:, None]
    return info_nce(h_mean, g_mean, tau)


def loss_user_alignment(p: torch.Tensor, q: torch.Tensor, tau: float) -> torch.Tensor:
    return info_nce(p, q, tau)


def pad_histories(histories: Sequence[Sequence[int]], max_len: int) -> torch.Tensor:
    """Right-padded (B, S) item batch keeping the most recent max_len items of each history."""
    clipped = [list(h)[-max_len:] for h in histories]
    S = max(1, max((len(h) for h in clipped), default=1))
    out = torch.full((len(clipped), S), PAD, dtype=torch.long)
    for row, h in enumerate(clipped):
        if h:
            out[row, :len(h)] = torch.tensor(h, dtype=torch.long)
    return out
