"""
Collaborative user profiles from a small self-attentive next-item recommender.
"""

from typing import List, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..logger import retrieval_logger as logger
from ..model.encoders import PAD, pad_histories


class CollabEncoder(nn.Module):
    """Causal two-layer self-attention over item embeddings; the item table doubles as output head."""

    def __init__(self, n_items: int, dim: int, n_layers: int, n_heads: int, max_len: int,
                 dropout: float = 0.1):
        super().__init__()
        self.items = nn.Embedding(n_items, dim)
        self.positions = nn.Embedding(max_len, dim)
        layer = nn.TransformerEncoderLayer(dim, n_heads, dim * 2, dropout, batch_first=True, norm_first=True)
        self.layers = nn.TransformerEncoder(layer, n_layers, norm=nn.LayerNorm(dim), enable_nested_tensor=False)

    def forward(self, items: torch.Tensor) -> torch.Tensor:
        pad = items == PAD
        S = items.shape[1]
        x = self.items(items.clamp_min(0)) + self.positions(torch.arange(S, device=items.device))
        causal = torch.triu(torch.ones(S, S, dtype=torch.bool, device=items.device), diagonal=1)
        h = self.layers(x, mask=causal, src_key_padding_mask=pad)
        return h.masked_fill(pad.unsqueeze(-1), 0.0)

    def logits(self, h: torch.Tensor) -> torch.Tensor:
        return h @ self.items.weight.T


def _last_positions(items: torch.Tensor) -> torch.Tensor:
    return (items != PAD).sum(1) - 1


def train_collab_encoder(
    histories: Sequence[Sequence[int]],
    n_items: int,
    *,
    dim: int = 32,
    n_layers: int = 2,
    n_heads: int = 2,
    epochs: int = 30,
    lr: float = 0.001,
    max_len: int = 20,
    batch_size: int = 64,
    seed: int = 0,
) -> np.ndarray:
    """Fit on next-item prediction over every train prefix; return unit-norm profiles (n_users, dim)."""
    torch.manual_seed(seed)
    model = CollabEncoder(n_items, dim, n_layers, n_heads, max_len)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    items = pad_histories(histories, max_len)
    # input t predicts item t+1
    inputs = items[:, :-1]
    labels = items[:, 1:]
    trainable = (labels != PAD).any(1)
    inputs, labels = inputs[trainable], labels[trainable]
    gen = torch.Generator().manual_seed(seed)

    if len(inputs) and inputs.shape[1]:
        for epoch in range(epochs):
            model.train()
            perm = torch.randperm(len(inputs), generator=gen)
            total = 0.0
            for start in range(0, len(perm), batch_size):
                idx = perm[start:start + batch_size]
                h = model(inputs[idx])
                loss = F.cross_entropy(
                    model.logits(h).reshape(-1, n_items), labels[idx].reshape(-1), ignore_index=PAD
                )
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            if epoch == epochs - 1 or epoch % 10 == 0:
                logger.info(f"Collaborative encoder epoch {epoch}: next-item loss {total / len(inputs):.4f}")

    return collab_profiles(model, histories, max_len)


@torch.no_grad()
def collab_profiles(model: CollabEncoder, histories: Sequence[Sequence[int]], max_len: int) -> np.ndarray:
    model.eval()
    items = pad_histories(histories, max_len)
    h = model(items)
    last = h[torch.arange(len(items)), _last_positions(items)]
    return F.normalize(last, dim=-1, eps=1e-12).numpy().astype(np.float32)


def collab_search(profiles: np.ndarray, target: int, z: int) -> List[int]:
    """Top-z users by cosine with the target profile, ties to the lower user index."""
    norms = np.linalg.norm(profiles, axis=1)
    unit = profiles / np.where(norms > 0, norms, 1.0)[:, None]
    sims = unit @ unit[target]
    candidates = np.array([u for u in range(len(sims)) if u != target], dtype=np.int64)
    if len(candidates) == 0:
        return []
    order = np.lexsort((candidates, -sims[candidates]))
    return [int(u) for u in candidates[order][:z]]
