"""
The plugin network: language-view projector and encoder, ID-view encoder and the
shared decoder, with the frozen extractor output and the semantic-ID table kept as
buffers so a checkpoint is self-contained.
"""

import hashlib
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np
import torch
from torch import nn

from ..config_loader import ExperimentConfig
from ..logger import model_logger as logger
from ..textembed import TextProjector
from .encoders import IdEncoder, LanguageEncoder, SequenceEncoder, ViewEncoding
from .ssg_decoder import SharedDecoder


class GenPlugin(nn.Module):
    def __init__(
        self,
        n_items: int,
        d_ext: int,
        vocab_sizes: Sequence[int],
        max_len: int,
        n_layers: int = 2,
        n_heads: int = 4,
        head_dim: int = 16,
        ffn_dim: int = 128,
        token_dim: int = 32,
        dropout: float = 0.1,
        dual_view: bool = True,
    ):
        super().__init__()
        self.init_args: Dict[str, Any] = dict(
            n_items=n_items, d_ext=d_ext, vocab_sizes=list(vocab_sizes), max_len=max_len,
            n_layers=n_layers, n_heads=n_heads, head_dim=head_dim, ffn_dim=ffn_dim,
            token_dim=token_dim, dropout=dropout, dual_view=dual_view,
        )
        d = n_heads * head_dim
        self.d_model = d
        self.levels = len(vocab_sizes)
        self.dual_view = dual_view
        self._encoders_frozen = False

        self.register_buffer("text_embeddings", torch.zeros(n_items, d_ext))
        self.register_buffer("codes", torch.zeros(n_items, self.levels, dtype=torch.long))

        if dual_view:
            self.language = LanguageEncoder(
                TextProjector(d_ext, d),
                SequenceEncoder(d, n_heads, n_layers, ffn_dim, max_len, dropout),
            )
        else:
            self.language = None
        self.id_view = IdEncoder(
            vocab_sizes, token_dim, d,
            SequenceEncoder(d, n_heads, n_layers, ffn_dim, max_len * self.levels, dropout),
        )
        self.decoder = SharedDecoder(vocab_sizes, d, n_heads, n_layers, ffn_dim, token_dim, dropout)

    @classmethod
    def from_config(cls, cfg: ExperimentConfig, text_embeddings: np.ndarray, codes: np.ndarray,
                    vocab_sizes: Sequence[int]) -> "GenPlugin":
        m = cfg.model
        model = cls(
            n_items=codes.shape[0],
            d_ext=text_embeddings.shape[1],
            vocab_sizes=vocab_sizes,
            max_len=cfg.data.max_len,
            n_layers=m.n_layers,
            n_heads=m.n_heads,
            head_dim=m.head_dim,
            ffn_dim=m.ffn_dim,
            token_dim=m.token_dim,
            dropout=m.dropout,
            dual_view=cfg.plugin.dual_view,
        )
        model.text_embeddings.copy_(torch.as_tensor(text_embeddings, dtype=torch.float32))
        model.codes.copy_(torch.as_tensor(codes, dtype=torch.long))
        n_params = sum(p.numel() for p in model.parameters())
        logger.info(f"GenPlugin d={model.d_model} levels={model.levels} dual_view={model.dual_view} params={n_params}")
        return model

    @classmethod
    def from_checkpoint(cls, path: Path) -> "GenPlugin":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        model = cls(**payload["model_args"])
        model.load_state_dict(payload["state_dict"])
        return model

    # -- views ---------------------------------------------------------------

    def encode_language(self, items: torch.Tensor) -> ViewEncoding:
        if self.language is None:
            raise ValueError("language view is disabled for this model")
        return self.language(self.text_embeddings, items)

    def encode_id(self, items: torch.Tensor) -> ViewEncoding:
        return self.id_view(self.codes, items)

    def target_codes(self, targets: torch.Tensor) -> torch.Tensor:
        return self.codes[targets]

    # -- freezing ------------------------------------------------------------

    def encoder_modules(self):
        mods = [self.id_view]
        if self.language is not None:
            mods.insert(0, self.language)
        return mods

    def freeze_encoders(self) -> None:
        for mod in self.encoder_modules():
            mod.requires_grad_(False)
            mod.eval()
        self._encoders_frozen = True

    def train(self, mode: bool = True):
        super().train(mode)
        if self._encoders_frozen:
            for mod in self.encoder_modules():
                mod.eval()
        return self

    def encoder_checksum(self) -> str:
        return parameter_checksum(*self.encoder_modules())


def parameter_checksum(*modules: nn.Module) -> str:
    h = hashlib.sha1()
    for mod in modules:
        for name, tensor in sorted(mod.state_dict().items()):
            h.update(name.encode("utf-8"))
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: GenPlugin, path: Path, config_hash: str, stage: str,
                    extra: Optional[Dict[str, Any]] = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "state_dict": model.state_dict(),
        "config_hash": config_hash,
        "stage": stage,
        "encoder_hash": model.encoder_checksum(),
        "model_args": model.init_args,
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)
    logger.info(f"Saved {stage} checkpoint to {path}")
