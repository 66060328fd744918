"""
Cached ID-view preference vectors q_u, valid only for the frozen encoder that produced them.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np
import orjson
import torch

from ..errors import StaleCacheError
from ..logger import retrieval_logger as logger
from ..model.encoders import pad_histories


@dataclass
class PreferenceCache:
    vectors: np.ndarray  # (n_users, d) float32
    checkpoint_hash: str
    user_ids: List[str]

    @property
    def d(self) -> int:
        return int(self.vectors.shape[1])

    def save(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        np.ascontiguousarray(self.vectors, dtype=np.float32).tofile(out_dir / "preference_cache.f32")
        header = {
            "checkpoint_hash": self.checkpoint_hash,
            "d": self.d,
            "n_users": len(self.user_ids),
            "users": self.user_ids,
        }
        (out_dir / "preference_cache.json").write_bytes(orjson.dumps(header, option=orjson.OPT_INDENT_2))

    @classmethod
    def load(cls, out_dir: Path, expected_hash: str) -> "PreferenceCache":
        header = orjson.loads((out_dir / "preference_cache.json").read_bytes())
        if header["checkpoint_hash"] != expected_hash:
            raise StaleCacheError(expected_hash, header["checkpoint_hash"])
        vectors = np.fromfile(out_dir / "preference_cache.f32", dtype=np.float32)
        return cls(vectors.reshape(header["n_users"], header["d"]), header["checkpoint_hash"], header["users"])

    def check(self, expected_hash: str) -> None:
        if self.checkpoint_hash != expected_hash:
            raise StaleCacheError(expected_hash, self.checkpoint_hash)


@torch.no_grad()
def encode_preferences(model, histories: Sequence[Sequence[int]], max_len: int,
                       batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    for start in range(0, len(histories), batch_size):
        items = pad_histories(histories[start:start + batch_size], max_len)
        out.append(model.encode_id(items).pooled.cpu().numpy())
    model.train(was_training)
    return np.concatenate(out, axis=0).astype(np.float32)


def build_cache(model, user_ids: Sequence[str], histories: Sequence[Sequence[int]],
                max_len: int) -> PreferenceCache:
    """One pooled ID-view vector per user over its train history, stamped with the encoder hash."""
    vectors = encode_preferences(model, histories, max_len)
    logger.info(f"Cached {len(user_ids)} preference vectors (d={vectors.shape[1]})")
    return PreferenceCache(vectors, model.encoder_checksum(), list(user_ids))
