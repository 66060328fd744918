"""
Frozen item text embeddings and the trainable projection into model space.

Two extractors:
  hash  - seeded random projection of token-count vectors (offline, reproducible)
  file  - precomputed vectors supplied by the user, already pooled per item,
          JSON-lines {"item": id, "vector": [...]}
"""

import hashlib
import re
from collections import Counter
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import orjson
import torch
from torch import nn

from .corpus import ItemMeta
from .errors import CorpusError
from .logger import model_logger as logger

_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> List[str]:
    """Lowercase, split on non-alphanumerics, no stemming."""
    return _TOKEN.findall(text.lower())


def _token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    digest = int(hashlib.sha1(token.encode("utf-8")).hexdigest()[:16], 16)
    return np.random.default_rng([seed, digest]).standard_normal(dim)


def hash_embed(texts: Sequence[str], dim: int, seed: int) -> np.ndarray:
    out = np.zeros((len(texts), dim), dtype=np.float64)
    columns: Dict[str, np.ndarray] = {}
    for row, text in enumerate(texts):
        for token, count in Counter(tokenize(text)).items():
            if token not in columns:
                columns[token] = _token_vector(token, dim, seed)
            out[row] += count * columns[token]
        norm = np.linalg.norm(out[row])
        if norm > 0:
            out[row] /= norm
    return out.astype(np.float32)


def load_vector_file(path: Path, item_ids: Sequence[str]) -> np.ndarray:
    vectors: Dict[str, List[float]] = {}
    with open(path, "rb") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = orjson.loads(line)
                vectors[str(row["item"])] = row["vector"]
            except (orjson.JSONDecodeError, KeyError, TypeError) as e:
                raise CorpusError(f"{path}: line {lineno}: malformed vector record ({e})") from e
    missing = [i for i in item_ids if i not in vectors]
    if missing:
        raise CorpusError(f"{path}: no vector for items {missing[:20]}{' ...' if len(missing) > 20 else ''}")
    matrix = np.asarray([vectors[i] for i in item_ids], dtype=np.float32)
    if not np.isfinite(matrix).all():
        raise CorpusError(f"{path}: non-finite vector entries")
    return matrix


def corpus_hash(items: Sequence[ItemMeta]) -> str:
    h = hashlib.sha1()
    for m in items:
        h.update(orjson.dumps([m.item_id, m.title, m.description]))
    return h.hexdigest()


def _cache_paths(cache_dir: Path, key: str):
    return cache_dir / f"{key}.json", cache_dir / f"{key}.f32"


def write_embedding_cache(cache_dir: Path, key: str, header: Dict, matrix: np.ndarray) -> None:
    cache_dir.mkdir(parents=True, exist_ok=True)
    head_path, data_path = _cache_paths(cache_dir, key)
    np.ascontiguousarray(matrix, dtype=np.float32).tofile(data_path)
    head_path.write_bytes(orjson.dumps(header, option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2))


def read_embedding_cache(cache_dir: Path, key: str, expected: Dict) -> Optional[np.ndarray]:
    head_path, data_path = _cache_paths(cache_dir, key)
    if not head_path.exists() or not data_path.exists():
        return None
    header = orjson.loads(head_path.read_bytes())
    if any(header.get(k) != v for k, v in expected.items()):
        return None
    matrix = np.fromfile(data_path, dtype=np.float32)
    return matrix.reshape(header["n_items"], header["D_ext"])


def extract(
    items: Sequence[ItemMeta],
    extractor: str = "hash",
    *,
    dim: int = 256,
    seed: int = 0,
    vector_file: Optional[Path] = None,
    cache_dir: Optional[Path] = None,
) -> np.ndarray:
    """One frozen vector per item, row order = item index. Cached by (extractor, corpus hash)."""
    chash = corpus_hash(items)
    if extractor == "hash":
        variant = f"hash-d{dim}-s{seed}"
    elif extractor == "file":
        if vector_file is None:
            raise ValueError("file extractor needs vector_file")
        vector_file = Path(vector_file)
        variant = "file-" + hashlib.sha1(vector_file.read_bytes()).hexdigest()[:12]
    else:
        raise ValueError(f"Unknown extractor: {extractor}")

    key = f"{variant}-{chash[:16]}"
    expected = {"extractor": variant, "corpus_hash": chash, "n_items": len(items)}
    if cache_dir is not None:
        cached = read_embedding_cache(Path(cache_dir), key, expected)
        if cached is not None:
            logger.info(f"Embedding cache hit: {key}")
            return cached

    if extractor == "hash":
        matrix = hash_embed([m.text for m in items], dim, seed)
    else:
        matrix = load_vector_file(vector_file, [m.item_id for m in items])

    if cache_dir is not None:
        header = dict(expected, D_ext=int(matrix.shape[1]))
        write_embedding_cache(Path(cache_dir), key, header, matrix)
        logger.info(f"Wrote embedding cache {key} ({matrix.shape[0]} x {matrix.shape[1]})")
    return matrix


class TextProjector(nn.Module):
    """Two affine layers with a rectifier between: e -> W2 relu(W1 e + b1) + b2."""

    def __init__(self, d_ext: int, d_model: int, hidden: Optional[int] = None, activation: bool = True):
        super().__init__()
        hidden = hidden or d_model
        self.fc1 = nn.Linear(d_ext, hidden)
        self.fc2 = nn.Linear(hidden, d_model)
        self.act = nn.ReLU() if activation else nn.Identity()

    @property
    def d_ext(self) -> int:
        return self.fc1.in_features

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        if e.shape[-1] != self.d_ext:
            raise ValueError(f"embedding dimension {e.shape[-1]} != projector input {self.d_ext}")
        # extractor output is a constant
        return self.fc2(self.act(self.fc1(e.detach())))


def project(e: torch.Tensor, projector: TextProjector) -> torch.Tensor:
    return projector(e)
