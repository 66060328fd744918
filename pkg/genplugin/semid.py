"""
Semantic IDs: residual k-means codebooks, collision-free token tuples and the
prefix trie used for constrained generation.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import orjson
from sklearn.cluster import KMeans

from .logger import model_logger as logger


@dataclass
class Codebooks:
    centroids: List[np.ndarray]
    errors: List[float]

    @property
    def levels(self) -> int:
        return len(self.centroids)

    @property
    def sizes(self) -> List[int]:
        return [c.shape[0] for c in self.centroids]

    def save(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        for r, c in enumerate(self.centroids):
            np.save(out_dir / f"codebook_level{r}.npy", c)
        (out_dir / "codebook_errors.json").write_bytes(orjson.dumps(self.errors))

    @classmethod
    def load(cls, out_dir: Path) -> "Codebooks":
        errors = orjson.loads((out_dir / "codebook_errors.json").read_bytes())
        centroids = [np.load(out_dir / f"codebook_level{r}.npy") for r in range(len(errors))]
        return cls(centroids, errors)


def _nearest(residual: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (
        (residual * residual).sum(axis=1, keepdims=True)
        - 2.0 * residual @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    return d.argmin(axis=1)


def _reseed_empty(residual: np.ndarray, centroids: np.ndarray, V: int, level: int) -> np.ndarray:
    """
    Pad the codebook to V centroids and move every centroid that owns no point onto the
    worst-quantized point, one at a time, until none is empty or every point is exact.
    """
    c = np.asarray(centroids, dtype=np.float64)
    if len(c) < V:
        c = np.vstack([c, np.repeat(c[:1], V - len(c), axis=0)])
    for _ in range(V):
        idx = _nearest(residual, c)
        empty = np.flatnonzero(np.bincount(idx, minlength=V) == 0)
        if empty.size == 0:
            return c
        err = ((residual - c[idx]) ** 2).sum(axis=1)
        if err.max() <= 0.0:
            break
        c[empty[0]] = residual[err.argmax()]
    idx = _nearest(residual, c)
    unused = int((np.bincount(idx, minlength=V) == 0).sum())
    if unused:
        logger.warning(f"Codebook level {level}: {unused} of {V} codes unused (too few distinct residuals)")
    return c


def fit_codebooks(embeddings: np.ndarray, k: int, V: int, seed: int, n_init: int = 10) -> Codebooks:
    """Level r is k-means on the residual left by levels 1..r-1."""
    x = np.asarray(embeddings, dtype=np.float64)
    n = x.shape[0]
    if V > n:
        raise ValueError(f"codebook size {V} exceeds number of items {n}")
    if k < 1:
        raise ValueError("need at least one level")

    residual = x.copy()
    centroids, errors = [], []
    for r in range(k):
        # k-means cannot place more centroids than there are distinct residuals
        distinct = np.unique(residual, axis=0).shape[0]
        km = KMeans(n_clusters=min(V, distinct), n_init=n_init, random_state=(seed + r) % 2**32)
        km.fit(residual)
        c = _reseed_empty(residual, km.cluster_centers_, V, r)
        idx = _nearest(residual, c)
        residual = residual - c[idx]
        centroids.append(c)
        errors.append(float((residual * residual).sum(axis=1).mean()))
        logger.info(f"Codebook level {r}: V={V}, quantization error {errors[-1]:.6f}")
    return Codebooks(centroids, errors)


class IdTrie:
    """Prefix trie over all assigned token tuples; leaves map to item indices."""

    def __init__(self):
        self.root: Dict = {}
        self._size = 0
        self.depth = 0

    def insert(self, tokens: Sequence[int], item: int) -> None:
        node = self.root
        for t in tokens[:-1]:
            node = node.setdefault(int(t), {})
        last = int(tokens[-1])
        if last in node:
            raise ValueError(f"duplicate semantic id {tuple(tokens)}")
        node[last] = item
        self._size += 1
        self.depth = len(tokens)

    def _node(self, prefix: Sequence[int]):
        node = self.root
        for t in prefix:
            if not isinstance(node, dict):
                return None
            node = node.get(int(t))
            if node is None:
                return None
        return node

    def allowed(self, prefix: Sequence[int]) -> List[int]:
        """Valid next tokens after prefix, ascending."""
        node = self._node(prefix)
        if not isinstance(node, dict):
            return []
        return sorted(node)

    def lookup(self, tokens: Sequence[int]) -> Optional[int]:
        if len(tokens) != self.depth:
            return None
        node = self._node(tokens)
        return node if isinstance(node, int) else None

    def __contains__(self, tokens) -> bool:
        return self.lookup(tuple(tokens)) is not None

    def __len__(self) -> int:
        return self._size

    def __iter__(self) -> Iterator[Tuple[Tuple[int, ...], int]]:
        stack = [((), self.root)]
        while stack:
            prefix, node = stack.pop()
            for t in sorted(node, reverse=True):
                child = node[t]
                if isinstance(child, dict):
                    stack.append((prefix + (t,), child))
                else:
                    yield prefix + (t,), child


@dataclass
class SemanticIds:
    codes: np.ndarray  # (n_items, levels) int64, last column is the disambiguation token if any
    vocab_sizes: List[int]
    trie: IdTrie = field(repr=False)
    disambiguated: bool = False

    @property
    def levels(self) -> int:
        return self.codes.shape[1]

    @property
    def n_items(self) -> int:
        return self.codes.shape[0]

    def manifest(self, item_ids: Sequence[str]) -> Dict:
        return {
            "vocab_sizes": self.vocab_sizes,
            "disambiguated": self.disambiguated,
            "ids": {item_ids[i]: [int(t) for t in self.codes[i]] for i in range(self.n_items)},
        }

    @classmethod
    def from_manifest(cls, manifest: Dict, item_ids: Sequence[str]) -> "SemanticIds":
        codes = np.asarray([manifest["ids"][i] for i in item_ids], dtype=np.int64)
        return cls(codes, list(manifest["vocab_sizes"]), build_trie(codes), manifest["disambiguated"])


def build_trie(codes: np.ndarray) -> IdTrie:
    trie = IdTrie()
    for item, tokens in enumerate(codes):
        trie.insert([int(t) for t in tokens], item)
    return trie


def assign_ids(codebooks: Codebooks, embeddings: np.ndarray) -> SemanticIds:
    """Nearest centroid per level on residuals; colliding tuples get a counter token."""
    residual = np.asarray(embeddings, dtype=np.float64).copy()
    columns = []
    for c in codebooks.centroids:
        idx = _nearest(residual, c)
        residual = residual - c[idx]
        columns.append(idx)
    codes = np.stack(columns, axis=1).astype(np.int64)
    vocab_sizes = list(codebooks.sizes)

    groups: Dict[Tuple[int, ...], List[int]] = {}
    for item, row in enumerate(codes):
        groups.setdefault(tuple(int(t) for t in row), []).append(item)
    largest = max(len(g) for g in groups.values())

    disambiguated = largest > 1
    if disambiguated:
        counter = np.zeros(len(codes), dtype=np.int64)
        for members in groups.values():
            for j, item in enumerate(sorted(members)):
                counter[item] = j
        codes = np.concatenate([codes, counter[:, None]], axis=1)
        vocab_sizes.append(largest)
        n_coll = sum(1 for g in groups.values() if len(g) > 1)
        logger.info(f"{n_coll} colliding id groups; appended disambiguation level (size {largest})")

    return SemanticIds(codes, vocab_sizes, build_trie(codes), disambiguated)
