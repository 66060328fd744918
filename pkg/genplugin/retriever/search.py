from dataclasses import asdict, dataclass
from itertools import zip_longest
from pathlib import Path
from typing import List, Sequence

import numpy as np
import orjson

from ..logger import retrieval_logger as logger
from .bm25 import Bm25Index, bm25_search
from .collab import collab_search

MODES = ("sim", "content", "collab", "dual", "dual_rerank")


@dataclass
class RetrievalContext:
    user: int
    content: List[int]
    collab: List[int]
    retrieved: List[int]


def _cosine(vectors: np.ndarray, target: np.ndarray, candidates: Sequence[int]) -> np.ndarray:
    c = vectors[list(candidates)].astype(np.float64)
    t = target.astype(np.float64)
    denom = np.linalg.norm(c, axis=1) * np.linalg.norm(t)
    return (c @ t) / np.where(denom > 0, denom, 1.0)


def rerank(content: Sequence[int], collab: Sequence[int], q_target: np.ndarray,
           vectors: np.ndarray, v: int) -> List[int]:
    """
    Users found by both paths are always kept; the remaining slots of v go to the
    highest cosine(q_target, q_candidate) in the union. Output is sorted by score, ties by index.
    """
    union = list(dict.fromkeys(list(content) + list(collab)))
    if not union:
        return []
    if v > len(union):
        logger.warning(f"v={v} exceeds the {len(union)} retrieved candidates; keeping all")
    in_collab = set(collab)
    forced = [u for u in dict.fromkeys(content) if u in in_collab]
    forced_set = set(forced)

    scores = dict(zip(union, _cosine(vectors, q_target, union)))
    rest = sorted((u for u in union if u not in forced_set), key=lambda u: (-scores[u], u))
    chosen = forced + rest[:max(0, v - len(forced))]
    return sorted(chosen, key=lambda u: (-scores[u], u))


def _alternate(a: Sequence[int], b: Sequence[int]) -> List[int]:
    out = []
    for x, y in zip_longest(a, b):
        if x is not None:
            out.append(x)
        if y is not None:
            out.append(y)
    return out


def select(mode: str, target: int, content: Sequence[int], collab: Sequence[int],
           vectors: np.ndarray, v: int) -> List[int]:
    if mode == "content":
        return list(content[:v])
    if mode == "collab":
        return list(collab[:v])
    if mode == "dual":
        both = [u for u in content if u in set(collab)]
        return list(dict.fromkeys(both + _alternate(content, collab)))[:max(v, len(both))]
    if mode == "dual_rerank":
        return rerank(content, collab, vectors[target], vectors, v)
    if mode == "sim":
        candidates = [u for u in range(len(vectors)) if u != target]
        if not candidates:
            return []
        sims = _cosine(vectors, vectors[target], candidates)
        order = np.lexsort((np.asarray(candidates), -sims))
        return [int(candidates[i]) for i in order[:v]]
    raise ValueError(f"Unknown retrieval mode: {mode}")


def build_contexts(mode: str, index: Bm25Index, profiles: np.ndarray, vectors: np.ndarray,
                   z: int, v: int) -> List[RetrievalContext]:
    """Per-user retrieval over train-split signals only."""
    if mode not in MODES:
        raise ValueError(f"Unknown retrieval mode: {mode}")
    contexts = []
    for u in range(len(index.user_ids)):
        content = bm25_search(index, u, z) if mode != "sim" else []
        collab = collab_search(profiles, u, z) if mode != "sim" else []
        retrieved = select(mode, u, content, collab, vectors, v) if v > 0 else []
        contexts.append(RetrievalContext(u, content, collab, retrieved))
    sizes = [len(c.retrieved) for c in contexts]
    logger.info(f"Retrieval mode={mode}: {len(contexts)} users, mean {np.mean(sizes) if sizes else 0:.2f} retrieved")
    return contexts


def save_contexts(contexts: Sequence[RetrievalContext], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(orjson.dumps(asdict(c)) + b"\n" for c in contexts))


def load_contexts(path: Path) -> List[RetrievalContext]:
    out = []
    for line in path.read_bytes().splitlines():
        if line.strip():
            out.append(RetrievalContext(**orjson.loads(line)))
    return out
