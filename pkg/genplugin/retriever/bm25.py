"""
Lexical user retrieval: BM25 over per-user pseudo-documents (train split only).
"""

import math
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import orjson
from rank_bm25 import BM25Okapi

from ..logger import retrieval_logger as logger
from ..textembed import tokenize


class PlusOneBM25(BM25Okapi):
    """BM25Okapi with idf = log((N - df + 0.5) / (df + 0.5) + 1), never negative."""

    def _calc_idf(self, nd):
        for word, freq in nd.items():
            self.idf[word] = math.log((self.corpus_size - freq + 0.5) / (freq + 0.5) + 1.0)


class Bm25Index:
    def __init__(self, user_ids: Sequence[str], documents: Sequence[Sequence[str]],
                 k1: float = 1.2, b: float = 0.75):
        if len(user_ids) != len(documents):
            raise ValueError("one document per user")
        self.user_ids = list(user_ids)
        self.documents = [list(d) for d in documents]
        self.k1, self.b = k1, b
        self.scorer = PlusOneBM25(self.documents, k1=k1, b=b)

    @classmethod
    def from_texts(cls, docs: Dict[str, str], k1: float = 1.2, b: float = 0.75) -> "Bm25Index":
        user_ids = list(docs)
        return cls(user_ids, [tokenize(docs[u]) for u in user_ids], k1, b)

    def scores(self, query: Sequence[str]) -> np.ndarray:
        return np.asarray(self.scorer.get_scores(list(query)), dtype=np.float64)

    def to_json(self) -> bytes:
        postings: Dict[str, List[List[int]]] = {}
        for doc, tokens in enumerate(self.documents):
            counts: Dict[str, int] = {}
            for t in tokens:
                counts[t] = counts.get(t, 0) + 1
            for t, tf in counts.items():
                postings.setdefault(t, []).append([doc, tf])
        return orjson.dumps({
            "k1": self.k1,
            "b": self.b,
            "users": self.user_ids,
            "doc_len": [len(d) for d in self.documents],
            "postings": postings,
        }, option=orjson.OPT_SORT_KEYS)

    @classmethod
    def from_json(cls, raw: bytes) -> "Bm25Index":
        data = orjson.loads(raw)
        documents: List[List[str]] = [[] for _ in data["users"]]
        for term in sorted(data["postings"]):
            for doc, tf in data["postings"][term]:
                documents[doc].extend([term] * tf)
        return cls(data["users"], documents, data["k1"], data["b"])

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_json())

    @classmethod
    def load(cls, path: Path) -> "Bm25Index":
        return cls.from_json(path.read_bytes())


def bm25_search(index: Bm25Index, target: int, z: int) -> List[int]:
    """
    Top-z users by BM25 score of the target's own document; the target is excluded.
    Each distinct query term is scored once.
    """
    query = list(dict.fromkeys(index.documents[target]))
    if not query:
        logger.warning(f"empty pseudo-document for user {index.user_ids[target]}; no content neighbours")
        return []
    scores = index.scores(query)
    candidates = np.array([u for u in range(len(scores)) if u != target], dtype=np.int64)
    if len(candidates) == 0:
        return []
    order = np.lexsort((candidates, -scores[candidates]))
    return [int(u) for u in candidates[order][:z]]
