"""
Interaction corpus: ingestion, k-core filtering, leave-one-out splits,
head/tail partition, pseudo-documents and a seeded synthetic generator.

Everything here is a pure function of its inputs (and seed).
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Tuple

import numpy as np
import orjson

from .errors import CorpusError
from .logger import data_logger as logger

@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int

@dataclass(frozen=True)
class ItemMeta:
    item_id: str
    title: str
    description: str = ""

    @property
    def text(self) -> str:
        return " ".join(part for part in (self.title.strip(), self.description.strip()) if part)

@dataclass
class Corpus:
    """Interactions grouped per user, items mapped to dense internal indices."""

    item_ids: List[str]
    meta: List[ItemMeta]
    user_ids: List[str]
    sequences: List[List[int]]

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    def item_counts(self) -> np.ndarray:
        counts = np.zeros(self.n_items, dtype=np.int64)
        for seq in self.sequences:
            np.add.at(counts, seq, 1)
        return counts

    def to_json(self) -> bytes:
        return orjson.dumps({
            "items": [[m.item_id, m.title, m.description] for m in self.meta],
            "users": self.user_ids,
            "sequences": self.sequences,
        })

    @classmethod
    def from_json(cls, raw: bytes) -> "Corpus":
        data = orjson.loads(raw)
        meta = [ItemMeta(i, t, d) for i, t, d in data["items"]]
        return cls(
            item_ids=[m.item_id for m in meta],
            meta=meta,
            user_ids=list(data["users"]),
            sequences=[list(s) for s in data["sequences"]],
        )

@dataclass
class FilterReport:
    removed_users: List[str] = field(default_factory=list)
    removed_items: List[str] = field(default_factory=list)
    rounds: int = 0

@dataclass
class UserSplit:
    user_id: str
    train: List[int]
    valid: int
    test: int

@dataclass
class SplitDataset:
    item_ids: List[str]
    meta: List[ItemMeta]
    users: List[UserSplit]
    popularity: np.ndarray
    head: frozenset
    tail: frozenset
    popularity_mode: str = "train"

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_users(self) -> int:
        return len(self.users)

    def manifest(self) -> Dict:
        return {
            "popularity_mode": self.popularity_mode,
            "users": {
                u.user_id: {
                    "train": [self.item_ids[i] for i in u.train],
                    "valid": [self.item_ids[u.valid]],
                    "test": [self.item_ids[u.test]],
                }
                for u in self.users
            },
            "head": [self.item_ids[i] for i in sorted(self.head)],
            "tail": [self.item_ids[i] for i in sorted(self.tail)],
        }

# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def _read_jsonl(path: Path, fields: Tuple[str, ...]) -> List[Dict]:
    rows = []
    with open(path, "rb") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = orjson.loads(line)
            except orjson.JSONDecodeError as e:
                raise CorpusError(f"{path}: line {lineno}: malformed record ({e})") from e
            if not isinstance(row, dict):
                raise CorpusError(f"{path}: line {lineno}: expected an object")
            missing = [k for k in fields if k not in row]
            if missing:
                raise CorpusError(f"{path}: line {lineno}: missing field(s) {missing}")
            row["_line"] = lineno
            rows.append(row)
    return rows

def ingest(interaction_file: Path, meta_file: Path) -> Corpus:
    """Load JSON-lines interactions {user,item,ts} and metadata {item,title,description}."""
    interaction_file, meta_file = Path(interaction_file), Path(meta_file)
    for p in (interaction_file, meta_file):
        if not p.exists():
            raise FileNotFoundError(f"{p} does not exist")

    meta: Dict[str, ItemMeta] = {}
    for row in _read_jsonl(meta_file, ("item", "title")):
        item, title = str(row["item"]), row["title"]
        if not isinstance(title, str) or not title.strip():
            raise CorpusError(f"{meta_file}: line {row['_line']}: empty title for item {item}")
        if item in meta:
            raise CorpusError(f"{meta_file}: line {row['_line']}: duplicate item {item}")
        meta[item] = ItemMeta(item, title, str(row.get("description") or ""))

    per_user: Dict[str, List[Interaction]] = {}
    for row in _read_jsonl(interaction_file, ("user", "item", "ts")):
        ts = row["ts"]
        if not isinstance(ts, int) or isinstance(ts, bool):
            raise CorpusError(f"{interaction_file}: line {row['_line']}: ts must be an integer")
        inter = Interaction(str(row["user"]), str(row["item"]), ts)
        per_user.setdefault(inter.user_id, []).append(inter)

    referenced = {i.item_id for seq in per_user.values() for i in seq}
    missing = sorted(referenced - meta.keys())
    if missing:
        raise CorpusError(f"items without metadata: {missing}")

    item_index: Dict[str, int] = {}
    user_ids, sequences = [], []
    for uid, inters in per_user.items():
        # stable sort: timestamp ties keep input order
        inters = sorted(inters, key=lambda x: x.timestamp)
        seq = []
        for inter in inters:
            if inter.item_id not in item_index:
                item_index[inter.item_id] = len(item_index)
            seq.append(item_index[inter.item_id])
        user_ids.append(uid)
        sequences.append(seq)

    item_ids = list(item_index)
    logger.info(f"Ingested {len(user_ids)} users, {len(item_ids)} items from {interaction_file}")
    return Corpus(item_ids, [meta[i] for i in item_ids], user_ids, sequences)

# ---------------------------------------------------------------------------
# Filtering and splitting
# ---------------------------------------------------------------------------

def _reindex(corpus: Corpus, keep_users: List[int], keep_items: np.ndarray) -> Corpus:
    new_index = -np.ones(corpus.n_items, dtype=np.int64)
    kept = np.flatnonzero(keep_items)
    new_index[kept] = np.arange(len(kept))
    sequences = []
    for u in keep_users:
        sequences.append([int(new_index[i]) for i in corpus.sequences[u] if new_index[i] >= 0])
    return Corpus(
        item_ids=[corpus.item_ids[i] for i in kept],
        meta=[corpus.meta[i] for i in kept],
        user_ids=[corpus.user_ids[u] for u in keep_users],
        sequences=sequences,
    )

def five_core_filter(corpus: Corpus, min_count: int = 5) -> Tuple[Corpus, FilterReport]:
    """Drop users and items with fewer than min_count interactions until a fixed point."""
    report = FilterReport()
    while True:
        counts = corpus.item_counts()
        keep_items = counts >= min_count
        # a user's surviving length counts only interactions with kept items
        lengths = [sum(1 for i in seq if keep_items[i]) for seq in corpus.sequences]
        keep_users = [u for u, n in enumerate(lengths) if n >= min_count]
        if keep_items.all() and len(keep_users) == corpus.n_users:
            break
        report.rounds += 1
        report.removed_items += [corpus.item_ids[i] for i in np.flatnonzero(~keep_items)]
        kept_user_set = set(keep_users)
        report.removed_users += [uid for u, uid in enumerate(corpus.user_ids) if u not in kept_user_set]
        corpus = _reindex(corpus, keep_users, keep_items)
        if corpus.n_users == 0 or corpus.n_items == 0:
            raise CorpusError("degenerate corpus: nothing survives the k-core filter")

    logger.info(
        f"{min_count}-core filter: removed {len(report.removed_users)} users, "
        f"{len(report.removed_items)} items in {report.rounds} rounds"
    )
    return corpus, report

def _partition_items(popularity: np.ndarray, head_ratio: float) -> Tuple[frozenset, frozenset]:
    n_head = int(round(head_ratio * len(popularity)))
    # descending popularity, ties to the lower item index
    order = np.lexsort((np.arange(len(popularity)), -popularity))
    head = frozenset(int(i) for i in order[:n_head])
    tail = frozenset(int(i) for i in order[n_head:])
    return head, tail

def split_leave_one_out(
    corpus: Corpus,
    m: int,
    popularity_mode: Literal["train", "all"] = "train",
    head_ratio: float = 0.2,
) -> SplitDataset:
    """Truncate to the most recent m items, then last = test, second-to-last = valid."""
    users = []
    for uid, seq in zip(corpus.user_ids, corpus.sequences):
        seq = seq[-m:]
        if len(seq) < 3:
            raise CorpusError(f"user {uid} has {len(seq)} interactions; leave-one-out needs 3")
        users.append(UserSplit(uid, list(seq[:-2]), seq[-2], seq[-1]))

    popularity = np.zeros(corpus.n_items, dtype=np.int64)
    for u in users:
        np.add.at(popularity, u.train, 1)
        if popularity_mode == "all":
            popularity[u.valid] += 1
            popularity[u.test] += 1
    head, tail = _partition_items(popularity, head_ratio)
    return SplitDataset(corpus.item_ids, corpus.meta, users, popularity, head, tail, popularity_mode)

def head_tail_partition(split: SplitDataset) -> Tuple[frozenset, frozenset, Dict[str, List[int]]]:
    """Head/tail items plus user groups keyed by whether the TEST target is head or tail."""
    groups: Dict[str, List[int]] = {"head": [], "tail": []}
    for u, us in enumerate(split.users):
        groups["head" if us.test in split.head else "tail"].append(u)
    return split.head, split.tail, groups

def build_pseudo_documents(split: SplitDataset) -> Dict[str, str]:
    """One document per user: train-item texts in chronological order, space-joined."""
    docs = {}
    for us in split.users:
        docs[us.user_id] = " ".join(t for t in (split.meta[i].text for i in us.train) if t)
    return docs

# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

_THEMES = [
    "lipstick gloss matte blush serum palette mascara glow velvet rose primer liner",
    "tent stove lantern trail compass hammock canteen sleeping rope summit ridge camp",
    "skillet whisk kettle blender ladle spatula oven pan knife spice grater dough",
    "guitar amp pedal string drum cymbal chord tuner pick bass reverb stage",
    "puzzle robot blocks plush racer doll kite marble yoyo bricks train puppet",
    "racket sneaker jersey dumbbell yoga bottle helmet glove treadmill sprint swim goal",
    "canvas brush easel acrylic charcoal sketch pastel ink palette knife gesso frame",
    "shovel seed hose planter trowel mulch rake pruner compost tulip fern lawn",
]

def _theme_vocab(cluster: int) -> List[str]:
    if cluster < len(_THEMES):
        return _THEMES[cluster].split()
    return [f"theme{cluster}w{j}" for j in range(12)]

def synth_generate(
    n_users: int,
    n_items: int,
    n_clusters: int,
    skew: float,
    seed: int,
    min_history: int = 8,
    max_history: int = 20,
    in_cluster: float = 0.85,
    follow: float = 0.5,
) -> Corpus:
    """
    Seeded planted-cluster corpus. Users and items belong to latent clusters; item texts draw
    from the cluster's theme vocabulary; item popularity follows a power law with exponent skew.
    A user's next item is, with probability follow, the next item of the same cluster (a
    sequential signal), otherwise drawn from the user's cluster (prob in_cluster) or globally.
    """
    if n_clusters < 1 or n_users < n_clusters or n_items < n_clusters:
        raise CorpusError(
            f"infeasible sizes: n_users={n_users}, n_items={n_items}, n_clusters={n_clusters}"
        )
    if skew < 0:
        raise CorpusError("skew must be >= 0")
    if min_history < 1 or max_history < min_history:
        raise CorpusError("history length range is empty")
    rng = np.random.default_rng(seed)

    item_cluster = rng.permutation(np.arange(n_items) % n_clusters)
    user_cluster = rng.permutation(np.arange(n_users) % n_clusters)
    rank = rng.permutation(n_items)
    weight = 1.0 / np.power(rank + 1.0, skew)

    members = [np.flatnonzero(item_cluster == c) for c in range(n_clusters)]
    successor = np.empty(n_items, dtype=np.int64)
    for mem in members:
        successor[mem] = np.roll(mem, -1)
    global_p = weight / weight.sum()
    cluster_p = [weight[mem] / weight[mem].sum() for mem in members]

    meta = []
    for i in range(n_items):
        vocab = _theme_vocab(int(item_cluster[i]))
        title = " ".join(rng.choice(vocab, size=3, replace=False))
        desc = " ".join(rng.choice(vocab, size=6, replace=True))
        meta.append(ItemMeta(f"i{i:05d}", title, desc))

    sequences = []
    for u in range(n_users):
        c = int(user_cluster[u])
        length = int(rng.integers(min_history, max_history + 1))
        seq: List[int] = []
        for _ in range(length):
            r = rng.random()
            if seq and r < follow:
                seq.append(int(successor[seq[-1]]))
            elif rng.random() < in_cluster:
                seq.append(int(rng.choice(members[c], p=cluster_p[c])))
            else:
                seq.append(int(rng.choice(n_items, p=global_p)))
        sequences.append(seq)

    logger.info(
        f"Synthesised {n_users} users x {n_items} items in {n_clusters} clusters (skew={skew})"
    )
    return Corpus(
        item_ids=[m.item_id for m in meta],
        meta=meta,
        user_ids=[f"u{u:05d}" for u in range(n_users)],
        sequences=sequences,
    )

def synth_interaction_rows(corpus: Corpus, base_ts: int = 1_600_000_000) -> List[Dict]:
    """Flatten a corpus into {user,item,ts} records (one day between interactions)."""
    rows = []
    for uid, seq in zip(corpus.user_ids, corpus.sequences):
        for t, i in enumerate(seq):
            rows.append({"user": uid, "item": corpus.item_ids[i], "ts": base_ts + 86_400 * t})
    return rows
