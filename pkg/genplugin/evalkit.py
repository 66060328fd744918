"""
Leave-one-out ranking metrics, head/tail and popularity-bin breakdowns, and the
teacher-forced vs free-running exposure probe.
"""

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import orjson
import torch

from .corpus import SplitDataset, head_tail_partition
from .logger import eval_logger as logger
from .model.ssg_decoder import greedy_decode
from .trainer import build_examples, id_memory, iter_batches

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    HAS_MATPLOTLIB = True
except ImportError:
    HAS_MATPLOTLIB = False


def _check_k(k: int) -> None:
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")


def hit_at_k(ranked: Sequence[int], target: int, k: int) -> int:
    _check_k(k)
    return int(target in list(ranked)[:k])


def ndcg_at_k(ranked: Sequence[int], target: int, k: int) -> float:
    """Binary gain for the single relevant target: 1 / log2(rank + 1) when rank <= k."""
    _check_k(k)
    top = list(ranked)[:k]
    if target not in top:
        return 0.0
    return 1.0 / math.log2(top.index(target) + 2)


def per_user_metrics(rankings: Sequence[Sequence[int]], targets: Sequence[int],
                     ks: Sequence[int]) -> Dict[str, np.ndarray]:
    if len(rankings) != len(targets):
        raise ValueError("one ranking per target")
    out = {}
    for k in ks:
        out[f"H@{k}"] = np.array([hit_at_k(r, t, k) for r, t in zip(rankings, targets)], dtype=np.float64)
        out[f"N@{k}"] = np.array([ndcg_at_k(r, t, k) for r, t in zip(rankings, targets)], dtype=np.float64)
    return out


def _mean(values: Dict[str, np.ndarray], members: Sequence[int]) -> Optional[Dict[str, float]]:
    if len(members) == 0:
        return None
    idx = np.asarray(members, dtype=np.int64)
    return {name: float(v[idx].mean()) for name, v in values.items()}


@dataclass
class MetricsReport:
    overall: Dict[str, float]
    head: Optional[Dict[str, float]]
    tail: Optional[Dict[str, float]]
    group_sizes: Dict[str, int]
    bin_edges: List[float]
    bins: List[Dict[str, object]] = field(default_factory=list)
    n_users: int = 0

    def to_json(self) -> bytes:
        return orjson.dumps(asdict(self), option=orjson.OPT_INDENT_2)

    def rows(self) -> List[Dict[str, object]]:
        """Flat table: one row per group and per popularity bin; absent groups have empty cells."""
        names = list(self.overall)
        out = [dict(group="overall", n=self.n_users, **self.overall)]
        for g in ("head", "tail"):
            values = getattr(self, g) or {}
            out.append(dict(group=g, n=self.group_sizes[g], **{k: values.get(k, "") for k in names}))
        for b in self.bins:
            values = b["metrics"] or {}
            out.append(dict(group=f"bin{b['bin']}", n=b["n"], **{k: values.get(k, "") for k in names}))
        return out

    def write(self, out_dir: Path, stem: str = "metrics") -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_bytes(self.to_json())
        rows = self.rows()
        with open(out_dir / f"{stem}.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)


def group_report(values: Dict[str, np.ndarray], split: SplitDataset, n_bins: int = 5) -> MetricsReport:
    """
    Users are grouped by the popularity of their test target: head/tail membership and
    equal-width bins over log(1 + popularity).
    """
    n = split.n_users
    _, _, groups = head_tail_partition(split)
    pop = np.log1p(np.array([split.popularity[u.test] for u in split.users], dtype=np.float64))
    lo, hi = (float(pop.min()), float(pop.max())) if n else (0.0, 0.0)
    edges = np.linspace(lo, hi, n_bins + 1)
    which = np.clip(np.searchsorted(edges, pop, side="right") - 1, 0, n_bins - 1)

    bins = []
    for b in range(n_bins):
        members = np.flatnonzero(which == b)
        bins.append({
            "bin": b,
            "lo": float(edges[b]),
            "hi": float(edges[b + 1]),
            "n": int(len(members)),
            "metrics": _mean(values, members),
        })
    report = MetricsReport(
        overall=_mean(values, range(n)) or {},
        head=_mean(values, groups["head"]),
        tail=_mean(values, groups["tail"]),
        group_sizes={g: len(m) for g, m in groups.items()},
        bin_edges=[float(e) for e in edges],
        bins=bins,
        n_users=n,
    )
    for g in ("head", "tail"):
        if getattr(report, g) is None:
            logger.warning(f"no users in the {g} group; its metrics are absent")
    return report


def evaluate_rankings(rankings: Sequence[Sequence[int]], split: SplitDataset,
                      ks: Sequence[int] = (5, 10), n_bins: int = 5) -> MetricsReport:
    targets = [u.test for u in split.users]
    return group_report(per_user_metrics(rankings, targets, ks), split, n_bins)


# ---------------------------------------------------------------------------
# Exposure probe
# ---------------------------------------------------------------------------

@dataclass
class ExposureProbe:
    teacher_forced: List[float]
    free_running: List[float]
    gap: List[float]
    n: int

    def mean_gap(self, from_level: int = 1) -> float:
        rest = self.gap[from_level:]
        return float(np.mean(rest)) if rest else 0.0


@torch.no_grad()
def exposure_probe(model, split: SplitDataset, cfg, part: str = "test") -> ExposureProbe:
    """Per-level argmax token accuracy with ground-truth prefixes vs the model's own prefixes."""
    was_training = model.training
    model.eval()
    L = model.levels
    tf_hits = np.zeros(L)
    fr_hits = np.zeros(L)
    n = 0
    for batch in iter_batches(build_examples(split, part), cfg.train.batch_size, cfg.data.max_len):
        memory, pad = id_memory(model, batch)
        targets = model.target_codes(batch.targets)
        tf_logits = model.decoder.decode_teacher_forced(memory, pad, targets)
        _, fr_tokens = greedy_decode(model.decoder, memory, pad)
        for l in range(L):
            tf_hits[l] += float((tf_logits[l].argmax(-1) == targets[:, l]).sum())
            fr_hits[l] += float((fr_tokens[:, l] == targets[:, l]).sum())
        n += len(batch.targets)
    model.train(was_training)
    tf = (tf_hits / max(n, 1)).tolist()
    fr = (fr_hits / max(n, 1)).tolist()
    probe = ExposureProbe(tf, fr, [a - b for a, b in zip(tf, fr)], n)
    logger.info(f"Exposure probe over {n} users: gaps {[round(g, 4) for g in probe.gap]}")
    return probe


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------

def write_recommendations(path: Path, split: SplitDataset, rankings: Sequence[Sequence[int]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        orjson.dumps({"user": us.user_id, "items": [split.item_ids[i] for i in ranked]})
        for us, ranked in zip(split.users, rankings)
    ]
    path.write_bytes(b"\n".join(lines) + b"\n")


def plot_report(report: MetricsReport, out_dir: Path, metric: str = "H@10") -> List[Path]:
    """Bar charts per head/tail group and per popularity bin; no-op without matplotlib."""
    if not HAS_MATPLOTLIB:
        logger.info("matplotlib not installed; skipping plots")
        return []
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(4, 3))
    groups = [g for g in ("head", "tail") if getattr(report, g) is not None]
    ax.bar(groups, [getattr(report, g).get(metric, 0.0) for g in groups], color=["#4c72b0", "#dd8452"][:len(groups)])
    ax.set_ylabel(metric)
    ax.set_title("Head / tail users")
    fig.tight_layout()
    fig.savefig(out_dir / "head_tail.png")
    plt.close(fig)
    written.append(out_dir / "head_tail.png")

    fig, ax = plt.subplots(figsize=(5, 3))
    labels = [f"{b['lo']:.1f}-{b['hi']:.1f}" for b in report.bins]
    ax.bar(labels, [(b["metrics"] or {}).get(metric, 0.0) for b in report.bins])
    ax.set_xlabel("log(1 + target popularity)")
    ax.set_ylabel(metric)
    fig.tight_layout()
    fig.savefig(out_dir / "popularity_bins.png")
    plt.close(fig)
    written.append(out_dir / "popularity_bins.png")
    return written
