"""
Pipeline stages over an experiment directory, and the ablation grids.

Each run_* function is a no-op when its stamp matches the current config (unless
force=True) and raises MissingArtifactError when an upstream stage is missing.
"""

import re
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import orjson

from .config_loader import ExperimentConfig, override, seed_everything, substream_seed
from .corpus import (
    Corpus,
    SplitDataset,
    build_pseudo_documents,
    five_core_filter,
    ingest,
    split_leave_one_out,
    synth_generate,
    synth_interaction_rows,
)
from .errors import ConfigError
from .evalkit import evaluate_rankings, exposure_probe, plot_report, write_recommendations
from .experiment_ops import (
    adopt_upstream,
    experiment_paths,
    is_up_to_date,
    read_stamp,
    require_stage,
    stage_hash,
    write_config,
    write_stamp,
)
from .logger import cli_logger as logger
from .model.plugin import GenPlugin
from .retriever.bm25 import Bm25Index
from .retriever.cache import PreferenceCache, build_cache
from .retriever.collab import train_collab_encoder
from .retriever.search import MODES, build_contexts, load_contexts, save_contexts
from .semid import SemanticIds, assign_ids, build_trie, fit_codebooks
from .textembed import extract
from .trainer import finetune, infer, pretrain, ranked_items

Paths = Dict[str, Path]


def _skip(paths: Paths, stage: str, cfg: ExperimentConfig, force: bool) -> bool:
    if not force and is_up_to_date(paths, stage, stage_hash(cfg, stage)):
        logger.info(f"{stage}: up-to-date")
        return True
    return False


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------

def load_split(cfg: ExperimentConfig, paths: Paths) -> SplitDataset:
    require_stage(paths, "data", stage_hash(cfg, "data"))
    corpus = Corpus.from_json((paths["corpus"] / "corpus.json").read_bytes())
    d = cfg.data
    return split_leave_one_out(corpus, d.max_len, d.popularity_mode, d.head_ratio)


def load_ids(cfg: ExperimentConfig, paths: Paths, split: SplitDataset):
    require_stage(paths, "ids", stage_hash(cfg, "ids"))
    manifest = orjson.loads((paths["ids"] / "semantic_ids.json").read_bytes())
    embeddings = np.load(paths["embeddings"] / "items.npy")
    return SemanticIds.from_manifest(manifest, split.item_ids), embeddings


def _checkpoint(paths: Paths, stage: str) -> Path:
    return paths["checkpoints"] / f"{stage}.pt"


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def _write_jsonl(path: Path, rows) -> None:
    path.write_bytes(b"".join(orjson.dumps(r) + b"\n" for r in rows))


def run_data(cfg: ExperimentConfig, paths: Paths, force: bool = False) -> None:
    if _skip(paths, "data", cfg, force):
        return
    d = cfg.data
    outputs = []
    if d.source == "synthetic":
        raw = synth_generate(
            d.n_users, d.n_items, d.n_clusters, d.skew, substream_seed(cfg.seed, "data"),
            d.min_history, d.max_history,
        )
        _write_jsonl(paths["corpus"] / "interactions.jsonl", synth_interaction_rows(raw))
        _write_jsonl(paths["corpus"] / "items.jsonl", [
            {"item": m.item_id, "title": m.title, "description": m.description} for m in raw.meta
        ])
        outputs += [paths["corpus"] / "interactions.jsonl", paths["corpus"] / "items.jsonl"]
    else:
        raw = ingest(Path(d.interaction_file), Path(d.meta_file))

    corpus, report = five_core_filter(raw, d.min_interactions)
    split = split_leave_one_out(corpus, d.max_len, d.popularity_mode, d.head_ratio)
    (paths["corpus"] / "corpus.json").write_bytes(corpus.to_json())
    (paths["corpus"] / "split.json").write_bytes(orjson.dumps(split.manifest()))
    (paths["corpus"] / "filter_report.json").write_bytes(orjson.dumps({
        "removed_users": report.removed_users,
        "removed_items": report.removed_items,
        "rounds": report.rounds,
        "n_users": split.n_users,
        "n_items": split.n_items,
        "n_head": len(split.head),
        "n_tail": len(split.tail),
    }, option=orjson.OPT_INDENT_2))
    outputs += [paths["corpus"] / f for f in ("corpus.json", "split.json", "filter_report.json")]
    logger.info(f"data: {split.n_users} users, {split.n_items} items ({len(split.head)} head / {len(split.tail)} tail)")
    write_stamp(paths, "data", stage_hash(cfg, "data"), outputs)


def run_ids(cfg: ExperimentConfig, paths: Paths, force: bool = False) -> None:
    if _skip(paths, "ids", cfg, force):
        return
    split = load_split(cfg, paths)
    e = cfg.embed
    embeddings = extract(
        split.meta, e.extractor, dim=e.dim, seed=substream_seed(cfg.seed, "embed"),
        vector_file=Path(e.vector_file) if e.vector_file else None, cache_dir=paths["embeddings"],
    )
    np.save(paths["embeddings"] / "items.npy", embeddings)
    codebooks = fit_codebooks(
        embeddings, cfg.ids.levels, cfg.ids.codebook_size, substream_seed(cfg.seed, "ids"), cfg.ids.kmeans_init
    )
    codebooks.save(paths["ids"])
    sids = assign_ids(codebooks, embeddings)
    (paths["ids"] / "semantic_ids.json").write_bytes(orjson.dumps(sids.manifest(split.item_ids)))
    write_stamp(paths, "ids", stage_hash(cfg, "ids"), [paths["embeddings"], paths["ids"]])


def run_pretrain(cfg: ExperimentConfig, paths: Paths, force: bool = False) -> None:
    if _skip(paths, "pretrain", cfg, force):
        return
    split = load_split(cfg, paths)
    sids, embeddings = load_ids(cfg, paths, split)
    h = stage_hash(cfg, "pretrain")
    seed_everything(substream_seed(cfg.seed, "init"))
    model = GenPlugin.from_config(cfg, embeddings, sids.codes, sids.vocab_sizes)
    result = pretrain(
        model, split, cfg,
        log_path=paths["logs"] / "pretrain.csv",
        checkpoint_path=_checkpoint(paths, "pretrain"),
        cfg_hash=h,
    )
    logger.info(f"pretrain: best epoch {result.best_epoch}, val {result.best_val:.4f}")
    write_stamp(paths, "pretrain", h, [_checkpoint(paths, "pretrain"), paths["logs"] / "pretrain.csv"])


def contexts_for_mode(cfg: ExperimentConfig, paths: Paths, mode: str, cache: PreferenceCache):
    index = Bm25Index.load(paths["retrieval"] / "bm25.json")
    profiles = np.load(paths["retrieval"] / "collab_profiles.npy")
    return build_contexts(mode, index, profiles, cache.vectors, cfg.retrieval.z, cfg.retrieval.v)


def run_retrieval(cfg: ExperimentConfig, paths: Paths, force: bool = False) -> None:
    if _skip(paths, "retrieval", cfg, force):
        return
    require_stage(paths, "pretrain", stage_hash(cfg, "pretrain"))
    split = load_split(cfg, paths)
    r = cfg.retrieval
    model = GenPlugin.from_checkpoint(_checkpoint(paths, "pretrain"))
    histories = [u.train for u in split.users]
    user_ids = [u.user_id for u in split.users]

    cache = build_cache(model, user_ids, histories, cfg.data.max_len)
    cache.save(paths["retrieval"])
    Bm25Index.from_texts(build_pseudo_documents(split), r.k1, r.b).save(paths["retrieval"] / "bm25.json")
    profiles = train_collab_encoder(
        histories, split.n_items, dim=r.collab_dim, n_layers=r.collab_layers, n_heads=r.collab_heads,
        epochs=r.collab_epochs, lr=r.collab_lr, max_len=cfg.data.max_len,
        seed=substream_seed(cfg.seed, "collab"),
    )
    np.save(paths["retrieval"] / "collab_profiles.npy", profiles)
    save_contexts(contexts_for_mode(cfg, paths, r.mode, cache), paths["retrieval"] / "contexts.jsonl")
    write_stamp(paths, "retrieval", stage_hash(cfg, "retrieval"), [paths["retrieval"]])


def run_finetune(cfg: ExperimentConfig, paths: Paths, force: bool = False) -> None:
    if not cfg.retrieval.enabled:
        raise ConfigError("finetune needs retrieval.enabled: true")
    if _skip(paths, "finetune", cfg, force):
        return
    require_stage(paths, "retrieval", stage_hash(cfg, "retrieval"))
    split = load_split(cfg, paths)
    model = GenPlugin.from_checkpoint(_checkpoint(paths, "pretrain"))
    cache = PreferenceCache.load(paths["retrieval"], model.encoder_checksum())
    contexts = load_contexts(paths["retrieval"] / "contexts.jsonl")
    h = stage_hash(cfg, "finetune")
    result = finetune(
        model, split, cfg, contexts, cache,
        log_path=paths["logs"] / "finetune.csv",
        checkpoint_path=_checkpoint(paths, "finetune"),
        cfg_hash=h,
    )
    logger.info(f"finetune: best epoch {result.best_epoch}, val {result.best_val:.4f}")
    write_stamp(paths, "finetune", h, [_checkpoint(paths, "finetune"), paths["logs"] / "finetune.csv"])


def run_evaluate(cfg: ExperimentConfig, paths: Paths, force: bool = False) -> Dict:
    report_path = paths["reports"] / "metrics.json"
    if _skip(paths, "evaluate", cfg, force):
        return orjson.loads(report_path.read_bytes())
    split = load_split(cfg, paths)
    contexts = cache = None
    if cfg.retrieval.enabled:
        require_stage(paths, "finetune", stage_hash(cfg, "finetune"))
        model = GenPlugin.from_checkpoint(_checkpoint(paths, "finetune"))
        cache = PreferenceCache.load(paths["retrieval"], model.encoder_checksum())
        contexts = load_contexts(paths["retrieval"] / "contexts.jsonl")
    else:
        require_stage(paths, "pretrain", stage_hash(cfg, "pretrain"))
        model = GenPlugin.from_checkpoint(_checkpoint(paths, "pretrain"))

    trie = build_trie(model.codes.numpy())
    rankings = ranked_items(infer(model, split, cfg, trie, contexts=contexts, cache=cache))
    report = evaluate_rankings(rankings, split, cfg.eval.ks, cfg.eval.n_bins)
    report.write(paths["reports"])
    write_recommendations(paths["reports"] / "recommendations.jsonl", split, rankings)
    outputs = [report_path, paths["reports"] / "metrics.csv", paths["reports"] / "recommendations.jsonl"]
    outputs += plot_report(report, paths["reports"], f"H@{max(cfg.eval.ks)}")
    logger.info(f"evaluate: {report.overall}")
    write_stamp(paths, "evaluate", stage_hash(cfg, "evaluate"), outputs)
    return orjson.loads(report_path.read_bytes())


def run_probe(cfg: ExperimentConfig, paths: Paths, force: bool = False) -> Dict:
    out = paths["reports"] / "exposure_probe.json"
    if _skip(paths, "probe", cfg, force):
        return orjson.loads(out.read_bytes())
    require_stage(paths, "pretrain", stage_hash(cfg, "pretrain"))
    split = load_split(cfg, paths)
    model = GenPlugin.from_checkpoint(_checkpoint(paths, "pretrain"))
    probe = exposure_probe(model, split, cfg)
    payload = {
        "teacher_forced": probe.teacher_forced,
        "free_running": probe.free_running,
        "gap": probe.gap,
        "mean_gap_after_first": probe.mean_gap(1),
        "n": probe.n,
    }
    out.write_bytes(orjson.dumps(payload, option=orjson.OPT_INDENT_2))
    write_stamp(paths, "probe", stage_hash(cfg, "probe"), [out])
    return payload


def run_pipeline(cfg: ExperimentConfig, paths: Paths, force: bool = False, probe: bool = True) -> Dict:
    run_data(cfg, paths, force)
    run_ids(cfg, paths, force)
    run_pretrain(cfg, paths, force)
    if cfg.retrieval.enabled:
        run_retrieval(cfg, paths, force)
        run_finetune(cfg, paths, force)
    metrics = run_evaluate(cfg, paths, force)
    if probe:
        metrics = dict(metrics, exposure=run_probe(cfg, paths, force))
    return metrics


# ---------------------------------------------------------------------------
# Ablation grids
# ---------------------------------------------------------------------------

PLUGIN_VARIANTS = [
    ("backbone", {"plugin": {"dual_view": False}, "ssg": {"enabled": False}, "retrieval": {"enabled": False}}),
    ("+DSA", {"plugin": {"dual_view": True}, "ssg": {"enabled": False}, "retrieval": {"enabled": False}}),
    ("+DSA+SSG", {"plugin": {"dual_view": True}, "ssg": {"enabled": True}, "retrieval": {"enabled": False}}),
    ("+DSA+SSG+RAR", {"plugin": {"dual_view": True}, "ssg": {"enabled": True}, "retrieval": {"enabled": True}}),
]

RAR_VARIANTS = [("none", {"retrieval": {"enabled": False}})] + [
    (mode, {"retrieval": {"enabled": True, "mode": mode}}) for mode in MODES
]

REUSABLE = ("data", "ids", "pretrain", "retrieval")


def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_") or "variant"


def adopt_matching(cfg: ExperimentConfig, dst: Paths, donors: Sequence[Paths]) -> None:
    """Reuse finished upstream stages from sibling directories built with the same stage config."""
    for stage in REUSABLE:
        h = stage_hash(cfg, stage)
        if is_up_to_date(dst, stage, h):
            continue
        for donor in donors:
            stamp = read_stamp(donor, stage)
            if stamp is not None and stamp["config_hash"] == h:
                adopt_upstream(donor, dst, [stage])
                logger.info(f"{stage}: reused from {donor['root']}")
                break
        else:
            return


def _metric(report: Dict, group: str, name: str) -> Optional[float]:
    values = report.get(group)
    if not values:
        return None
    return values.get(name)


def _nanmean(values: List[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def run_grid(cfg: ExperimentConfig, root: Path, grid: str, seeds: int, force: bool = False) -> List[Dict]:
    """One experiment directory per (seed, variant); returns seed-averaged rows."""
    if grid == "plugin":
        variants = PLUGIN_VARIANTS
    elif grid == "rar":
        variants = RAR_VARIANTS
    else:
        raise ConfigError(f"Unknown ablation grid: {grid}")
    if seeds < 1:
        raise ValueError("seeds must be >= 1")

    ks = sorted(cfg.eval.ks)
    top = ks[-1]
    per_variant: Dict[str, List[Dict]] = {name: [] for name, _ in variants}
    for s in range(seeds):
        seed = cfg.seed + s
        donors: List[Paths] = []
        for name, patch in variants:
            vcfg = override(cfg, dict(patch, seed=seed))
            paths = experiment_paths(Path(root) / f"ablate_{grid}" / f"seed{seed}" / _slug(name))
            write_config(paths, vcfg)
            adopt_matching(vcfg, paths, donors)
            logger.info(f"ablate[{grid}] seed {seed}: {name}")
            per_variant[name].append(run_pipeline(vcfg, paths, force, probe=(grid == "plugin")))
            donors.append(paths)

    rows = []
    for name, _ in variants:
        reports = per_variant[name]
        row: Dict[str, object] = {"variant": name, "seeds": len(reports)}
        for k in ks:
            row[f"H@{k}"] = _nanmean([_metric(r, "overall", f"H@{k}") for r in reports])
            row[f"N@{k}"] = _nanmean([_metric(r, "overall", f"N@{k}") for r in reports])
        row[f"tail H@{top}"] = _nanmean([_metric(r, "tail", f"H@{top}") for r in reports])
        if grid == "plugin":
            row["exposure gap"] = _nanmean([r["exposure"]["mean_gap_after_first"] for r in reports])
        rows.append(row)
    return rows
