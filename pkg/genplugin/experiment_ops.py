"""
Shared experiment-directory operations.

Used by the CLI commands, the ablation grids and the sweep script. Every stage writes
a stamp `stamps/<stage>.json` carrying the hash of the config sections it depends on;
a stage whose stamp matches is up to date.
"""

import hashlib
import shutil
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

import orjson
import yaml

from .config_loader import ExperimentConfig
from .errors import MissingArtifactError

EXPERIMENTS_DIR = Path("experiments")

# stage -> (upstream stages, config sections it reads)
STAGES: Dict[str, tuple] = {
    "data": ((), ("seed", "data")),
    "ids": (("data",), ("embed", "ids")),
    "pretrain": (("ids",), ("model", "loss", "ssg", "train", "plugin")),
    "retrieval": (("pretrain",), ("retrieval",)),
    "finetune": (("retrieval",), ()),
    "evaluate": (("pretrain",), ("retrieval", "eval")),
    "probe": (("pretrain",), ("eval",)),
}


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------

def experiment_paths(out: Path) -> Dict[str, Path]:
    out = Path(out)
    paths = {
        "root": out,
        "config": out / "config.yaml",
        "corpus": out / "corpus",
        "embeddings": out / "embeddings",
        "ids": out / "ids",
        "checkpoints": out / "checkpoints",
        "retrieval": out / "retrieval",
        "logs": out / "logs",
        "reports": out / "reports",
        "stamps": out / "stamps",
    }
    for key, p in paths.items():
        if key not in ("config",):
            p.mkdir(parents=True, exist_ok=True)
    return paths


def default_out(cfg: ExperimentConfig) -> Path:
    return EXPERIMENTS_DIR / cfg.name


def snapshot_config(paths: Dict[str, Path], source: Path) -> None:
    """Byte-exact copy of the config file the run was started with."""
    paths["config"].write_bytes(Path(source).read_bytes())


def write_config(paths: Dict[str, Path], cfg: ExperimentConfig) -> None:
    """Config snapshot for derived (ablation / sweep) experiments."""
    with open(paths["config"], "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.model_dump(mode="json"), f, default_flow_style=False, sort_keys=False)


# ---------------------------------------------------------------------------
# Stamps
# ---------------------------------------------------------------------------

def stage_sections(stage: str) -> List[str]:
    """Config sections a stage depends on, including those of its upstream stages."""
    if stage not in STAGES:
        raise ValueError(f"Unknown stage: {stage}")
    upstream, own = STAGES[stage]
    sections = list(own)
    for up in upstream:
        sections += [s for s in stage_sections(up) if s not in sections]
    return sections


def stage_hash(cfg: ExperimentConfig, stage: str) -> str:
    dump = cfg.model_dump(mode="json")
    relevant = {s: dump[s] for s in sorted(stage_sections(stage))}
    return hashlib.sha1(orjson.dumps(relevant, option=orjson.OPT_SORT_KEYS)).hexdigest()


def _stamp_path(paths: Dict[str, Path], stage: str) -> Path:
    return paths["stamps"] / f"{stage}.json"


def read_stamp(paths: Dict[str, Path], stage: str) -> Optional[Dict[str, Any]]:
    p = _stamp_path(paths, stage)
    if not p.exists():
        return None
    return orjson.loads(p.read_bytes())


def write_stamp(paths: Dict[str, Path], stage: str, cfg_hash: str, outputs: List[Path]) -> None:
    stamp = {
        "stage": stage,
        "config_hash": cfg_hash,
        "finished_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "outputs": [str(Path(o).relative_to(paths["root"])) for o in outputs],
    }
    _stamp_path(paths, stage).write_bytes(orjson.dumps(stamp, option=orjson.OPT_INDENT_2))


def is_up_to_date(paths: Dict[str, Path], stage: str, cfg_hash: str) -> bool:
    stamp = read_stamp(paths, stage)
    if stamp is None or stamp["config_hash"] != cfg_hash:
        return False
    return all((paths["root"] / o).exists() for o in stamp["outputs"])


def require_stage(paths: Dict[str, Path], stage: str, cfg_hash: str) -> None:
    stamp = read_stamp(paths, stage)
    if stamp is None:
        raise MissingArtifactError(stage)
    if stamp["config_hash"] != cfg_hash:
        raise MissingArtifactError(stage, "outputs were built with a different config; re-run it")


def adopt_upstream(src: Dict[str, Path], dst: Dict[str, Path], stages: List[str]) -> None:
    """Copy finished stages (outputs and stamps) from another experiment directory."""
    for stage in stages:
        stamp = read_stamp(src, stage)
        if stamp is None:
            raise MissingArtifactError(stage, f"not finished in {src['root']}")
        for rel in stamp["outputs"]:
            s, d = src["root"] / rel, dst["root"] / rel
            d.parent.mkdir(parents=True, exist_ok=True)
            if s.is_dir():
                shutil.copytree(s, d, dirs_exist_ok=True)
            else:
                shutil.copy2(s, d)
        shutil.copy2(_stamp_path(src, stage), _stamp_path(dst, stage))


# ---------------------------------------------------------------------------
# Status
# ---------------------------------------------------------------------------

def experiment_summary(paths: Dict[str, Path], cfg: ExperimentConfig) -> List[Dict[str, Any]]:
    rows = []
    for stage in STAGES:
        stamp = read_stamp(paths, stage)
        if stamp is None:
            state = "missing"
        elif is_up_to_date(paths, stage, stage_hash(cfg, stage)):
            state = "up-to-date"
        else:
            state = "stale"
        size = sum(dir_size(paths["root"] / o) for o in (stamp or {}).get("outputs", []))
        rows.append({
            "stage": stage,
            "state": state,
            "finished_at": (stamp or {}).get("finished_at", ""),
            "hash": (stamp or {}).get("config_hash", "")[:12],
            "size": size,
        })
    return rows


def dir_size(path: Path) -> int:
    """Recursive size in bytes (a file's own size for files)."""
    if not path.exists():
        return 0
    if path.is_file():
        return path.stat().st_size
    total = 0
    for f in path.rglob("*"):
        if f.is_file():
            try:
                total += f.stat().st_size
            except OSError:
                pass
    return total


def human_size(size_bytes: int) -> str:
    """Convert bytes to human-readable string."""
    if size_bytes == 0:
        return "0 B"
    for unit in ("B", "KB", "MB", "GB"):
        if size_bytes < 1024:
            return f"{size_bytes:.1f} {unit}" if unit != "B" else f"{size_bytes} B"
        size_bytes /= 1024
    return f"{size_bytes:.1f} TB"
