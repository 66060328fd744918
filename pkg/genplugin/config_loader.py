import hashlib
import random
from pathlib import Path
from typing import Literal

import numpy as np
import orjson
import torch
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

PROFILES_DIR = Path("profiles")


class _Section(BaseModel):
    # Unknown keys are fatal so that ablation configs cannot silently drift.
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    source: Literal["synthetic", "amazon"] = "synthetic"
    n_users: int = Field(200, ge=1)
    n_items: int = Field(100, ge=1)
    n_clusters: int = Field(4, ge=1)
    skew: float = Field(1.0, ge=0.0)
    min_history: int = Field(8, ge=1)
    max_history: int = Field(20, ge=1)
    interaction_file: str | None = None
    meta_file: str | None = None
    min_interactions: int = Field(5, ge=1)
    max_len: int = Field(20, ge=3)
    popularity_mode: Literal["train", "all"] = "train"
    head_ratio: float = Field(0.2, ge=0.0, le=1.0)


class EmbedConfig(_Section):
    extractor: Literal["hash", "file"] = "hash"
    dim: int = Field(256, ge=1)
    vector_file: str | None = None


class IdsConfig(_Section):
    levels: int = Field(3, ge=1)
    codebook_size: int = Field(32, ge=1)
    kmeans_init: int = Field(10, ge=1)


class ModelConfig(_Section):
    # full scale (profiles/beauty): 4 layers, 6 heads x 64, ffn 1024, token_dim 128
    n_layers: int = Field(2, ge=1)
    n_heads: int = Field(4, ge=1)
    head_dim: int = Field(16, ge=1)
    ffn_dim: int = Field(128, ge=1)
    token_dim: int = Field(32, ge=1)
    dropout: float = Field(0.1, ge=0.0, le=1.0)

    @property
    def d_model(self) -> int:
        return self.n_heads * self.head_dim


class LossConfig(_Section):
    lambda_item: float = Field(0.5, ge=0.0)
    lambda_user: float = Field(0.85, ge=0.0)
    lambda_kl: float = Field(0.5, ge=0.0)
    tau: float = Field(0.07, gt=0.0)
    phi: float = Field(2.0, gt=0.0)


class SsgConfig(_Section):
    enabled: bool = True
    p1: float = Field(0.6, ge=0.0, le=1.0)
    p2: float = Field(0.5, ge=0.0, le=1.0)
    q: int = Field(5, ge=1)
    language_decoding: Literal["teacher_forced", "free_running"] = "teacher_forced"
    two_pass: bool = False


class RetrievalConfig(_Section):
    enabled: bool = True
    mode: Literal["sim", "content", "collab", "dual", "dual_rerank"] = "dual_rerank"
    z: int = Field(10, ge=1)
    v: int = Field(5, ge=0)
    k1: float = Field(1.2, ge=0.0)
    b: float = Field(0.75, ge=0.0, le=1.0)
    collab_dim: int = Field(32, ge=2)
    collab_layers: int = Field(2, ge=1)
    collab_heads: int = Field(2, ge=1)
    collab_epochs: int = Field(30, ge=1)
    collab_lr: float = Field(0.001, gt=0.0)


class TrainConfig(_Section):
    lr: float = Field(0.002, gt=0.0)
    weight_decay: float = Field(0.01, ge=0.0)
    warmup_ratio: float = Field(0.01, ge=0.0, le=1.0)
    batch_size: int = Field(32, ge=1)  # full scale: 512
    max_epochs: int = Field(60, ge=1)
    patience: int = Field(20, ge=1)
    grad_clip: float = Field(1.0, gt=0.0)
    prefix_examples: bool = True
    finetune_epochs: int = Field(20, ge=1)
    finetune_lr: float = Field(0.001, gt=0.0)
    finetune_ssg: bool = False


class EvalConfig(_Section):
    beam: int = Field(20, ge=10)
    ks: list[int] = Field(default_factory=lambda: [5, 10])
    n_bins: int = Field(5, ge=1)


class PluginConfig(_Section):
    # false trains the bare ID-view backbone (no language view, no alignments)
    dual_view: bool = True


class ExperimentConfig(_Section):
    name: str = "synthetic"
    seed: int = 42
    data: DataConfig = Field(default_factory=DataConfig)
    embed: EmbedConfig = Field(default_factory=EmbedConfig)
    ids: IdsConfig = Field(default_factory=IdsConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    ssg: SsgConfig = Field(default_factory=SsgConfig)
    retrieval: RetrievalConfig = Field(default_factory=RetrievalConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    plugin: PluginConfig = Field(default_factory=PluginConfig)

    @model_validator(mode="after")
    def _cross_checks(self):
        if self.data.min_history > self.data.max_history:
            raise ValueError("data.min_history must not exceed data.max_history")
        if self.embed.extractor == "file" and not self.embed.vector_file:
            raise ValueError("embed.extractor=file needs embed.vector_file")
        if self.data.source == "amazon" and not (self.data.interaction_file and self.data.meta_file):
            raise ValueError("data.source=amazon needs data.interaction_file and data.meta_file")
        if self.ssg.q > self.ids.codebook_size:
            raise ValueError("ssg.q cannot exceed ids.codebook_size")
        if any(k <= 0 for k in self.eval.ks):
            raise ValueError("eval.ks must be positive")
        return self


def resolve_config_path(source: str | Path) -> Path:
    """A config argument is either a file path or a profile name under profiles/."""
    path = Path(source)
    if path.is_file():
        return path
    cfg_path = PROFILES_DIR / str(source) / "config.yaml"
    if cfg_path.exists():
        return cfg_path
    raise FileNotFoundError(f"No config found at {source} (nor profile {cfg_path})")


def parse_config(raw: dict | None) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw or {})
    except ValidationError as e:
        raise ConfigError(f"invalid config:\n{e}") from e


def load_config(source: str | Path, seed: int | None = None) -> ExperimentConfig:
    cfg_path = resolve_config_path(source)
    try:
        raw = yaml.safe_load(cfg_path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {cfg_path}: {e}") from e
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{cfg_path} must contain a mapping at the top level")
    if seed is not None:
        raw = _merge(raw or {}, {"seed": seed})
    return parse_config(raw)


def override(cfg: ExperimentConfig, patch: dict) -> ExperimentConfig:
    """Return a validated copy of cfg with a nested patch applied."""
    return parse_config(_merge(cfg.model_dump(mode="json"), patch))


def _merge(a, b):
    out = dict(a)
    for k, v in b.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = orjson.dumps(cfg.model_dump(mode="json"), option=orjson.OPT_SORT_KEYS)
    return hashlib.sha1(canonical).hexdigest()


def substream_seed(seed: int, name: str) -> int:
    """Independent, named seed derived from the single experiment seed."""
    digest = hashlib.sha1(f"{seed}/{name}".encode("utf-8")).hexdigest()
    return int(digest[:8], 16)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
