"""Shared toy fixtures: a small seeded synthetic corpus, its semantic IDs and a tiny model."""

import copy

import pytest
import torch
import yaml

from genplugin.config_loader import parse_config
from genplugin.corpus import five_core_filter, split_leave_one_out, synth_generate
from genplugin.model.plugin import GenPlugin
from genplugin.semid import assign_ids, fit_codebooks
from genplugin.textembed import hash_embed

TINY = {
    "name": "tiny",
    "seed": 7,
    "data": {
        "source": "synthetic",
        "n_users": 24,
        "n_items": 16,
        "n_clusters": 2,
        "skew": 1.0,
        "min_history": 8,
        "max_history": 12,
        "max_len": 12,
    },
    "embed": {"dim": 32},
    "ids": {"levels": 2, "codebook_size": 4, "kmeans_init": 2},
    "model": {"n_layers": 1, "n_heads": 2, "head_dim": 8, "ffn_dim": 32, "token_dim": 8, "dropout": 0.0},
    "ssg": {"q": 3},
    "retrieval": {"z": 4, "v": 2, "collab_dim": 8, "collab_heads": 2, "collab_epochs": 2},
    "train": {"batch_size": 16, "max_epochs": 2, "patience": 2, "finetune_epochs": 2},
    "eval": {"beam": 10, "ks": [5, 10], "n_bins": 3},
}


@pytest.fixture
def tiny_raw():
    return copy.deepcopy(TINY)


@pytest.fixture
def tiny_cfg(tiny_raw):
    return parse_config(tiny_raw)


@pytest.fixture
def tiny_config_file(tmp_path, tiny_raw):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(tiny_raw), encoding="utf-8")
    return path


@pytest.fixture
def tiny_split(tiny_cfg):
    d = tiny_cfg.data
    raw = synth_generate(d.n_users, d.n_items, d.n_clusters, d.skew, seed=0,
                         min_history=d.min_history, max_history=d.max_history)
    corpus, _ = five_core_filter(raw, d.min_interactions)
    return split_leave_one_out(corpus, d.max_len, d.popularity_mode, d.head_ratio)


@pytest.fixture
def tiny_ids(tiny_cfg, tiny_split):
    embeddings = hash_embed([m.text for m in tiny_split.meta], tiny_cfg.embed.dim, seed=0)
    codebooks = fit_codebooks(embeddings, tiny_cfg.ids.levels, tiny_cfg.ids.codebook_size, seed=0, n_init=2)
    return embeddings, assign_ids(codebooks, embeddings)


@pytest.fixture
def tiny_model(tiny_cfg, tiny_ids):
    torch.manual_seed(0)
    embeddings, sids = tiny_ids
    return GenPlugin.from_config(tiny_cfg, embeddings, sids.codes, sids.vocab_sizes)
