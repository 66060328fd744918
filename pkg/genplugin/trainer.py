"""
Training and inference for the plugin.

pretrain:  dual-view generation + item/user alignment + substitution guidance + mutual KL
finetune:  frozen encoders, decoder memory augmented with retrieved users' cached vectors
infer:     trie-constrained beam generation over the same memory, parameters untouched
"""

import copy
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import torch
from torch.optim.lr_scheduler import LambdaLR

from .config_loader import ExperimentConfig, substream_seed
from .corpus import SplitDataset
from .errors import TrainingDivergence
from .logger import train_logger as logger
from .model.encoders import (
    item_id_representation,
    loss_item_alignment,
    loss_user_alignment,
    pad_histories,
)
from .model.plugin import GenPlugin, save_checkpoint
from .model.ssg_decoder import (
    SubstitutionPlan,
    apply_substitution,
    generate,
    generation_loss,
    greedy_decode,
    language_view_predict,
    loss_kl_mutual,
    refine_levels,
    temperature_scale,
)
from .retriever.cache import PreferenceCache
from .retriever.search import RetrievalContext
from .semid import IdTrie

COMPONENTS = ("lan", "id", "item", "user", "kl")
LOG_COLUMNS = ("epoch",) + COMPONENTS + ("total", "val_loss", "lr")


# ---------------------------------------------------------------------------
# Examples and batches
# ---------------------------------------------------------------------------

@dataclass
class Examples:
    histories: List[List[int]] = field(default_factory=list)
    targets: List[int] = field(default_factory=list)
    users: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.targets)

    def add(self, history: Sequence[int], target: int, user: int) -> None:
        self.histories.append(list(history))
        self.targets.append(int(target))
        self.users.append(user)


@dataclass
class Batch:
    items: torch.Tensor  # (B, S) right-padded history
    targets: torch.Tensor  # (B,) next item
    users: torch.Tensor  # (B,)


def build_examples(split: SplitDataset, part: str, prefix_examples: bool = True) -> Examples:
    """train: prefixes of the train part; valid: train -> valid; test: train + valid -> test."""
    ex = Examples()
    for u, us in enumerate(split.users):
        if part == "train":
            if prefix_examples:
                for j in range(1, len(us.train)):
                    ex.add(us.train[:j], us.train[j], u)
            elif len(us.train) > 1:
                ex.add(us.train[:-1], us.train[-1], u)
        elif part == "valid":
            ex.add(us.train, us.valid, u)
        elif part == "test":
            ex.add(us.train + [us.valid], us.test, u)
        else:
            raise ValueError(f"Unknown split part: {part}")
    return ex


def iter_batches(examples: Examples, batch_size: int, max_len: int,
                 generator: Optional[torch.Generator] = None) -> Iterator[Batch]:
    n = len(examples)
    order = torch.randperm(n, generator=generator).tolist() if generator is not None else list(range(n))
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield Batch(
            items=pad_histories([examples.histories[i] for i in idx], max_len),
            targets=torch.tensor([examples.targets[i] for i in idx], dtype=torch.long),
            users=torch.tensor([examples.users[i] for i in idx], dtype=torch.long),
        )


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def compute_components(model: GenPlugin, batch: Batch, cfg: ExperimentConfig,
                       generator: Optional[torch.Generator] = None) -> Dict[str, torch.Tensor]:
    """Every loss term for one batch; terms a variant does not use are zero."""
    decoder = model.decoder
    targets = model.target_codes(batch.targets)
    id_enc = model.encode_id(batch.items)
    zero = id_enc.pooled.sum() * 0.0
    out = {name: zero for name in COMPONENTS}

    if not model.dual_view:
        logits = decoder.decode_teacher_forced(id_enc.states, id_enc.pad, targets)
        out["id"] = generation_loss(logits, targets)
        return out

    lan_enc = model.encode_language(batch.items)
    ssg = cfg.ssg
    lan_logits, refined = language_view_predict(decoder, lan_enc.states, lan_enc.pad, targets, ssg.q)
    out["lan"] = generation_loss(lan_logits, targets)

    if ssg.enabled:
        if ssg.two_pass:
            with torch.no_grad():
                guide = decoder.decode_teacher_forced(id_enc.states, id_enc.pad, targets)
            refined = refine_levels(guide, ssg.q)
        elif ssg.language_decoding == "free_running":
            guide, _ = greedy_decode(decoder, lan_enc.states, lan_enc.pad)
            refined = refine_levels(guide, ssg.q)
        plan = SubstitutionPlan.draw(targets.shape[0], model.levels, ssg.p1, ssg.p2, generator)
        inputs = apply_substitution(plan, targets, refined, decoder)
        id_logits = decoder.forward_inputs(id_enc.states, id_enc.pad, inputs)
    else:
        id_logits = decoder.decode_teacher_forced(id_enc.states, id_enc.pad, targets)
    out["id"] = generation_loss(id_logits, targets)

    real = batch.items >= 0
    g = item_id_representation(id_enc.states, model.levels)
    out["item"] = loss_item_alignment(lan_enc.states[real], g[real], batch.items[real], cfg.loss.tau)
    out["user"] = loss_user_alignment(lan_enc.pooled, id_enc.pooled, cfg.loss.tau)

    phi = cfg.loss.phi
    out["kl"] = loss_kl_mutual(
        [temperature_scale(lg, phi, l) for l, lg in enumerate(lan_logits)],
        [temperature_scale(lg, phi, l) for l, lg in enumerate(id_logits)],
    )
    return out


def combine(components: Dict[str, torch.Tensor], cfg: ExperimentConfig) -> torch.Tensor:
    for name in COMPONENTS:
        value = components[name]
        if not torch.isfinite(value).all():
            raise TrainingDivergence(name, float(value.detach()))
    w = cfg.loss
    return (
        components["lan"]
        + components["id"]
        + w.lambda_item * components["item"]
        + w.lambda_user * components["user"]
        + w.lambda_kl * components["kl"]
    )


def total_loss(model: GenPlugin, batch: Batch, cfg: ExperimentConfig,
               generator: Optional[torch.Generator] = None) -> Tuple[torch.Tensor, Dict[str, float]]:
    components = compute_components(model, batch, cfg, generator)
    total = combine(components, cfg)
    breakdown = {k: float(v.detach()) for k, v in components.items()}
    breakdown["total"] = float(total.detach())
    return total, breakdown


# ---------------------------------------------------------------------------
# Decoder memory
# ---------------------------------------------------------------------------

def retrieved_batch(vectors: torch.Tensor, contexts: Sequence[RetrievalContext],
                    users: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """(B, v, d) cached vectors of each user's retrieved neighbours, right-padded."""
    lists = [contexts[int(u)].retrieved for u in users]
    v = max((len(r) for r in lists), default=0)
    out = torch.zeros(len(lists), v, vectors.shape[1], dtype=vectors.dtype)
    pad = torch.ones(len(lists), v, dtype=torch.bool)
    for row, r in enumerate(lists):
        if r:
            out[row, :len(r)] = vectors[torch.tensor(r, dtype=torch.long)]
            pad[row, :len(r)] = False
    return out, pad


def id_memory(model: GenPlugin, batch: Batch, contexts: Optional[Sequence[RetrievalContext]] = None,
              vectors: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    enc = model.encode_id(batch.items)
    if contexts is None or vectors is None:
        return enc.states, enc.pad
    retrieved, retrieved_pad = retrieved_batch(vectors.to(enc.states.dtype), contexts, batch.users)
    return model.decoder.augment_memory(enc.states, enc.pad, retrieved, retrieved_pad)


@torch.no_grad()
def validation_loss(model: GenPlugin, examples: Examples, cfg: ExperimentConfig,
                    contexts: Optional[Sequence[RetrievalContext]] = None,
                    vectors: Optional[torch.Tensor] = None) -> float:
    """Teacher-forced ID-view generation loss, averaged over examples."""
    was_training = model.training
    model.eval()
    total, n = 0.0, 0
    for batch in iter_batches(examples, cfg.train.batch_size, cfg.data.max_len):
        memory, pad = id_memory(model, batch, contexts, vectors)
        targets = model.target_codes(batch.targets)
        logits = model.decoder.decode_teacher_forced(memory, pad, targets)
        total += float(generation_loss(logits, targets)) * len(batch.targets)
        n += len(batch.targets)
    model.train(was_training)
    return total / max(n, 1)


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

class EarlyStopping:
    """Stop after `patience` consecutive epochs without a strictly lower validation loss."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def step(self, value: float, epoch: int) -> bool:
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def cosine_with_warmup(optimizer: torch.optim.Optimizer, total_steps: int, warmup_ratio: float) -> LambdaLR:
    warmup = int(math.ceil(warmup_ratio * total_steps))

    def factor(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        progress = (step - warmup) / max(1, total_steps - warmup)
        return 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))

    return LambdaLR(optimizer, factor)


@dataclass
class TrainResult:
    rows: List[Dict[str, object]]
    best_epoch: int
    best_val: float
    stopped_early: bool


def write_training_log(rows: Sequence[Dict[str, object]], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in LOG_COLUMNS})


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _fit(
    model: GenPlugin,
    split: SplitDataset,
    cfg: ExperimentConfig,
    *,
    stage: str,
    step_loss,
    val_fn,
    epochs: int,
    lr: float,
    log_path: Optional[Path],
    checkpoint_path: Optional[Path],
    cfg_hash: str,
) -> TrainResult:
    tc = cfg.train
    train_ex = build_examples(split, "train", tc.prefix_examples)
    if len(train_ex) == 0:
        raise ValueError("no training examples: every train part has a single item")
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(params, lr=lr, weight_decay=tc.weight_decay)
    steps_per_epoch = math.ceil(len(train_ex) / tc.batch_size)
    scheduler = cosine_with_warmup(optimizer, epochs * steps_per_epoch, tc.warmup_ratio)
    data_gen = torch.Generator().manual_seed(substream_seed(cfg.seed, f"data/{stage}"))
    sub_gen = torch.Generator().manual_seed(substream_seed(cfg.seed, f"substitution/{stage}"))
    torch.manual_seed(substream_seed(cfg.seed, f"dropout/{stage}"))

    stopper = EarlyStopping(tc.patience)
    val = val_fn()
    stopper.step(val, 0)
    best_state = copy.deepcopy(model.state_dict())
    rows: List[Dict[str, object]] = [{"epoch": 0, "val_loss": _fmt(val), "lr": _fmt(scheduler.get_last_lr()[0])}]
    logger.info(f"[{stage}] epoch 0: val {val:.4f}")
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, cfg_hash, stage)

    try:
        for epoch in range(1, epochs + 1):
            model.train()
            sums = {k: 0.0 for k in COMPONENTS + ("total",)}
            n = 0
            for batch in iter_batches(train_ex, tc.batch_size, cfg.data.max_len, data_gen):
                loss, parts = step_loss(batch, sub_gen)
                optimizer.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(params, tc.grad_clip)
                optimizer.step()
                scheduler.step()
                for k in sums:
                    sums[k] += parts.get(k, 0.0) * len(batch.targets)
                n += len(batch.targets)

            val = val_fn()
            if not math.isfinite(val):
                raise TrainingDivergence("val_loss", val)
            row = {"epoch": epoch, "val_loss": _fmt(val), "lr": _fmt(scheduler.get_last_lr()[0])}
            row.update({k: _fmt(v / n) for k, v in sums.items()})
            rows.append(row)
            logger.info(f"[{stage}] epoch {epoch}: total {sums['total'] / n:.4f} val {val:.4f}")

            if stopper.step(val, epoch):
                best_state = copy.deepcopy(model.state_dict())
                if checkpoint_path is not None:
                    save_checkpoint(model, checkpoint_path, cfg_hash, stage)
            elif stopper.should_stop:
                logger.info(f"[{stage}] early stop after {stopper.bad_epochs} epochs without improvement")
                break
    except TrainingDivergence:
        model.load_state_dict(best_state)
        logger.error(f"[{stage}] diverged; best checkpoint (epoch {stopper.best_epoch}) kept")
        if log_path is not None:
            write_training_log(rows, log_path)
        raise

    model.load_state_dict(best_state)
    if log_path is not None:
        write_training_log(rows, log_path)
    return TrainResult(rows, stopper.best_epoch, stopper.best, stopper.should_stop)


def pretrain(model: GenPlugin, split: SplitDataset, cfg: ExperimentConfig, *,
             log_path: Optional[Path] = None, checkpoint_path: Optional[Path] = None,
             cfg_hash: str = "") -> TrainResult:
    valid_ex = build_examples(split, "valid")

    def step_loss(batch, gen):
        return total_loss(model, batch, cfg, gen)

    return _fit(
        model, split, cfg, stage="pretrain", step_loss=step_loss,
        val_fn=lambda: validation_loss(model, valid_ex, cfg),
        epochs=cfg.train.max_epochs, lr=cfg.train.lr,
        log_path=log_path, checkpoint_path=checkpoint_path, cfg_hash=cfg_hash,
    )


def finetune(model: GenPlugin, split: SplitDataset, cfg: ExperimentConfig,
             contexts: Sequence[RetrievalContext], cache: PreferenceCache, *,
             log_path: Optional[Path] = None, checkpoint_path: Optional[Path] = None,
             cfg_hash: str = "") -> TrainResult:
    """Decoder-only training on retrieval-augmented memory; encoders stay bit-identical."""
    cache.check(model.encoder_checksum())
    model.freeze_encoders()
    vectors = torch.as_tensor(cache.vectors)
    valid_ex = build_examples(split, "valid")
    use_ssg = cfg.train.finetune_ssg and cfg.ssg.enabled and model.dual_view

    def step_loss(batch, gen):
        memory, pad = id_memory(model, batch, contexts, vectors)
        targets = model.target_codes(batch.targets)
        if use_ssg:
            lan = model.encode_language(batch.items)
            _, refined = language_view_predict(model.decoder, lan.states, lan.pad, targets, cfg.ssg.q)
            plan = SubstitutionPlan.draw(targets.shape[0], model.levels, cfg.ssg.p1, cfg.ssg.p2, gen)
            inputs = apply_substitution(plan, targets, refined, model.decoder)
            logits = model.decoder.forward_inputs(memory, pad, inputs)
        else:
            logits = model.decoder.decode_teacher_forced(memory, pad, targets)
        loss = generation_loss(logits, targets)
        if not torch.isfinite(loss):
            raise TrainingDivergence("id", float(loss.detach()))
        return loss, {"id": float(loss.detach()), "total": float(loss.detach())}

    return _fit(
        model, split, cfg, stage="finetune", step_loss=step_loss,
        val_fn=lambda: validation_loss(model, valid_ex, cfg, contexts, vectors),
        epochs=cfg.train.finetune_epochs, lr=cfg.train.finetune_lr,
        log_path=log_path, checkpoint_path=checkpoint_path, cfg_hash=cfg_hash,
    )


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

@torch.no_grad()
def infer(model: GenPlugin, split: SplitDataset, cfg: ExperimentConfig, trie: IdTrie, *,
          part: str = "test", contexts: Optional[Sequence[RetrievalContext]] = None,
          cache: Optional[PreferenceCache] = None, beam: Optional[int] = None) -> List[List[Tuple[int, float]]]:
    """Ranked (item, log-probability) lists per user, in user order."""
    beam = beam or cfg.eval.beam
    vectors = None
    if contexts is not None and cache is not None:
        cache.check(model.encoder_checksum())
        vectors = torch.as_tensor(cache.vectors)
    was_training = model.training
    model.eval()
    examples = build_examples(split, part)
    out: List[List[Tuple[int, float]]] = []
    for batch in iter_batches(examples, cfg.train.batch_size, cfg.data.max_len):
        memory, pad = id_memory(model, batch, contexts, vectors)
        for row in range(memory.shape[0]):
            out.append(generate(model.decoder, memory[row], pad[row], trie, beam))
    model.train(was_training)
    return out


def ranked_items(results: Sequence[Sequence[Tuple[int, float]]]) -> List[List[int]]:
    return [[item for item, _ in r] for r in results]

