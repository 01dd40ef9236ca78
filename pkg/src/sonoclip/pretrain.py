"""Symmetric contrastive pretraining with warmup-cosine schedule."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin

from .curation import ShardEntry
from .model import DualEncoder, ModelConfig, embed_images, load_checkpoint, save_checkpoint
from .preprocess import AugmentationPolicy, augment
from .tokenizer import encode_batch, train_bpe


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    base_lr: float = 5e-6
    warmup_steps: int = 2000
    schedule: str = "cosine"
    weight_decay: float = 0.1
    batch_size: int = 140
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-6
    grad_clip: float | None = 1.0
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.warmup_steps < 0:
            raise ConfigurationError("warmup_steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        base = dict(epochs=5, base_lr=1e-4, warmup_steps=100, batch_size=64)
        base.update(overrides)
        return cls(**base)


def clip_loss(image_embs: torch.Tensor, text_embs: torch.Tensor, temperature) -> torch.Tensor:
    """Mean of row-wise and column-wise cross-entropy against the diagonal.

    Logits come from an elementwise product and sum rather than a matmul so
    that swapping the two inputs yields a bitwise-transposed matrix.
    """
    if image_embs.shape[0] == 0:
        raise ValueError("clip_loss needs at least one pair")
    if image_embs.shape != text_embs.shape:
        raise ValueError(f"shape mismatch {tuple(image_embs.shape)} vs {tuple(text_embs.shape)}")
    logits = (image_embs[:, None, :] * text_embs[None, :, :]).sum(-1) / temperature
    target = torch.arange(logits.shape[0])
    rows = F.cross_entropy(logits, target)
    cols = F.cross_entropy(logits.T.contiguous(), target)
    return (rows + cols) / 2


def lr_at(step: int, config: TrainConfig, total_steps: int | None = None) -> float:
    """Linear warmup to ``base_lr``, then half-cosine decay.

    ``total_steps`` counts optimizer steps, so the last step (index
    ``total_steps - 1``) runs at zero learning rate.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    w = config.warmup_steps
    if w and step < w:
        return config.base_lr * step / w
    if config.schedule == "constant" or total_steps is None:
        return config.base_lr
    span = max(total_steps - 1 - w, 1)
    progress = min((step - w) / span, 1.0)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def shard_batches(shards: Sequence[Sequence[ShardEntry]], batch_size: int, rng: np.random.Generator):
    """One epoch of batches; each batch is drawn from within a single shard.

    Shards are deduplicated by construction, so no batch can repeat an
    image. A trailing shard remainder becomes a smaller batch.
    """
    largest = max(len(s) for s in shards)
    if batch_size > largest:
        raise ConfigurationError(f"batch_size {batch_size} exceeds the largest shard ({largest})")
    batches = []
    for s in shards:
        order = rng.permutation(len(s))
        for i in range(0, len(s), batch_size):
            batches.append([s[j] for j in order[i:i + batch_size]])
    return [batches[i] for i in rng.permutation(len(batches))]


@dataclass
class Checkpoint:
    epoch: int
    loss: float
    seed: int
    path: Path | None = None
    state_dict: dict | None = field(default=None, repr=False)

    def load_into(self, model: DualEncoder) -> DualEncoder:
        if self.state_dict is not None:
            model.load_state_dict(self.state_dict)
        elif self.path is not None:
            model.load_state_dict(load_checkpoint(self.path)[0].state_dict())
        else:
            raise ValueError("checkpoint has neither weights nor a path")
        return model


def _param_groups(model: DualEncoder, weight_decay: float):
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if p.ndim < 2 or name == "log_temperature" or "class_token" in name or name.endswith(".pos"):
            no_decay.append(p)
        else:
            decay.append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def train(
    shards: Sequence[Sequence[ShardEntry]],
    model: DualEncoder,
    config: TrainConfig,
    images: Mapping[str, np.ndarray],
    tokens: Mapping[str, np.ndarray],
    checkpoint_dir=None,
    log_path=None,
    policy: AugmentationPolicy | None = None,
    caption_sets: Mapping[str, Sequence[str]] | None = None,
) -> list[Checkpoint]:
    """Run contrastive training; returns one checkpoint per epoch.

    ``images`` maps image_id to an H x W array, ``tokens`` maps caption text
    to its encoded id row. With ``caption_sets`` (image_id -> captions) each
    step draws a fresh caption per image instead of the shard's.
    Checkpoints are kept in memory and, when ``checkpoint_dir`` is given,
    also written to disk.
    """
    if not shards or not any(shards):
        raise ConfigurationError("no training pairs")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    policy = policy or AugmentationPolicy(seed=config.seed)
    n_batches = sum(math.ceil(len(s) / config.batch_size) for s in shards)
    total = n_batches * config.epochs
    opt = torch.optim.AdamW(_param_groups(model, config.weight_decay), lr=0.0, betas=config.betas, eps=config.eps)
    log = open(log_path, "w") if log_path else None
    checkpoints = []
    step = 0
    try:
        for epoch in range(config.epochs):
            model.train()
            losses = []
            for batch in shard_batches(shards, config.batch_size, rng):
                ids = [e.image_id for e in batch]
                assert len(ids) == len(set(ids)), "duplicate image within a batch"
                pix = [images[i] for i in ids]
                if config.augment:
                    pix = [augment(p, policy, rng) for p in pix]
                x = torch.from_numpy(np.stack(pix).astype(np.float32))
                if caption_sets is None:
                    texts = [e.caption for e in batch]
                else:
                    texts = [caption_sets[i][rng.integers(len(caption_sets[i]))] for i in ids]
                t = torch.from_numpy(np.stack([tokens[c] for c in texts]))
                lr = lr_at(step, config, total)
                for g in opt.param_groups:
                    g["lr"] = lr
                img, txt, tau = model(x, t)
                loss = clip_loss(img, txt, tau)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if config.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                opt.step()
                value = loss.item()
                losses.append(value)
                if log:
                    log.write(json.dumps({"step": step, "epoch": epoch, "lr": lr, "loss": value,
                                          "temperature": model.temperature.item()}) + "\n")
                step += 1
            mean_loss = float(np.mean(losses))
            ck = Checkpoint(epoch, mean_loss, config.seed,
                            state_dict={k: v.detach().clone() for k, v in model.state_dict().items()})
            if checkpoint_dir is not None:
                ck.path = save_checkpoint(Path(checkpoint_dir) / f"epoch_{epoch:03d}.pt", model,
                                          epoch=epoch, loss=mean_loss, seed=config.seed)
            checkpoints.append(ck)
    finally:
        if log:
            log.close()
    model.eval()
    return checkpoints


def pick_best(scores: Sequence[float]) -> int:
    """Index of the highest score; ties go to the earliest."""
    if not len(scores):
        raise ValueError("no scores")
    return int(np.argmax(np.asarray(scores, dtype=float)))


def select_checkpoint(checkpoints: Sequence[Checkpoint], model: DualEncoder, eval_images, eval_labels,
                      class_embeddings_fn) -> tuple[Checkpoint, list[float]]:
    """Checkpoint with the best zero-shot macro-F1 on an evaluation set.

    ``class_embeddings_fn(model)`` must return the prompt-ensembled class
    embeddings for the model's current weights.
    """
    from .metrics import macro_f1
    from .zeroshot import classify_batch

    if not checkpoints:
        raise ValueError("no checkpoints")
    if len(eval_images) == 0:
        raise ValueError("evaluation set is empty")
    f1s = []
    for ck in checkpoints:
        ck.load_into(model)
        cls = class_embeddings_fn(model)
        pred, _ = classify_batch(embed_images(model, eval_images), cls)
        f1s.append(macro_f1(pred, list(eval_labels), classes=sorted(cls)))
    best = checkpoints[pick_best(f1s)]
    best.load_into(model)
    return best, f1s


# --------------------------------------------------------------------------- estimator

class ContrastivePretrainer(TransformerMixin, BaseEstimator):
    """Train a dual encoder on (image, caption-set) pairs.

    ``X`` is an N x H x W image array and ``y`` a list of caption lists. Each
    image contributes one shard entry; its caption is redrawn from the
    image's list at every step.
    """

    def __init__(self, model_config=None, train_config=None, vocab=None, vocab_size=2048,
                 shard_size=None, log_path=None):
        self.model_config = model_config
        self.train_config = train_config
        self.vocab = vocab
        self.vocab_size = vocab_size
        self.shard_size = shard_size
        self.log_path = log_path

    def fit(self, X, y, image_ids=None):
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 3:
            raise ValueError(f"expected N x H x W images, got shape {X.shape}")
        if len(y) != len(X):
            raise ValueError("one caption list per image is required")
        tc = self.train_config or TrainConfig.toy()
        captions = [[c] if isinstance(c, str) else list(c) for c in y]
        corpus = sorted({c for cs in captions for c in cs})
        self.vocab_ = self.vocab or train_bpe(corpus, self.vocab_size)
        mc = self.model_config or ModelConfig.toy(vocab_size=self.vocab_.vocab_size, image_size=X.shape[1])
        torch.manual_seed(tc.seed)
        self.model_ = DualEncoder(mc)
        ids = list(image_ids) if image_ids is not None else [f"i{k}" for k in range(len(X))]
        rng = np.random.default_rng(tc.seed)
        entries = []
        for k in rng.permutation(len(X)):
            ci = int(rng.integers(len(captions[k])))
            entries.append(ShardEntry(ids[k], "", captions[k][ci], ci))
        size = self.shard_size or len(entries)
        shards = [entries[i:i + size] for i in range(0, len(entries), size)]
        token_rows = dict(zip(corpus, encode_batch(corpus, self.vocab_, mc.max_tokens)))
        self.checkpoints_ = train(shards, self.model_, tc, dict(zip(ids, X)), token_rows,
                                  log_path=self.log_path, caption_sets=dict(zip(ids, captions)))
        self.loss_curve_ = [c.loss for c in self.checkpoints_]
        return self

    def transform(self, X):
        return embed_images(self.model_, np.asarray(X, dtype=np.float32))


__all__ = [
    "Checkpoint",
    "ConfigurationError",
    "ContrastivePretrainer",
    "TrainConfig",
    "clip_loss",
    "lr_at",
    "pick_best",
    "select_checkpoint",
    "shard_batches",
    "train",
]
