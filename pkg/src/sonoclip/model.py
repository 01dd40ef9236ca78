"""Dual encoder: patch ViT image tower, causal text transformer, shared space."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .tokenizer import EOT_ID, MAX_TOKENS

CHECKPOINT_FORMAT = 1
MIN_TEMPERATURE = 0.01


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_size: int = 14
    in_channels: int = 3
    vision_layers: int = 24
    vision_width: int = 1024
    vision_heads: int = 16
    text_layers: int = 12
    text_width: int = 768
    text_heads: int = 12
    embed_dim: int = 768
    vocab_size: int = 49408
    max_tokens: int = MAX_TOKENS
    mlp_ratio: int = 4
    temperature_init: float = 0.07
    pixel_mean: float = 0.45
    pixel_std: float = 0.27

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.pixel_std <= 0:
            raise ValueError("pixel_std must be positive")
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")
        if self.vision_width % self.vision_heads or self.text_width % self.text_heads:
            raise ValueError("tower width must be divisible by its head count")

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        base = dict(
            image_size=64, patch_size=8, in_channels=1,
            vision_layers=4, vision_width=128, vision_heads=4,
            text_layers=2, text_width=128, text_heads=4,
            embed_dim=128, vocab_size=2048,
            pixel_mean=0.25, pixel_std=0.2,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size


def block_params(width: int, mlp_ratio: int = 4) -> int:
    hidden = mlp_ratio * width
    return 2 * 2 * width + 3 * width * width + 3 * width + width * width + width + 2 * width * hidden + hidden + width


def vision_param_count(cfg: ModelConfig) -> int:
    w = cfg.vision_width
    n_tok = cfg.grid_size ** 2 + 1
    return (
        cfg.in_channels * cfg.patch_size ** 2 * w
        + w
        + n_tok * w
        + cfg.vision_layers * block_params(w, cfg.mlp_ratio)
        + 2 * w
        + w * cfg.embed_dim
    )


def text_param_count(cfg: ModelConfig) -> int:
    w = cfg.text_width
    return (
        cfg.vocab_size * w
        + cfg.max_tokens * w
        + cfg.text_layers * block_params(w, cfg.mlp_ratio)
        + 2 * w
        + w * cfg.embed_dim
    )


class Block(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.heads = heads
        self.ln_1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.out_proj = nn.Linear(width, width)
        self.ln_2 = nn.LayerNorm(width)
        self.fc = nn.Linear(width, mlp_ratio * width)
        self.proj = nn.Linear(mlp_ratio * width, width)

    def attention(self, x, causal: bool):
        b, n, w = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, w // self.heads).permute(2, 0, 3, 1, 4)
        y = F.scaled_dot_product_attention(q, k, v, is_causal=causal)
        return self.out_proj(y.transpose(1, 2).reshape(b, n, w))

    def forward(self, x, causal: bool = False):
        x = x + self.attention(self.ln_1(x), causal)
        return x + self.proj(F.gelu(self.fc(self.ln_2(x))))


class VisionTower(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.vision_width
        self.cfg = cfg
        self.conv = nn.Conv2d(cfg.in_channels, w, cfg.patch_size, cfg.patch_size, bias=False)
        self.class_token = nn.Parameter(torch.zeros(w))
        self.pos = nn.Parameter(torch.zeros(cfg.grid_size ** 2 + 1, w))
        self.blocks = nn.ModuleList(Block(w, cfg.vision_heads, cfg.mlp_ratio) for _ in range(cfg.vision_layers))
        self.ln_post = nn.LayerNorm(w)
        self.proj = nn.Parameter(torch.zeros(w, cfg.embed_dim))

    def forward(self, images: torch.Tensor, return_hidden: bool = False):
        cfg = self.cfg
        if images.dim() == 3:
            images = images.unsqueeze(1)
        if images.shape[-2:] != (cfg.image_size, cfg.image_size):
            raise ValueError(f"expected {cfg.image_size}x{cfg.image_size} images, got {tuple(images.shape[-2:])}")
        if images.shape[1] != cfg.in_channels:
            if images.shape[1] == 1:
                images = images.expand(-1, cfg.in_channels, -1, -1)
            else:
                raise ValueError(f"expected {cfg.in_channels} channels, got {images.shape[1]}")
        x = self.conv((images - cfg.pixel_mean) / cfg.pixel_std).flatten(2).transpose(1, 2)
        cls = self.class_token.expand(x.shape[0], 1, -1)
        # no normalisation before the first block: a normalised constant class
        # token would swamp the image signal in the pooled output at init
        x = torch.cat([cls, x], dim=1) + self.pos
        hidden = []
        for blk in self.blocks:
            x = blk(x)
            hidden.append(x)
        pooled = self.ln_post(x[:, 0]) @ self.proj
        return (pooled, hidden) if return_hidden else pooled


class TextTower(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.text_width
        self.cfg = cfg
        self.token_embedding = nn.Embedding(cfg.vocab_size, w)
        self.pos = nn.Parameter(torch.zeros(cfg.max_tokens, w))
        self.blocks = nn.ModuleList(Block(w, cfg.text_heads, cfg.mlp_ratio) for _ in range(cfg.text_layers))
        self.ln_final = nn.LayerNorm(w)
        self.proj = nn.Parameter(torch.zeros(w, cfg.embed_dim))

    def forward(self, ids: torch.Tensor):
        cfg = self.cfg
        if ids.shape[-1] != cfg.max_tokens:
            raise ValueError(f"expected sequences of length {cfg.max_tokens}, got {ids.shape[-1]}")
        if int(ids.max()) >= cfg.vocab_size or int(ids.min()) < 0:
            raise ValueError(f"token id outside [0, {cfg.vocab_size})")
        is_eot = ids == EOT_ID
        eot = torch.where(is_eot.any(1), is_eot.int().argmax(1), torch.full_like(ids[:, 0], cfg.max_tokens - 1))
        # causal attention: positions after the last EOT cannot affect it, so trim them
        n = int(eot.max()) + 1
        x = self.token_embedding(ids[:, :n]) + self.pos[:n]
        for blk in self.blocks:
            x = blk(x, causal=True)
        x = self.ln_final(x)
        return x[torch.arange(x.shape[0]), eot] @ self.proj


class DualEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.visual = VisionTower(cfg)
        self.text = TextTower(cfg)
        self.log_temperature = nn.Parameter(torch.tensor(math.log(cfg.temperature_init)))
        self.reset_parameters()

    def reset_parameters(self, std: float = 0.02) -> None:
        for name, p in self.named_parameters():
            if name == "log_temperature" or ".ln_" in name:
                continue
            if name.endswith(".bias"):
                nn.init.zeros_(p)
            else:
                nn.init.trunc_normal_(p, std=std, a=-2 * std, b=2 * std)

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temperature.exp().clamp(min=MIN_TEMPERATURE)

    def encode_image(self, images, return_hidden: bool = False):
        out = self.visual(images, return_hidden)
        if return_hidden:
            return F.normalize(out[0], dim=-1), out[1]
        return F.normalize(out, dim=-1)

    def encode_text(self, ids):
        return F.normalize(self.text(ids), dim=-1)

    def forward(self, images, ids):
        return self.encode_image(images), self.encode_text(ids), self.temperature

    def token_grids(self, images, layers=None) -> list[torch.Tensor]:
        """Per-layer patch tokens as B x width x g x g maps (class token dropped)."""
        _, hidden = self.visual(images, return_hidden=True)
        g = self.cfg.grid_size
        layers = range(1, len(hidden) + 1) if layers is None else layers
        return [hidden[i - 1][:, 1:].transpose(1, 2).reshape(-1, hidden[i - 1].shape[-1], g, g) for i in layers]


def similarity(image_embs, text_embs, temperature, validate: bool = True, atol: float = 1e-3):
    """Logits ``image_i . text_j / temperature`` for unit-norm inputs."""
    if validate:
        for name, e in (("image", image_embs), ("text", text_embs)):
            e = e.detach().numpy() if isinstance(e, torch.Tensor) else np.asarray(e)
            if np.abs(np.linalg.norm(e, axis=-1) - 1).max() > atol:
                raise ValueError(f"{name} embeddings are not unit-normalised")
    return (image_embs @ text_embs.T) / temperature


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: DualEncoder, **meta) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(model.cfg),
            "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
            "meta": meta,
        },
        path,
    )
    return path


def load_checkpoint(path) -> tuple[DualEncoder, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {blob.get('format')!r}")
    model = DualEncoder(ModelConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob.get("meta", {})


def import_weights(
    model: DualEncoder,
    state_dict: Mapping[str, torch.Tensor],
    rename: Callable[[str], str | None] | None = None,
    strict: bool = False,
) -> list[str]:
    """Copy foreign weights whose renamed key and shape match; returns the loaded keys."""
    own = model.state_dict()
    loaded = []
    for k, v in state_dict.items():
        k2 = rename(k) if rename else k
        if k2 is None or k2 not in own:
            continue
        if own[k2].shape != v.shape:
            if strict:
                raise ValueError(f"shape mismatch for {k2}: {tuple(v.shape)} vs {tuple(own[k2].shape)}")
            continue
        own[k2] = v
        loaded.append(k2)
    if strict and set(loaded) != set(own):
        raise ValueError(f"missing keys: {sorted(set(own) - set(loaded))[:5]}")
    model.load_state_dict(own)
    return loaded


@torch.no_grad()
def embed_images(model: DualEncoder, images, batch_size: int = 256) -> np.ndarray:
    model.eval()
    images = torch.as_tensor(np.asarray(images, dtype=np.float32))
    out = [model.encode_image(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return torch.cat(out).numpy()


@torch.no_grad()
def embed_texts(model: DualEncoder, ids, batch_size: int = 512) -> np.ndarray:
    model.eval()
    ids = torch.as_tensor(np.asarray(ids, dtype=np.int64))
    out = [model.encode_text(ids[i:i + batch_size]) for i in range(0, len(ids), batch_size)]
    return torch.cat(out).numpy()
