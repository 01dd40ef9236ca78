"""Heads trained on a frozen encoder: linear probe, video clips, segmentation decoder."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

CLIP_LENGTH = 16
CLIP_STRIDE = 4
CLIP_SPAN = CLIP_STRIDE * (CLIP_LENGTH - 1) + 1  # 61
SHORT_VIDEO_MAX = 64


class DegenerateDataError(ValueError):
    pass


# --------------------------------------------------------------------------- video clips

@dataclass(frozen=True)
class ClipSample:
    video_id: str
    indices: tuple[int, ...]

    def __post_init__(self):
        if len(self.indices) != CLIP_LENGTH:
            raise ValueError(f"a clip has exactly {CLIP_LENGTH} frames")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError("clip indices must be strictly increasing")

    @property
    def span(self) -> int:
        return self.indices[-1] - self.indices[0] + 1


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(int)


def sample_clips(n_frames: int, video_id: str = "") -> list[ClipSample]:
    """Sixteen-frame clips covering a video.

    Short videos (<= 64 frames) yield one clip spread over the whole length.
    Longer ones yield overlapping stride-4 clips with evenly spaced starts.
    """
    if not 16 <= n_frames <= 128:
        raise ValueError(f"video length {n_frames} outside [16, 128]")
    if n_frames <= SHORT_VIDEO_MAX:
        idx = _round_half_up(np.linspace(0, n_frames - 1, CLIP_LENGTH))
        return [ClipSample(video_id, tuple(int(i) for i in idx))]
    n_clips = math.ceil((n_frames - 60) / 8)
    starts = _round_half_up(np.linspace(0, n_frames - CLIP_SPAN, n_clips))
    offsets = np.arange(CLIP_LENGTH) * CLIP_STRIDE
    return [ClipSample(video_id, tuple(int(s + o) for o in offsets)) for s in starts]


def coverage(n_frames: int) -> float:
    """Smallest clip span divided by video length."""
    return min(c.span for c in sample_clips(n_frames)) / n_frames


def combine_frames(frame_embs, mode: str = "average") -> np.ndarray:
    frame_embs = np.asarray(frame_embs)
    if frame_embs.ndim != 2 or frame_embs.shape[0] != CLIP_LENGTH:
        raise ValueError(f"expected {CLIP_LENGTH} x d frame embeddings, got shape {frame_embs.shape}")
    if mode == "average":
        return frame_embs.mean(axis=0)
    if mode == "concatenate":
        return frame_embs.reshape(-1)
    raise ValueError(f"unknown mode {mode!r}")


def clip_features(videos: Sequence[np.ndarray], embed, mode: str = "average"):
    """Per-clip features for a list of T x H x W videos.

    ``embed`` maps an n x H x W frame stack to n x d embeddings. Returns the
    feature matrix and, for each row, the index of its source video.
    """
    feats, owner = [], []
    for v, video in enumerate(videos):
        clips = sample_clips(len(video), str(v))
        needed = sorted({i for c in clips for i in c.indices})
        embs = dict(zip(needed, embed(np.asarray(video)[needed])))
        for c in clips:
            feats.append(combine_frames(np.stack([embs[i] for i in c.indices]), mode))
            owner.append(v)
    return np.stack(feats), np.asarray(owner)


def video_scores(clip_probs, owner) -> np.ndarray:
    """Average clip probabilities into one score per video."""
    owner = np.asarray(owner)
    return np.array([np.mean(np.asarray(clip_probs)[owner == v]) for v in np.unique(owner)])


# --------------------------------------------------------------------------- linear probe

def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Affine head trained by full-batch gradient descent on standardized features.

    Two classes use a single logit with binary cross-entropy, more classes
    use softmax cross-entropy. When validation data is passed to ``fit`` the
    weights with the lowest validation loss are kept.
    """

    def __init__(self, lr=0.5, epochs=300, l2=1e-4, seed=0):
        self.lr = lr
        self.epochs = epochs
        self.l2 = l2
        self.seed = seed

    def _logits(self, Z, W, b):
        return Z @ W + b

    def _loss_grad(self, Z, Y, W, b):
        n = len(Z)
        logits = self._logits(Z, W, b)
        if self.binary_:
            p = 1 / (1 + np.exp(-logits))
            eps = 1e-12
            loss = -np.mean(Y * np.log(p + eps) + (1 - Y) * np.log(1 - p + eps))
        else:
            p = _softmax(logits)
            loss = -np.mean(np.log(p[Y.astype(bool)] + 1e-12))
        d = (p - Y) / n
        return loss + 0.5 * self.l2 * np.sum(W * W), Z.T @ d + self.l2 * W, d.sum(axis=0)

    def _targets(self, y):
        idx = np.searchsorted(self.classes_, y)
        if self.binary_:
            return idx[:, None].astype(float)
        return np.eye(len(self.classes_))[idx]

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y)
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise DegenerateDataError("training labels contain a single class")
        self.binary_ = len(self.classes_) == 2
        self.mean_ = X.mean(axis=0)
        self.scale_ = X.std(axis=0)
        self.scale_[self.scale_ == 0] = 1.0
        Z = (X - self.mean_) / self.scale_
        Y = self._targets(y)
        k = 1 if self.binary_ else len(self.classes_)
        rng = np.random.default_rng(self.seed)
        W = rng.normal(0, 0.01, (X.shape[1], k))
        b = np.zeros(k)
        has_val = X_val is not None and len(X_val) > 0
        if has_val:
            Zv = (check_array(X_val) - self.mean_) / self.scale_
            unseen = set(np.asarray(y_val).tolist()) - set(self.classes_.tolist())
            Yv = self._targets(np.asarray(y_val)) if not unseen else None
            has_val = Yv is not None
        best = (np.inf, W.copy(), b.copy())
        self.loss_curve_ = []
        for _ in range(self.epochs):
            loss, gW, gb = self._loss_grad(Z, Y, W, b)
            W -= self.lr * gW
            b -= self.lr * gb
            monitor = self._loss_grad(Zv, Yv, W, b)[0] if has_val else loss
            self.loss_curve_.append(float(monitor))
            if monitor < best[0]:
                best = (monitor, W.copy(), b.copy())
        self.best_loss_, self.coef_, self.intercept_ = best
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        Z = (check_array(X) - self.mean_) / self.scale_
        out = self._logits(Z, self.coef_, self.intercept_)
        return out[:, 0] if self.binary_ else out

    def predict_proba(self, X):
        logits = self.decision_function(X)
        if self.binary_:
            p = 1 / (1 + np.exp(-logits))
            return np.column_stack([1 - p, p])
        return _softmax(logits)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


def fit_linear_probe(features, labels, X_val=None, y_val=None, **hyperparams) -> LinearProbe:
    return LinearProbe(**hyperparams).fit(features, labels, X_val, y_val)


def linear_probe_trainer(**hyperparams):
    """Adapter for the evaluation harnesses: (Xtr, ytr, Xva, yva, seed) -> fitted probe."""

    def trainer(Xtr, ytr, Xva, yva, seed):
        return LinearProbe(seed=seed, **hyperparams).fit(Xtr, ytr, Xva, yva)

    return trainer


# --------------------------------------------------------------------------- embeddings file

_MAGIC = b"SCEMB1\0\0"
_DTYPES = {"f4": np.float32, "f8": np.float64}


def save_embeddings(path, matrix) -> None:
    """Binary matrix: magic, uint64 count, uint64 dim, 8-byte dtype tag, row-major little-endian data."""
    m = np.ascontiguousarray(matrix)
    tag = {np.dtype(np.float32): "f4", np.dtype(np.float64): "f8"}.get(m.dtype)
    if tag is None or m.ndim != 2:
        raise ValueError("embeddings must be a 2-D float32 or float64 matrix")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<QQ8s", m.shape[0], m.shape[1], tag.encode()))
        fh.write(m.astype(m.dtype.newbyteorder("<"), copy=False).tobytes())


def load_embeddings(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path} is not an embeddings file")
    n, d, tag = struct.unpack_from("<QQ8s", raw, 8)
    dtype = np.dtype(_DTYPES[tag.rstrip(b"\0").decode()]).newbyteorder("<")
    data = np.frombuffer(raw, dtype=dtype, offset=32)
    if data.size != n * d:
        raise ValueError(f"{path}: expected {n * d} values, found {data.size}")
    return data.reshape(n, d).astype(dtype.newbyteorder("="))


# --------------------------------------------------------------------------- segmentation

@dataclass(frozen=True)
class SegDecoderConfig:
    hidden: int
    n_layers: int
    patch_size: int
    image_size: int
    in_channels: int = 3
    n_structures: int = 1
    feature_size: int = 46
    kernel_size: int = 3
    budget: int = 1_700_000

    def __post_init__(self):
        if self.kernel_size != 3:
            raise ValueError("decoder blocks use 3x3 kernels")
        if self.n_layers < 4 or self.n_layers % 4:
            raise ValueError("encoder depth must be a positive multiple of 4")
        n = math.log2(self.patch_size)
        if n != int(n) or self.image_size % self.patch_size:
            raise ValueError(
                f"patch size {self.patch_size} cannot be undone by x2 upsampling to reach {self.image_size}"
            )

    @property
    def taps(self) -> tuple[int, int, int, int]:
        q = self.n_layers // 4
        return (q, 2 * q, 3 * q, 4 * q)

    @property
    def n_up(self) -> int:
        return int(math.log2(self.patch_size))

    def channels(self, stage: int) -> int:
        return self.feature_size * 2 ** (self.n_up - stage)


class SepConv(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.depthwise = nn.Conv2d(cin, cin, 3, padding=1, groups=cin)
        self.pointwise = nn.Conv2d(cin, cout, 1)
        self.norm = nn.GroupNorm(1, cout)

    def forward(self, x):
        return F.gelu(self.norm(self.pointwise(self.depthwise(x))))


class UpBlock(nn.Module):
    """x2 depthwise transposed convolution followed by a pointwise mix."""

    def __init__(self, cin, cout):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cin, 2, stride=2, groups=cin)
        self.pointwise = nn.Conv2d(cin, cout, 1)
        self.norm = nn.GroupNorm(1, cout)

    def forward(self, x):
        return F.gelu(self.norm(self.pointwise(self.up(x))))


class SegDecoder(nn.Module):
    """Lightweight 2-D UNETR-style decoder over four encoder token grids.

    The deepest tap seeds the upsampling path. Shallower taps enter
    progressively finer stages through their own upsampling chains, and the
    raw image joins at full resolution. Each stage fuses by concatenation
    followed by a depthwise-separable convolution.
    """

    def __init__(self, cfg: SegDecoderConfig):
        super().__init__()
        self.cfg = cfg
        n = cfg.n_up
        c = cfg.channels
        self.bottleneck = UpBlock(cfg.hidden, c(1))
        # taps 3L/4, L/2, L/4 land at stages 1, 2, 3 (capped at the last stage)
        self.skip_stage = [min(k, n) for k in (1, 2, 3)]
        self.skips = nn.ModuleList()
        for s in self.skip_stage:
            chain = [UpBlock(cfg.hidden, c(s))] + [UpBlock(c(s), c(s)) for _ in range(s - 1)]
            self.skips.append(nn.Sequential(*chain))
        self.image_skip = SepConv(cfg.in_channels, c(n))
        self.fuse = nn.ModuleList(SepConv(2 * c(k), c(k)) for k in range(1, n + 1))
        self.up = nn.ModuleList(UpBlock(c(k), c(k + 1)) for k in range(1, n))
        self.head = nn.Conv2d(c(n), cfg.n_structures, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, taps: Sequence[torch.Tensor], image: torch.Tensor) -> torch.Tensor:
        """Logits N_s x H x W from taps (shallow to deep) and the input image."""
        if len(taps) != 4:
            raise ValueError("expected four encoder taps")
        if image.dim() == 3:
            image = image.unsqueeze(1)
        if image.shape[1] != self.cfg.in_channels:
            image = image.expand(-1, self.cfg.in_channels, -1, -1)
        n = self.cfg.n_up
        skips: dict[int, torch.Tensor] = {}
        for tap, s, chain in zip(reversed(taps[:3]), self.skip_stage, self.skips):
            y = chain(tap)
            skips[s] = skips[s] + y if s in skips else y
        img = self.image_skip(image)
        skips[n] = skips[n] + img if n in skips else img
        x = self.bottleneck(taps[3])
        for k in range(1, n + 1):
            x = self.fuse[k - 1](torch.cat([x, skips[k]], dim=1))
            if k < n:
                x = self.up[k - 1](x)
        return self.head(x)


def build_seg_decoder(cfg: SegDecoderConfig) -> SegDecoder:
    dec = SegDecoder(cfg)
    n = count_parameters(dec)
    if n > cfg.budget:
        raise ValueError(f"decoder has {n} parameters, above the {cfg.budget} budget")
    return dec


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def seg_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Per-channel binary cross-entropy plus soft Dice, equally weighted."""
    bce = F.binary_cross_entropy_with_logits(logits, target)
    p = torch.sigmoid(logits)
    inter = (p * target).sum(dim=(2, 3))
    denom = p.sum(dim=(2, 3)) + target.sum(dim=(2, 3))
    dice = 1 - (2 * inter + eps) / (denom + eps)
    return bce + dice.mean()


def per_structure_dsc(pred, true) -> np.ndarray:
    """Mean DSC per channel over a batch of N x S x H x W binary masks."""
    from .metrics import dsc

    pred, true = np.asarray(pred, dtype=bool), np.asarray(true, dtype=bool)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    return np.array([np.mean([dsc(p[s], t[s]) for p, t in zip(pred, true)]) for s in range(pred.shape[1])])


@torch.no_grad()
def encoder_taps(model, images, layers: Sequence[int], batch_size: int = 128) -> list[torch.Tensor]:
    """Token grids of a frozen encoder at the tap layers."""
    model.eval()
    images = torch.as_tensor(np.asarray(images, dtype=np.float32))
    parts = [model.token_grids(images[i:i + batch_size], layers) for i in range(0, len(images), batch_size)]
    return [torch.cat([p[k] for p in parts]) for k in range(len(layers))]


class SegmentationProbe(BaseEstimator):
    """Decoder trained on taps of a frozen dual encoder.

    ``fit(images, masks)`` takes N x H x W images and N x S x H x W binary
    masks; the encoder is never updated.
    """

    def __init__(self, encoder=None, feature_size=16, epochs=30, lr=2e-3, batch_size=32, seed=0):
        self.encoder = encoder
        self.feature_size = feature_size
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def _config(self, n_structures):
        mc = self.encoder.cfg
        return SegDecoderConfig(
            hidden=mc.vision_width, n_layers=mc.vision_layers, patch_size=mc.patch_size,
            image_size=mc.image_size, in_channels=mc.in_channels, n_structures=n_structures,
            feature_size=self.feature_size,
        )

    def fit(self, X, masks):
        X = np.asarray(X, dtype=np.float32)
        masks = np.asarray(masks, dtype=np.float32)
        if masks.ndim == 3:
            masks = masks[:, None]
        if masks.shape[0] != X.shape[0] or masks.shape[-2:] != X.shape[-2:]:
            raise ValueError(f"mask shape {masks.shape} does not match images {X.shape}")
        torch.manual_seed(self.seed)
        cfg = self._config(masks.shape[1])
        self.decoder_ = build_seg_decoder(cfg)
        taps = encoder_taps(self.encoder, X, cfg.taps)
        images = torch.from_numpy(X)
        target = torch.from_numpy(masks)
        opt = torch.optim.Adam(self.decoder_.parameters(), lr=self.lr)
        gen = torch.Generator().manual_seed(self.seed)
        self.loss_curve_ = []
        self.decoder_.train()
        for _ in range(self.epochs):
            perm = torch.randperm(len(X), generator=gen)
            total = 0.0
            for i in range(0, len(X), self.batch_size):
                b = perm[i:i + self.batch_size]
                loss = seg_loss(self.decoder_([t[b] for t in taps], images[b]), target[b])
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total += loss.item() * len(b)
            self.loss_curve_.append(total / len(X))
        self.decoder_.eval()
        return self

    @torch.no_grad()
    def predict_proba(self, X):
        check_is_fitted(self, "decoder_")
        X = np.asarray(X, dtype=np.float32)
        taps = encoder_taps(self.encoder, X, self.decoder_.cfg.taps)
        out = [torch.sigmoid(self.decoder_([t[i:i + 128] for t in taps], torch.from_numpy(X[i:i + 128])))
               for i in range(0, len(X), 128)]
        return torch.cat(out).numpy()

    def predict(self, X):
        return self.predict_proba(X) > 0.5

    def score(self, X, masks):
        masks = np.asarray(masks)
        if masks.ndim == 3:
            masks = masks[:, None]
        return float(per_structure_dsc(self.predict(X), masks).mean())


def train_seg(encoder, images, masks, **params) -> tuple[SegmentationProbe, np.ndarray]:
    """Fit a segmentation probe; returns it with per-structure training DSC."""
    probe = SegmentationProbe(encoder, **params).fit(images, masks)
    m = np.asarray(masks)
    return probe, per_structure_dsc(probe.predict(images), m if m.ndim == 4 else m[:, None])


__all__ = [
    "ClipSample",
    "DegenerateDataError",
    "LinearProbe",
    "SegDecoder",
    "SegDecoderConfig",
    "SegmentationProbe",
    "build_seg_decoder",
    "clip_features",
    "combine_frames",
    "count_parameters",
    "coverage",
    "encoder_taps",
    "fit_linear_probe",
    "linear_probe_trainer",
    "load_embeddings",
    "per_structure_dsc",
    "sample_clips",
    "save_embeddings",
    "seg_loss",
    "train_seg",
    "video_scores",
]
