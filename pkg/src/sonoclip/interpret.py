"""Score-weighted activation maps and 2-D embedding projections."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F


class DegenerateInputError(ValueError):
    pass


def _minmax(a: torch.Tensor, dims=(-2, -1)) -> torch.Tensor:
    lo = a.amin(dim=dims, keepdim=True)
    hi = a.amax(dim=dims, keepdim=True)
    span = hi - lo
    # constant maps carry no spatial information and become all-zero
    return torch.where(span > 0, (a - lo) / torch.where(span > 0, span, torch.ones_like(span)), torch.zeros_like(a))


def combine_maps(maps: torch.Tensor, scores: torch.Tensor) -> torch.Tensor:
    """ReLU of the softmax(scores)-weighted sum of K x H x W maps, scaled to [0, 1]."""
    w = torch.softmax(scores.double(), dim=0).to(maps.dtype)
    cam = F.relu((w[:, None, None] * maps).sum(0))
    return _minmax(cam)


@torch.no_grad()
def scorecam(
    image,
    text_embedding,
    model,
    layer: int | None = None,
    temperature: float = 1.0,
    batch_size: int = 64,
) -> np.ndarray:
    """Saliency of ``image`` (H x W) towards a target text embedding.

    Each token-feature map at ``layer`` (1-based, default the last block) is
    normalised, upsampled and used to mask the input. The masked image's
    cosine to the target, divided by ``temperature``, weights that map.
    """
    model.eval()
    x = torch.as_tensor(np.asarray(image, dtype=np.float32))
    if x.dim() != 2:
        raise ValueError(f"expected an H x W image, got shape {tuple(x.shape)}")
    if float(x.max() - x.min()) == 0.0:
        raise DegenerateInputError("constant image: activation maps cannot be normalised")
    t = torch.as_tensor(np.asarray(text_embedding, dtype=np.float32))
    if not torch.isfinite(t).all() or float(t.norm()) == 0:
        raise ValueError("target embedding must be finite and nonzero")
    t = t / t.norm()
    layer = layer or model.cfg.vision_layers
    grid = model.token_grids(x[None], [layer])[0][0]  # K x g x g
    maps = F.interpolate(_minmax(grid)[None], size=x.shape, mode="bilinear", align_corners=False)[0]
    maps = _minmax(maps)
    scores = []
    for i in range(0, len(maps), batch_size):
        masked = maps[i:i + batch_size] * x[None]
        scores.append(model.encode_image(masked) @ t)
    scores = torch.cat(scores) / temperature
    return combine_maps(maps, scores).numpy()


def saliency_ratio(saliency, region, within=None) -> float:
    """Mean saliency inside ``region`` over mean saliency in ``within`` but outside ``region``."""
    s = np.asarray(saliency, dtype=float)
    region = np.asarray(region, dtype=bool)
    within = np.ones_like(region) if within is None else np.asarray(within, dtype=bool)
    outside = within & ~region
    if not region.any() or not outside.any():
        raise ValueError("region and its complement must both be nonempty")
    out = s[outside].mean()
    return float("inf") if out == 0 else float(s[region].mean() / out)


def project_embeddings(embeddings, method: str = "pca", seed: int = 0, n_neighbors: int = 15) -> np.ndarray:
    """N x 2 layout of an embedding set.

    ``pca`` returns scores on the two leading components, each oriented so
    its largest-magnitude loading is positive. ``umap-like`` is a spectral
    layout of the k-nearest-neighbour graph.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("embeddings must be an N x d matrix")
    if X.shape[1] < 2:
        raise ValueError("need at least 2 embedding dimensions")
    if X.shape[0] < 3:
        raise ValueError("need at least 3 points")
    if method == "pca":
        Xc = X - X.mean(axis=0)
        _, _, vt = np.linalg.svd(Xc, full_matrices=False)
        comps = vt[:2]
        mag = np.abs(comps)
        # first loading within rounding of the maximum, so near-ties resolve stably
        lead = np.argmax(mag >= mag.max(axis=1, keepdims=True) * (1 - 1e-8), axis=1)
        signs = np.sign(comps[np.arange(len(comps)), lead])
        comps = comps * np.where(signs == 0, 1.0, signs)[:, None]
        return Xc @ comps.T
    if method == "umap-like":
        from sklearn.manifold import SpectralEmbedding

        k = min(n_neighbors, X.shape[0] - 1)
        return SpectralEmbedding(n_components=2, affinity="nearest_neighbors", n_neighbors=k,
                                 random_state=seed).fit_transform(X)
    raise ValueError(f"unknown method {method!r}")


def write_projection(path, coords, labels=None) -> None:
    with open(path, "w") as fh:
        fh.write("x\ty" + ("\tlabel" if labels is not None else "") + "\n")
        for i, (a, b) in enumerate(np.asarray(coords)):
            fh.write(f"{a:.6f}\t{b:.6f}" + (f"\t{labels[i]}" if labels is not None else "") + "\n")


def save_overlay(path, image, saliency, alpha: float = 0.5) -> None:
    """Grayscale PNG blending the image with its saliency map."""
    import cv2

    img = np.asarray(image, dtype=float)
    blend = (1 - alpha) * img + alpha * np.asarray(saliency, dtype=float)
    cv2.imwrite(str(path), (np.clip(blend, 0, 1) * 255).round().astype(np.uint8))


__all__ = [
    "DegenerateInputError",
    "combine_maps",
    "project_embeddings",
    "saliency_ratio",
    "save_overlay",
    "scorecam",
    "write_projection",
]
