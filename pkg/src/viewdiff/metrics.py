"""Image quality metrics: PSNR, an LPIPS-style perceptual distance, embedding
cosine similarity and a Frechet distance on pooled embeddings.

The learned metrics use an :class:`ImageEncoder` as their feature backbone.
:func:`metric_encoder` builds a fixed-seed one so that scores from different
checkpoints are measured with the same features. The numbers are analogues of
LPIPS/CLIP-similarity/FID, not comparable with published values.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autograd import Tensor, no_grad
from .conditioning import ImageEncoder
from .errors import ShapeMismatch, TooFewSamples

METRIC_SEED = 20240229
METRIC_EMBED_DIM = 16


def metric_encoder(resolution: int = 32) -> ImageEncoder:
    """Deterministic float64 encoder with a 16-d pooled embedding."""
    n_tok = (resolution // 8) ** 2
    return ImageEncoder(np.random.default_rng(METRIC_SEED), resolution, 32, METRIC_EMBED_DIM, n_tok, np.float64)


def _batch(images) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    return arr[None] if arr.ndim == 3 else arr


def psnr(a, b, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the images are identical."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"psnr of {a.shape} and {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def embed(images, encoder: ImageEncoder) -> np.ndarray:
    """Pooled embeddings ``[n, d_embed]`` of a batch of images."""
    with no_grad():
        pooled, _ = encoder(Tensor(_batch(images), dtype=encoder.pool.weight.dtype))
    return pooled.numpy().astype(np.float64)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 1.0 if np.array_equal(u, v) else 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def embed_similarity(a, b, encoder: ImageEncoder) -> float:
    """Cosine similarity of the pooled embeddings of two images."""
    ea, eb = embed(np.stack([np.asarray(a), np.asarray(b)]), encoder)
    return cosine(ea, eb)


def _unit(f: np.ndarray) -> np.ndarray:
    return f / (np.sqrt((f * f).sum(axis=1, keepdims=True)) + 1e-10)


def perceptual_distance(a, b, encoder: ImageEncoder):
    """Channel-normalised feature distance averaged over space and encoder stages.

    Works on single images (returns a float) or equal-size batches (returns
    one distance per pair).
    """
    xa, xb = _batch(a), _batch(b)
    if xa.shape != xb.shape:
        raise ShapeMismatch(f"perceptual distance of {xa.shape} and {xb.shape}")
    dtype = encoder.pool.weight.dtype
    with no_grad():
        fa = encoder.features(Tensor(xa, dtype=dtype))
        fb = encoder.features(Tensor(xb, dtype=dtype))
    per_layer = [
        ((_unit(p.numpy()) - _unit(q.numpy())) ** 2).sum(axis=1).mean(axis=(1, 2)) for p, q in zip(fa, fb)
    ]
    dist = np.mean(per_layer, axis=0)
    return float(dist[0]) if np.asarray(a).ndim == 3 else dist


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu_a, sigma_a, mu_b, sigma_b) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the cross term is taken from the eigenvalues of the symmetric
    ``S_a^(1/2) S_b S_a^(1/2)``, which has the same spectrum as ``S_a S_b``.
    """
    mu_a, mu_b = np.asarray(mu_a, float), np.asarray(mu_b, float)
    sigma_a, sigma_b = np.asarray(sigma_a, float), np.asarray(sigma_b, float)
    root_a = _sqrt_psd(sigma_a)
    inner = root_a @ sigma_b @ root_a
    eig = np.linalg.eigvalsh((inner + inner.T) / 2)
    cross = np.sqrt(np.clip(eig, 0.0, None)).sum()
    d = mu_a - mu_b
    return max(0.0, float(d @ d + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * cross))


def fid_from_features(fa: np.ndarray, fb: np.ndarray) -> float:
    fa, fb = np.asarray(fa, float), np.asarray(fb, float)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise ShapeMismatch(f"feature sets {fa.shape} and {fb.shape} must be [n, d] with equal d")
    d = fa.shape[1]
    for name, f in (("first", fa), ("second", fb)):
        if len(f) < d + 1:
            raise TooFewSamples(f"{name} set has {len(f)} samples; need at least {d + 1} for {d}-d features")
    cov_a = np.atleast_2d(np.cov(fa, rowvar=False))
    cov_b = np.atleast_2d(np.cov(fb, rowvar=False))
    return frechet_distance(fa.mean(0), cov_a, fb.mean(0), cov_b)


def fid(set_a: Sequence, set_b: Sequence, encoder: ImageEncoder) -> float:
    """Frechet distance between Gaussian fits of two image sets' pooled embeddings."""
    return fid_from_features(embed(set_a, encoder), embed(set_b, encoder))
