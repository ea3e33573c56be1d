"""Frozen stand-ins for the pixel VAE and the ViT encoder.

Neither holds trainable weights: the VAE is an orthogonal projection of
each ``8 x 8 x 3`` pixel block onto 16 separable DCT basis images, and the
ViT is a single randomly initialised transformer block whose weights are
fixed by a seed. The trainable ViT connector lives with the model.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import ConfigurationError


def _dct_matrix(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * x + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


def dct_basis(block: int = 8, in_channels: int = 3, channels: int = 16) -> np.ndarray:
    """``(block*block*in_channels, channels)`` matrix with orthonormal columns.

    Columns enumerate (frequency, channel) pairs in zig-zag frequency order
    with the colour channel varying fastest, so the first ``in_channels``
    columns are the per-channel block means.
    """
    d = _dct_matrix(block)
    freqs = sorted(((u, v) for u in range(block) for v in range(block)),
                   key=lambda uv: (uv[0] + uv[1], uv[0] if (uv[0] + uv[1]) % 2 else uv[1]))
    cols = []
    for u, v in freqs:
        img = np.outer(d[u], d[v])
        for c in range(in_channels):
            full = np.zeros((block, block, in_channels))
            full[:, :, c] = img
            cols.append(full.reshape(-1))
            if len(cols) == channels:
                return np.stack(cols, axis=1)
    raise ConfigurationError("not enough basis functions for the requested channel count")


class ToyVAE:
    """Orthogonal projection encoder, transpose decoder; latents are scaled by ``scale``."""

    def __init__(self, downsample: int = 8, channels: int = 16, in_channels: int = 3, scale: float = 1.0):
        self.downsample = downsample
        self.channels = channels
        self.in_channels = in_channels
        self.scale = float(scale)
        self.basis = dct_basis(downsample, in_channels, channels)

    def _check(self, h: int, w: int) -> None:
        if h % self.downsample or w % self.downsample:
            raise ConfigurationError(f"image {h}x{w} not divisible by {self.downsample}")

    def encode(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        h, w, c = image.shape
        self._check(h, w)
        if c != self.in_channels:
            raise ConfigurationError(f"expected {self.in_channels} channels, got {c}")
        f = self.downsample
        blocks = image.reshape(h // f, f, w // f, f, c).transpose(0, 2, 1, 3, 4).reshape(h // f, w // f, -1)
        return blocks @ self.basis * self.scale

    def decode(self, latent: np.ndarray) -> np.ndarray:
        latent = np.asarray(latent, dtype=np.float64)
        hl, wl, ch = latent.shape
        if ch != self.channels:
            raise ConfigurationError(f"expected {self.channels} latent channels, got {ch}")
        f, c = self.downsample, self.in_channels
        blocks = (latent / self.scale) @ self.basis.T
        return blocks.reshape(hl, wl, f, f, c).transpose(0, 2, 1, 3, 4).reshape(hl * f, wl * f, c)


def _layer_norm(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def sincos_2d(gh: int, gw: int, dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal table ``(gh*gw, dim)``; rows first half, columns second."""
    if dim % 4:
        raise ConfigurationError("2-D sincos embedding needs dim divisible by 4")
    quarter = dim // 4
    freq = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    r, c = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    ar = np.outer(r.reshape(-1), freq)
    ac = np.outer(c.reshape(-1), freq)
    return np.concatenate([np.sin(ar), np.cos(ar), np.sin(ac), np.cos(ac)], axis=1)


class ToyViT:
    """One frozen bidirectional transformer block over ``patch x patch`` pixel patches."""

    def __init__(self, patch: int = 16, dim: int = 32, heads: int = 2, in_channels: int = 3, seed: int = 0):
        if dim % heads:
            raise ConfigurationError("ViT dim must be divisible by heads")
        self.patch, self.dim, self.heads = patch, dim, heads
        rng = np.random.default_rng(seed)
        pdim = patch * patch * in_channels
        self.w_patch = rng.standard_normal((pdim, dim)) / np.sqrt(pdim)
        self.w_qkv = rng.standard_normal((dim, 3 * dim)) / np.sqrt(dim)
        self.w_o = rng.standard_normal((dim, dim)) / np.sqrt(dim)
        self.w_1 = rng.standard_normal((dim, 4 * dim)) / np.sqrt(dim)
        self.w_2 = rng.standard_normal((4 * dim, dim)) / np.sqrt(4 * dim)

    def grid(self, h: int, w: int) -> tuple[int, int]:
        if h % self.patch or w % self.patch:
            raise ConfigurationError(f"image {h}x{w} not divisible by ViT patch {self.patch}")
        return h // self.patch, w // self.patch

    def __call__(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        h, w, c = image.shape
        gh, gw = self.grid(h, w)
        p = self.patch
        patches = image.reshape(gh, p, gw, p, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, -1)
        x = patches @ self.w_patch + sincos_2d(gh, gw, self.dim)
        n, hd = x.shape[0], self.dim // self.heads
        qkv = (_layer_norm(x) @ self.w_qkv).reshape(n, 3, self.heads, hd)
        q, k, v = (qkv[:, i].transpose(1, 0, 2) for i in range(3))
        s = q @ k.transpose(0, 2, 1) / np.sqrt(hd)
        s = np.exp(s - s.max(axis=-1, keepdims=True))
        a = (s / s.sum(axis=-1, keepdims=True)) @ v
        x = x + a.transpose(1, 0, 2).reshape(n, self.dim) @ self.w_o
        x = x + _gelu(_layer_norm(x) @ self.w_1) @ self.w_2
        return _layer_norm(x)


@lru_cache(maxsize=None)
def frozen_vit(patch: int = 16, dim: int = 32, seed: int = 0) -> ToyViT:
    return ToyViT(patch=patch, dim=dim, seed=seed)
