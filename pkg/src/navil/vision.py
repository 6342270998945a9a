"""Visual encoder: patch embedding, bidirectional 2D-rotary layers, pixel shuffle and connector MLP."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .config import EncoderConfig
from .decoder import transformer_block
from .numkernel import Tensor

PAD_MULTIPLE = 32


@dataclass
class PatchGrid:
    rows: int
    cols: int
    embeddings: Tensor  # [..., rows * cols, width], row-major over the grid

    def __post_init__(self):
        if self.embeddings.shape[-2] != self.rows * self.cols:
            raise ValueError(f"grid {self.rows}x{self.cols} does not match {self.embeddings.shape[-2]} embeddings")

    @property
    def width(self) -> int:
        return self.embeddings.shape[-1]

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        r, c = np.divmod(np.arange(self.rows * self.cols), self.cols)
        return r, c


def pad_image(img, multiple: int = PAD_MULTIPLE) -> np.ndarray:
    """Zero-pad bottom/right so both sides are multiples of ``multiple``."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {img.shape}")
    H, W = img.shape[:2]
    if H < 1 or W < 1:
        raise ValueError("empty image")
    Hp, Wp = -(-H // multiple) * multiple, -(-W // multiple) * multiple
    if (Hp, Wp) == (H, W):
        return img
    out = np.zeros((Hp, Wp, 3))
    out[:H, :W] = img
    return out


def patchify(images: np.ndarray, stride: int) -> np.ndarray:
    """``[B, H, W, 3] -> [B, rows*cols, stride*stride*3]``, each patch flattened as (y, x, channel)."""
    B, H, W, C = images.shape
    if H % stride or W % stride:
        raise ValueError(f"image {H}x{W} not aligned to patch stride {stride}")
    r, c = H // stride, W // stride
    p = images.reshape(B, r, stride, c, stride, C).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(p.reshape(B, r * c, stride * stride * C))


def patch_embed(images, cfg: EncoderConfig, store: Mapping[str, Tensor]) -> PatchGrid:
    """Linear projection of non-overlapping stride x stride patches. Accepts ``[H,W,3]`` or ``[B,H,W,3]``."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    s = cfg.patch_stride
    patches = patchify(images, s)
    emb = nk.add(nk.matmul(Tensor._wrap(patches), store["vision.patch.weight"]), store["vision.patch.bias"])
    if single:
        emb = nk.reshape(emb, emb.shape[1:])
    return PatchGrid(images.shape[1] // s, images.shape[2] // s, emb)


def encoder_forward(grid: PatchGrid, cfg: EncoderConfig, store: Mapping[str, Tensor],
                    record: list | None = None) -> PatchGrid:
    """``depth`` bidirectional pre-norm layers with 2D rotary positions; depth 0 is the identity."""
    if grid.width != cfg.width:
        raise ValueError(f"grid width {grid.width} != encoder width {cfg.width}")
    if cfg.depth == 0:
        return grid
    x = grid.embeddings
    single = len(x.shape) == 2
    if single:
        x = nk.reshape(x, (1, *x.shape))
    rows, cols = grid.coords()
    route = np.zeros(x.shape[:2], dtype=np.int64)

    def rotate(t):
        return nk.rope_2d(t, rows, cols)

    for i in range(cfg.depth):
        x = transformer_block(x, route, store, f"vision.layers.{i}", cfg.heads, rotate, False, 1e-6,
                              experts=("",), record=record)
    if single:
        x = nk.reshape(x, x.shape[1:])
    return PatchGrid(grid.rows, grid.cols, x)


def pixel_shuffle(grid: PatchGrid, factor: int) -> PatchGrid:
    """Merge each factor x factor block into one embedding (block entries concatenated row-major)."""
    if grid.rows % factor or grid.cols % factor:
        raise ValueError(f"grid {grid.rows}x{grid.cols} not divisible by shuffle factor {factor}")
    if factor == 1:
        return grid
    x = grid.embeddings
    lead = x.shape[:-2]
    w = x.shape[-1]
    R, C = grid.rows // factor, grid.cols // factor
    n = len(lead)
    x = nk.reshape(x, (*lead, R, factor, C, factor, w))
    x = nk.transpose(x, (*range(n), n, n + 2, n + 1, n + 3, n + 4))
    x = nk.reshape(x, (*lead, R * C, factor * factor * w))
    return PatchGrid(R, C, x)


def pixel_unshuffle(grid: PatchGrid, factor: int) -> PatchGrid:
    """Inverse of :func:`pixel_shuffle`."""
    if factor == 1:
        return grid
    x = grid.embeddings
    lead = x.shape[:-2]
    w = x.shape[-1] // (factor * factor)
    R, C = grid.rows, grid.cols
    n = len(lead)
    x = nk.reshape(x, (*lead, R, C, factor, factor, w))
    x = nk.transpose(x, (*range(n), n, n + 2, n + 1, n + 3, n + 4))
    x = nk.reshape(x, (*lead, R * factor * C * factor, w))
    return PatchGrid(R * factor, C * factor, x)


def connector(grid: PatchGrid, cfg: EncoderConfig, store: Mapping[str, Tensor]) -> Tensor:
    """Two-layer MLP (linear, SiLU, linear) from shuffled encoder features to the decoder width."""
    w1 = store["vision.connector.w1"]
    if grid.width != w1.shape[0]:
        raise ValueError(f"connector expects width {w1.shape[0]}, got {grid.width}")
    h = nk.silu(nk.add(nk.matmul(grid.embeddings, w1), store["vision.connector.b1"]))
    return nk.add(nk.matmul(h, store["vision.connector.w2"]), store["vision.connector.b2"])


def encode(images, cfg: EncoderConfig, store: Mapping[str, Tensor], record: list | None = None) -> Tensor:
    """Full visual path for same-sized images: ``[B,H,W,3] -> [B, tokens, out_width]``."""
    grid = encoder_forward(patch_embed(images, cfg, store), cfg, store, record)
    return connector(pixel_shuffle(grid, cfg.shuffle_factor), cfg, store)


def token_grid(height: int, width: int, cfg: EncoderConfig) -> tuple[int, int]:
    """Rows and columns of connector tokens for a padded image."""
    f = cfg.patch_stride * cfg.shuffle_factor
    if height % f or width % f:
        raise ValueError(f"image {height}x{width} not divisible by stride*factor = {f}")
    return height // f, width // f


def layer_param_count(store: Mapping[str, Tensor]) -> int:
    """Parameters in the encoder layer stack (patch embedding and connector excluded)."""
    return sum(t.data.size for n, t in store.items() if n.startswith("vision.layers."))
