"""Whole-model forward: pyramid -> encoder -> connector -> packed sequence -> decoder logits."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .config import ModelConfig, PackingConfig
from .decoder import TEXT, VISUAL, decoder_logits
from .numkernel import Tensor
from .packing import (BatchArrays, PackedSequence, SpecialTokens, assemble_sequence, batch_arrays,
                      build_pyramid)
from .vision import encode, token_grid


@dataclass
class Sample:
    image: np.ndarray | None  # H x W x 3 in [0, 1]; None for a text-only sample
    caption: list[int]


@dataclass
class PreparedBatch:
    seqs: list[PackedSequence]
    arrays: BatchArrays
    groups: list[np.ndarray]  # stacked same-size scale images
    gather: np.ndarray  # row order of the concatenated group outputs, matching visual slots


def prepare(samples: Sequence[Sample], cfg: ModelConfig, packing: PackingConfig) -> PreparedBatch:
    specials = SpecialTokens.for_decoder(cfg.decoder)
    enc = cfg.encoder
    by_shape: dict[tuple[int, int], list[np.ndarray]] = {}
    refs = []  # per visual scale, in sequence order: (shape, index in group)
    seqs = []
    for s in samples:
        if s.image is None:
            seqs.append(assemble_sequence(None, [], s.caption, specials))
            continue
        pyr = build_pyramid(s.image, packing.tau, packing.area_threshold)
        grids = []
        for img in pyr.scales:
            key = img.shape[:2]
            lst = by_shape.setdefault(key, [])
            refs.append((key, len(lst)))
            lst.append(img)
            grids.append(token_grid(key[0], key[1], enc))
        seqs.append(assemble_sequence(pyr, grids, s.caption, specials,
                                      downsample=enc.patch_stride * enc.shuffle_factor))
    keys = list(by_shape)
    groups = [np.stack(by_shape[k]) for k in keys]
    offsets, tokens_per = {}, {}
    start = 0
    for k, g in zip(keys, groups):
        r, c = token_grid(k[0], k[1], enc)
        offsets[k], tokens_per[k] = start, r * c
        start += len(g) * r * c
    gather = np.concatenate([
        offsets[k] + i * tokens_per[k] + np.arange(tokens_per[k]) for k, i in refs
    ]) if refs else np.zeros(0, dtype=np.int64)
    return PreparedBatch(seqs, batch_arrays(seqs), groups, gather.astype(np.int64))


def visual_tokens(batch: PreparedBatch, cfg: ModelConfig, store: Mapping[str, Tensor],
                  record: list | None = None) -> Tensor | None:
    if not batch.groups:
        return None
    D = cfg.encoder.out_width
    parts = []
    for imgs in batch.groups:
        out = encode(imgs, cfg.encoder, store, record)
        parts.append(nk.reshape(out, (out.shape[0] * out.shape[1], D)))
    allrows = parts[0] if len(parts) == 1 else nk.concat_rows(*parts)
    return nk.embedding(allrows, batch.gather)


def forward(batch: PreparedBatch, cfg: ModelConfig, store: Mapping[str, Tensor],
            record: list | None = None, hidden_out: list | None = None) -> Tensor:
    a = batch.arrays
    vis = visual_tokens(batch, cfg, store)
    return decoder_logits(a.token_ids, a.route, a.positions, vis, store, cfg.decoder, record, hidden_out)


def ntp_loss(logits: Tensor, targets: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean cross-entropy of ``logits[t]`` against ``targets[t]`` over rows where ``loss_mask`` is set."""
    return nk.cross_entropy(logits, targets, loss_mask)


def batch_loss(batch: PreparedBatch, cfg: ModelConfig, store: Mapping[str, Tensor],
               hidden_out: list | None = None) -> Tensor:
    logits = forward(batch, cfg, store, hidden_out=hidden_out)
    return ntp_loss(logits, batch.arrays.targets, batch.arrays.target_mask)


def modality_rms(hidden: np.ndarray, arrays: BatchArrays) -> tuple[float, float]:
    """RMS of final hidden states over visual and over linguistic tokens (nan if absent)."""
    out = []
    for m in (VISUAL, TEXT):
        sel = (arrays.route == m) & arrays.valid
        out.append(float(np.sqrt(np.mean(hidden[sel] ** 2))) if sel.any() else float("nan"))
    return out[0], out[1]
