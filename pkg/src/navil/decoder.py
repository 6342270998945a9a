"""Causal decoder with modality-specific attention and FFN experts.

Each token is routed by its modality label (0 = linguistic, 1 = visual) to its
own Q/K/V/O and gate/up/down projections; attention itself is one global
softmax over the whole sequence. Exactly one expert path runs per token.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Mapping, Sequence

import numpy as np

from . import numkernel as nk
from .config import DecoderConfig
from .numkernel import Tensor
from .params import MODALITIES, ParameterStore

TEXT, VISUAL = 0, 1
IGNORE = -1


def expert_params(store: Mapping[str, Tensor], prefix: str, kind: str,
                  experts: Sequence[str] = MODALITIES) -> list[dict[str, Tensor]]:
    """``[{"wq": ..., ...}, ...]`` for each expert name, in route-id order."""
    keys = ("wq", "wk", "wv", "wo") if kind == "attn" else ("w_gate", "w_up", "w_down")
    out = []
    for m in experts:
        sub = f"{prefix}.{kind}.{m}" if m else f"{prefix}.{kind}"
        out.append({k: store[f"{sub}.{k}"] for k in keys})
    return out


def causal_mask(seq: int) -> np.ndarray:
    return np.tril(np.ones((seq, seq), dtype=bool))


def mmoe_attention(x: Tensor, route: np.ndarray, experts: Sequence[Mapping[str, Tensor]], heads: int,
                   rotate: Callable[[Tensor], Tensor], causal: bool,
                   record: list | None = None) -> Tensor:
    """Global multi-head attention with per-token expert projections.

    ``x`` is ``[B, S, D]``; ``route`` is ``[B, S]`` with expert ids. ``rotate``
    applies the positional rotation to a ``[B, S, H, hd]`` tensor.
    """
    B, S, D = x.shape
    route = np.asarray(route)
    if route.shape != (B, S):
        raise ValueError(f"modality mask shape {route.shape} != sequence shape {(B, S)}")
    hd = D // heads

    def proj(key):
        return nk.routed_matmul(x, route, *[e[key] for e in experts])

    q = rotate(nk.reshape(proj("wq"), (B, S, heads, hd)))
    k = rotate(nk.reshape(proj("wk"), (B, S, heads, hd)))
    v = nk.reshape(proj("wv"), (B, S, heads, hd))
    q = nk.transpose(q, (0, 2, 1, 3))
    k = nk.transpose(k, (0, 2, 3, 1))
    v = nk.transpose(v, (0, 2, 1, 3))
    scores = nk.scale(nk.matmul(q, k), 1.0 / math.sqrt(hd))
    probs = nk.softmax_rows(scores, causal_mask(S) if causal else None)
    if record is not None:
        record.append(probs.data)
    ctx = nk.transpose(nk.matmul(probs, v), (0, 2, 1, 3))
    ctx = nk.reshape(ctx, (B, S, D))
    return nk.routed_matmul(ctx, route, *[e["wo"] for e in experts])


def mmoe_ffn(x: Tensor, route: np.ndarray, experts: Sequence[Mapping[str, Tensor]]) -> Tensor:
    gate = nk.routed_matmul(x, route, *[e["w_gate"] for e in experts])
    up = nk.routed_matmul(x, route, *[e["w_up"] for e in experts])
    return nk.routed_matmul(nk.mul(nk.silu(gate), up), route, *[e["w_down"] for e in experts])


def transformer_block(x: Tensor, route: np.ndarray, store: Mapping[str, Tensor], prefix: str, heads: int,
                      rotate: Callable[[Tensor], Tensor], causal: bool, eps: float,
                      experts: Sequence[str] = MODALITIES, record: list | None = None) -> Tensor:
    """Pre-norm residual block: ``x + attn(norm(x))`` then ``h + ffn(norm(h))``."""
    attn = expert_params(store, prefix, "attn", experts)
    ffn = expert_params(store, prefix, "ffn", experts)
    h = nk.add(x, mmoe_attention(nk.rmsnorm(x, store[f"{prefix}.attn_norm"], eps), route, attn, heads,
                                 rotate, causal, record))
    return nk.add(h, mmoe_ffn(nk.rmsnorm(h, store[f"{prefix}.ffn_norm"], eps), route, ffn))


def decoder_layer(x: Tensor, route: np.ndarray, positions: np.ndarray, store: Mapping[str, Tensor],
                  index: int, cfg: DecoderConfig, record: list | None = None) -> Tensor:
    return transformer_block(x, route, store, f"decoder.layers.{index}", cfg.heads,
                             lambda t: nk.rope_1d(t, positions), True, cfg.norm_eps, record=record)


def embed_inputs(token_ids: np.ndarray, route: np.ndarray, visual: Tensor | None,
                 store: Mapping[str, Tensor]) -> Tensor:
    """Token embeddings with visual slots overwritten by connector outputs (in row-major slot order)."""
    B, S = token_ids.shape
    table = store["decoder.embed"]
    x = nk.embedding(table, np.where(route == VISUAL, 0, token_ids))
    vis_idx = np.flatnonzero(np.asarray(route).reshape(-1) == VISUAL)
    if vis_idx.size:
        if visual is None or visual.shape != (vis_idx.size, table.shape[1]):
            got = None if visual is None else visual.shape
            raise ValueError(f"expected {vis_idx.size} visual embeddings of width {table.shape[1]}, got {got}")
        x = nk.overwrite_rows(nk.reshape(x, (B * S, table.shape[1])), visual, vis_idx)
        x = nk.reshape(x, (B, S, table.shape[1]))
    return x


def decoder_hidden(token_ids: np.ndarray, route: np.ndarray, positions: np.ndarray, visual: Tensor | None,
                   store: Mapping[str, Tensor], cfg: DecoderConfig, record: list | None = None) -> Tensor:
    """Final hidden states before the output norm, ``[B, S, D]``."""
    x = embed_inputs(token_ids, route, visual, store)
    for i in range(cfg.depth):
        x = decoder_layer(x, route, positions, store, i, cfg, record)
    return x


def decoder_logits(token_ids, route, positions, visual, store, cfg: DecoderConfig,
                   record: list | None = None, hidden_out: list | None = None) -> Tensor:
    h = decoder_hidden(np.asarray(token_ids), np.asarray(route), np.asarray(positions), visual, store, cfg, record)
    if hidden_out is not None:
        hidden_out.append(h.data)
    return nk.matmul(nk.rmsnorm(h, store["decoder.final_norm"], cfg.norm_eps), store["decoder.lm_head"])


def decoder_forward(seqs, visual: Tensor | None, store: Mapping[str, Tensor], cfg: DecoderConfig,
                    record: list | None = None) -> Tensor:
    """Logits ``[B, S, vocab]`` for packed sequences (right-padded to the longest)."""
    from .packing import batch_arrays

    arrs = batch_arrays(seqs)
    return decoder_logits(arrs.token_ids, arrs.route, arrs.positions, visual, store, cfg, record)


def attention_stats(record: Sequence[np.ndarray], route: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Per-layer 2x2 block-averaged attention, ``out[layer, query_mod, key_mod]``.

    Probabilities are averaged over heads, summed over the keys of each
    modality, then averaged over the queries of each modality, so rows sum to 1.
    Rows for a modality absent from the queries are left at zero.
    """
    route = np.asarray(route)
    if route.ndim == 1:
        route = route[None]
    valid = np.ones_like(route, dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(route.shape)
    out = np.zeros((len(record), 2, 2))
    for li, probs in enumerate(record):
        p = probs.mean(axis=1)  # [B, S, S]
        for qm in (TEXT, VISUAL):
            qsel = (route == qm) & valid
            if not qsel.any():
                continue
            for km in (TEXT, VISUAL):
                kmask = ((route == km) & valid)[:, None, :]
                mass = (p * kmask).sum(axis=-1)  # [B, S]
                out[li, qm, km] = mass[qsel].mean()
        sums = out[li].sum(axis=1, keepdims=True)
        out[li] = np.divide(out[li], sums, out=np.zeros_like(out[li]), where=sums > 0)
    return out


def activated_param_count(store: ParameterStore, cfg: DecoderConfig) -> int:
    """Parameters touched per token: shared tensors plus a single expert path."""
    total = 0
    for name, t in store.items():
        if not name.startswith("decoder."):
            continue
        if ".visual." in name:
            continue  # a token uses either the text or the visual expert, never both
        total += t.data.size
    return total
