"""Named, grouped parameter storage, initialisation and the checkpoint format.

A checkpoint is a directory holding ``manifest.json`` (names, shapes, dtype,
byte offsets, model config) and ``params.bin`` (little-endian float32 values,
concatenated in manifest order). Saving casts float64 to float32, so the first
save is lossy; after that save/load/save is byte-identical.
"""

from __future__ import annotations

import dataclasses
import json
import os
import zlib
from collections.abc import Iterator, Mapping

import numpy as np

from .config import DecoderConfig, EncoderConfig, ModelConfig
from .numkernel import Tensor

GROUPS = ("vision", "visual_experts", "text_attn", "text_ffn", "embeddings", "lm_head", "norms")
MODALITIES = ("text", "visual")  # route id 0 = linguistic, 1 = visual
INIT_STD = 0.02


def rng_stream(seed: int | tuple[int, ...], name: str) -> np.random.Generator:
    """Independent generator for a named stream ("init", "data", "order", ...) of a root seed."""
    seeds = [int(s) for s in seed] if isinstance(seed, tuple) else [int(seed)]
    return np.random.default_rng(np.random.SeedSequence([*seeds, zlib.crc32(name.encode())]))


class ParameterStore(Mapping):
    """Ordered name -> Tensor mapping with a group label per entry and per-group trainable flags."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._group: dict[str, str] = {}
        self.trainable: dict[str, bool] = {g: True for g in GROUPS}

    def add(self, name: str, value: np.ndarray, group: str) -> Tensor:
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        if name in self._tensors:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True)
        self._tensors[name] = t
        self._group[name] = group
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def group_of(self, name: str) -> str:
        return self._group[name]

    def names_in(self, group: str) -> list[str]:
        return [n for n, g in self._group.items() if g == group]

    def set_trainable(self, groups) -> None:
        groups = set(groups)
        unknown = groups - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown groups {sorted(unknown)}")
        for g in GROUPS:
            self.trainable[g] = g in groups
        for name, t in self._tensors.items():
            t.requires_grad = self.trainable[self._group[name]]

    def trainable_names(self) -> list[str]:
        return [n for n in self._tensors if self.trainable[self._group[n]]]

    def count(self, prefix: str = "") -> int:
        return sum(t.data.size for n, t in self._tensors.items() if n.startswith(prefix))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._tensors.items()}


def _normal(rng: np.random.Generator, *shape: int) -> np.ndarray:
    return rng.normal(0.0, INIT_STD, size=shape)


def _add_block(store: ParameterStore, rng, prefix: str, width: int, mlp: int,
               experts: tuple[str, ...], groups: dict) -> None:
    store.add(f"{prefix}.attn_norm", np.ones(width), groups["norm"])
    for m in experts:
        sub = f"{prefix}.attn.{m}" if m else f"{prefix}.attn"
        for w in ("wq", "wk", "wv", "wo"):
            store.add(f"{sub}.{w}", _normal(rng, width, width), groups["attn", m])
    store.add(f"{prefix}.ffn_norm", np.ones(width), groups["norm"])
    for m in experts:
        sub = f"{prefix}.ffn.{m}" if m else f"{prefix}.ffn"
        store.add(f"{sub}.w_gate", _normal(rng, width, mlp), groups["ffn", m])
        store.add(f"{sub}.w_up", _normal(rng, width, mlp), groups["ffn", m])
        store.add(f"{sub}.w_down", _normal(rng, mlp, width), groups["ffn", m])


def add_encoder_params(store: ParameterStore, cfg: EncoderConfig, rng: np.random.Generator) -> None:
    w = cfg.width
    store.add("vision.patch.weight", _normal(rng, cfg.patch_dim, w), "vision")
    store.add("vision.patch.bias", np.zeros(w), "vision")
    groups = {"norm": "vision", ("attn", ""): "vision", ("ffn", ""): "vision"}
    for i in range(cfg.depth):
        _add_block(store, rng, f"vision.layers.{i}", w, cfg.mlp_width, ("",), groups)
    cin = w * cfg.shuffle_factor ** 2
    store.add("vision.connector.w1", _normal(rng, cin, cfg.out_width), "vision")
    store.add("vision.connector.b1", np.zeros(cfg.out_width), "vision")
    store.add("vision.connector.w2", _normal(rng, cfg.out_width, cfg.out_width), "vision")
    store.add("vision.connector.b2", np.zeros(cfg.out_width), "vision")


def add_decoder_params(store: ParameterStore, cfg: DecoderConfig, rng: np.random.Generator) -> None:
    store.add("decoder.embed", _normal(rng, cfg.vocab, cfg.width), "embeddings")
    groups = {
        "norm": "norms",
        ("attn", "text"): "text_attn", ("attn", "visual"): "visual_experts",
        ("ffn", "text"): "text_ffn", ("ffn", "visual"): "visual_experts",
    }
    for i in range(cfg.depth):
        _add_block(store, rng, f"decoder.layers.{i}", cfg.width, cfg.mlp_width, MODALITIES, groups)
    store.add("decoder.final_norm", np.ones(cfg.width), "norms")
    store.add("decoder.lm_head", _normal(rng, cfg.width, cfg.vocab), "lm_head")


def init_params(cfg: ModelConfig, seed: int) -> ParameterStore:
    """Projections ~ N(0, 0.02), norm gains 1, biases 0."""
    store = ParameterStore()
    add_encoder_params(store, cfg.encoder, rng_stream(seed, "init.vision"))
    add_decoder_params(store, cfg.decoder, rng_stream(seed, "init.decoder"))
    return store


def tie_experts(store: ParameterStore, src: str = "text", dst: str = "visual") -> None:
    """Copy every ``src``-expert matrix onto the matching ``dst`` expert."""
    for name in list(store):
        if f".{src}." in name:
            store[name.replace(f".{src}.", f".{dst}.")].data[...] = store[name].data


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(store: ParameterStore, cfg: ModelConfig, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    entries, offset, chunks = [], 0, []
    for name, t in store.items():
        raw = t.data.astype("<f4").tobytes()
        entries.append({"name": name, "group": store.group_of(name), "shape": list(t.shape),
                        "dtype": "float32-le", "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": "navil-ckpt-1", "model": dataclasses.asdict(cfg), "total_bytes": offset,
                "tensors": entries}
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        fh.write(b"".join(chunks))
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_manifest(path: str) -> dict:
    with open(os.path.join(path, "manifest.json")) as fh:
        return json.load(fh)


def load_checkpoint(path: str) -> tuple[ParameterStore, ModelConfig]:
    manifest = read_manifest(path)
    if manifest.get("format") != "navil-ckpt-1":
        raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    with open(os.path.join(path, "params.bin"), "rb") as fh:
        blob = fh.read()
    if len(blob) != manifest["total_bytes"]:
        raise ValueError(f"{path}: payload is {len(blob)} bytes, manifest says {manifest['total_bytes']}")
    m = manifest["model"]
    cfg = ModelConfig(EncoderConfig(**m["encoder"]), DecoderConfig(**m["decoder"]))
    store = ParameterStore()
    expect = 0
    for e in manifest["tensors"]:
        if e["offset"] != expect:
            raise ValueError(f"{path}: byte ranges do not tile the payload at {e['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        store.add(e["name"], arr.astype(np.float64).reshape(e["shape"]), e["group"])
        expect += e["nbytes"]
    if expect != len(blob):
        raise ValueError(f"{path}: manifest does not cover the whole payload")
    return store, cfg
