"""Multi-scale image packing and multimodal sequence layout.

Layout of one sample::

    <begin_of_image>
      scale 0: row_0 tokens <end_of_line> row_1 tokens <end_of_line> ... <end_of_scale>
      scale 1: ...                                                     <end_of_scale>
    <end_of_image> caption tokens

Scales are emitted largest first. Visual slots are routed to the visual
experts; special tokens and text to the linguistic ones. Only caption slots are
prediction targets.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .config import SPECIAL_NAMES, DecoderConfig
from .decoder import IGNORE, TEXT, VISUAL
from .vision import PAD_MULTIPLE, pad_image

DEFAULT_TAU = math.sqrt(2) / 2


@dataclass(frozen=True)
class SpecialTokens:
    begin_of_image: int
    end_of_image: int
    end_of_line: int
    end_of_scale: int

    def __post_init__(self):
        ids = [self.begin_of_image, self.end_of_image, self.end_of_line, self.end_of_scale]
        if len(set(ids)) != 4:
            raise ValueError(f"special token ids must be distinct, got {ids}")

    @classmethod
    def for_decoder(cls, cfg: DecoderConfig) -> SpecialTokens:
        return cls(**cfg.special_ids())

    def name_of(self, token_id: int) -> str | None:
        for name in SPECIAL_NAMES:
            if getattr(self, name) == token_id:
                return name
        return None


@dataclass
class ImagePyramid:
    scales: list[np.ndarray]

    @property
    def dims(self) -> list[tuple[int, int]]:
        return [s.shape[:2] for s in self.scales]


def _floor_to(v: float, multiple: int) -> int:
    return max(multiple, int(math.floor(v / multiple)) * multiple)


def pyramid_dims(height: int, width: int, tau: float, area_threshold: float,
                 multiple: int = PAD_MULTIPLE) -> list[tuple[int, int]]:
    """Scale sizes: padded original, then repeated ``floor_multiple(side * tau)`` while area >= threshold.

    Stops early if rounding no longer shrinks the area.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    if height < 1 or width < 1:
        raise ValueError(f"invalid image dims {height}x{width}")
    h, w = -(-height // multiple) * multiple, -(-width // multiple) * multiple
    dims = [(h, w)]
    while True:
        nh, nw = _floor_to(h * tau, multiple), _floor_to(w * tau, multiple)
        if nh * nw >= h * w or nh * nw < area_threshold:
            break
        dims.append((nh, nw))
        h, w = nh, nw
    return dims


def _area_weights(n_out: int, n_in: int) -> np.ndarray:
    s = n_in / n_out
    lo = np.arange(n_out)[:, None] * s
    j = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(j + 1, lo + s) - np.maximum(j, lo), 0.0, None)
    return overlap / s


def area_downsample(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Area-mean resampling (each output pixel averages the input area it covers)."""
    Rh = _area_weights(height, img.shape[0])
    Rw = _area_weights(width, img.shape[1])
    rows = np.einsum("ij,jkc->ikc", Rh, img)
    return np.einsum("ikc,lk->ilc", rows, Rw)


def build_pyramid(img, tau: float = DEFAULT_TAU, area_threshold: float = 1024) -> ImagePyramid:
    base = pad_image(img)
    dims = pyramid_dims(base.shape[0], base.shape[1], tau, area_threshold)
    return ImagePyramid([base] + [area_downsample(base, h, w) for h, w in dims[1:]])


@dataclass
class Slot:
    kind: str  # "special" | "visual" | "text"
    token_id: int | None = None
    scale: int | None = None
    row: int | None = None
    col: int | None = None


@dataclass
class PackedSequence:
    slots: list[Slot]
    scale_grids: list[tuple[int, int]] = field(default_factory=list)
    specials: SpecialTokens | None = None

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def token_ids(self) -> np.ndarray:
        return np.array([-1 if s.kind == "visual" else s.token_id for s in self.slots], dtype=np.int64)

    @property
    def modality(self) -> np.ndarray:
        return np.array([VISUAL if s.kind == "visual" else TEXT for s in self.slots], dtype=np.int64)

    @property
    def positions(self) -> np.ndarray:
        return np.arange(len(self.slots), dtype=np.int64)

    @property
    def loss_mask(self) -> np.ndarray:
        return np.array([s.kind == "text" for s in self.slots], dtype=bool)

    @property
    def n_visual(self) -> int:
        return sum(s.kind == "visual" for s in self.slots)

    def validate(self) -> None:
        """Check the special-token structure against ``scale_grids``; raises ValueError."""
        sp = self.specials
        ids = [None if s.kind == "visual" else s.token_id for s in self.slots]
        if not self.scale_grids:
            if any(s.kind != "text" for s in self.slots):
                raise ValueError("image-free sequence contains non-text slots")
            return
        if ids[0] != sp.begin_of_image:
            raise ValueError("sequence must open with <begin_of_image>")
        i = 1
        for k, (rows, cols) in enumerate(self.scale_grids):
            for r in range(rows):
                for c in range(cols):
                    s = self.slots[i]
                    if s.kind != "visual" or (s.scale, s.row, s.col) != (k, r, c):
                        raise ValueError(f"slot {i}: expected visual token ({k},{r},{c})")
                    i += 1
                if ids[i] != sp.end_of_line:
                    raise ValueError(f"slot {i}: expected <end_of_line> after row {r} of scale {k}")
                i += 1
            if ids[i] != sp.end_of_scale:
                raise ValueError(f"slot {i}: expected <end_of_scale> after scale {k}")
            i += 1
        if ids[i] != sp.end_of_image:
            raise ValueError(f"slot {i}: expected <end_of_image>")
        for s in self.slots[i + 1:]:
            if s.kind != "text":
                raise ValueError("only caption tokens may follow <end_of_image>")
        if (self.loss_mask & (self.modality == VISUAL)).any():
            raise ValueError("visual slot inside the loss mask")

    def to_json(self) -> str:
        sp = self.specials
        slots = []
        for pos, s in enumerate(self.slots):
            d = {"pos": pos, "kind": s.kind, "modality": "visual" if s.kind == "visual" else "linguistic",
                 "loss": int(s.kind == "text")}
            if s.kind == "visual":
                d.update(scale=s.scale, row=s.row, col=s.col)
            else:
                d["id"] = s.token_id
                if s.kind == "special":
                    d["name"] = sp.name_of(s.token_id)
            slots.append(d)
        doc = {
            "length": len(self.slots),
            "scales": [list(g) for g in self.scale_grids],
            "specials": None if sp is None else {n: getattr(sp, n) for n in SPECIAL_NAMES},
            "slots": slots,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> PackedSequence:
        doc = json.loads(text)
        sp = None if doc["specials"] is None else SpecialTokens(**doc["specials"])
        slots = []
        for d in doc["slots"]:
            if d["kind"] == "visual":
                slots.append(Slot("visual", scale=d["scale"], row=d["row"], col=d["col"]))
            else:
                slots.append(Slot(d["kind"], token_id=d["id"]))
        return cls(slots, [tuple(g) for g in doc["scales"]], sp)


def _grid_dims(out) -> tuple[int, int]:
    if hasattr(out, "rows"):
        return out.rows, out.cols
    rows, cols = out
    return int(rows), int(cols)


def assemble_sequence(pyramid: ImagePyramid | None, encoder_outputs, caption, specials: SpecialTokens,
                      downsample: int | None = None) -> PackedSequence:
    """Lay out one sample. ``encoder_outputs`` holds one token grid per scale
    (a PatchGrid after pixel shuffle, or a ``(rows, cols)`` pair).

    With ``downsample`` (= patch stride * shuffle factor) the grids are checked
    against the pyramid's pixel dims.
    """
    caption = [int(t) for t in caption]
    for t in caption:
        if specials.name_of(t) is not None:
            raise ValueError(f"caption token {t} collides with a special token")
    if pyramid is None:
        return PackedSequence([Slot("text", token_id=t) for t in caption], [], specials)
    grids = [_grid_dims(o) for o in encoder_outputs]
    if len(grids) != len(pyramid.scales):
        raise ValueError(f"{len(grids)} encoder outputs for {len(pyramid.scales)} scales")
    if downsample is not None:
        for k, ((h, w), (r, c)) in enumerate(zip(pyramid.dims, grids)):
            if (h // downsample, w // downsample) != (r, c):
                raise ValueError(f"scale {k}: {h}x{w} image should give {h // downsample}x{w // downsample} "
                                 f"tokens, encoder produced {r}x{c}")
    slots = [Slot("special", specials.begin_of_image)]
    for k, (rows, cols) in enumerate(grids):
        for r in range(rows):
            slots.extend(Slot("visual", scale=k, row=r, col=c) for c in range(cols))
            slots.append(Slot("special", specials.end_of_line))
        slots.append(Slot("special", specials.end_of_scale))
    slots.append(Slot("special", specials.end_of_image))
    slots.extend(Slot("text", token_id=t) for t in caption)
    return PackedSequence(slots, grids, specials)


def expected_token_count(height: int, width: int, tau: float = DEFAULT_TAU, threshold: float = 1024,
                         factor: int = 2, stride: int = 16, caption_len: int = 0) -> int:
    """Sequence length produced by :func:`assemble_sequence` for an image of this size."""
    total = 2 + caption_len
    for h, w in pyramid_dims(height, width, tau, threshold):
        rows, cols = h // (stride * factor), w // (stride * factor)
        total += rows * cols + rows + 1
    return total


@dataclass
class BatchArrays:
    token_ids: np.ndarray  # [B, S], visual and padding slots hold 0
    route: np.ndarray  # [B, S]
    positions: np.ndarray  # [B, S]
    targets: np.ndarray  # [B, S], next token id or IGNORE
    target_mask: np.ndarray  # [B, S], logits row t predicts slot t+1
    valid: np.ndarray  # [B, S], False on right padding


def batch_arrays(seqs) -> BatchArrays:
    if isinstance(seqs, PackedSequence):
        seqs = [seqs]
    B = len(seqs)
    S = max(len(s) for s in seqs)
    ids = np.zeros((B, S), dtype=np.int64)
    route = np.zeros((B, S), dtype=np.int64)
    pos = np.tile(np.arange(S, dtype=np.int64), (B, 1))
    loss = np.zeros((B, S), dtype=bool)
    valid = np.zeros((B, S), dtype=bool)
    for b, s in enumerate(seqs):
        n = len(s)
        ids[b, :n] = np.maximum(s.token_ids, 0)
        route[b, :n] = s.modality
        loss[b, :n] = s.loss_mask
        valid[b, :n] = True
    target_mask = np.zeros((B, S), dtype=bool)
    target_mask[:, :-1] = loss[:, 1:]
    targets = np.full((B, S), IGNORE, dtype=np.int64)
    targets[:, :-1] = np.where(loss[:, 1:], ids[:, 1:], IGNORE)
    return BatchArrays(ids, route, pos, targets, target_mask, valid)
