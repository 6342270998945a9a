"""Configuration dataclasses, presets and TOML loading."""

from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SPECIAL_NAMES = ("begin_of_image", "end_of_image", "end_of_line", "end_of_scale")
STAGES = ("S1.1", "S1.2", "S2")


class ConfigError(ValueError):
    """Invalid or incomplete configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 2
    width: int = 32
    mlp_width: int = 85
    heads: int = 2
    patch_stride: int = 16
    shuffle_factor: int = 2
    out_width: int = 64

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch_stride * self.patch_stride * 3

    def validate(self, prefix: str = "encoder") -> None:
        _positive(self, prefix, ("width", "mlp_width", "heads", "patch_stride", "shuffle_factor", "out_width"))
        if self.depth < 0:
            raise ConfigError(f"{prefix}.depth", "must be >= 0")
        if self.width % self.heads:
            raise ConfigError(f"{prefix}.heads", f"width {self.width} not divisible by {self.heads} heads")
        if self.head_dim % 4:
            raise ConfigError(f"{prefix}.heads", f"head dim {self.head_dim} not divisible by 4 (2D rotary)")


@dataclass(frozen=True)
class DecoderConfig:
    depth: int = 4
    width: int = 64
    mlp_width: int = 128
    heads: int = 4
    vocab: int = 32
    norm_eps: float = 1e-6

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def text_vocab(self) -> int:
        """Ordinary ids ``[0, text_vocab)``; the four special tokens sit above."""
        return self.vocab - len(SPECIAL_NAMES)

    def special_ids(self) -> dict[str, int]:
        return {name: self.text_vocab + i for i, name in enumerate(SPECIAL_NAMES)}

    def validate(self, prefix: str = "decoder") -> None:
        _positive(self, prefix, ("width", "mlp_width", "heads", "vocab"))
        if self.depth < 0:
            raise ConfigError(f"{prefix}.depth", "must be >= 0")
        if self.width % self.heads:
            raise ConfigError(f"{prefix}.heads", f"width {self.width} not divisible by {self.heads} heads")
        if self.head_dim % 2:
            raise ConfigError(f"{prefix}.heads", f"head dim {self.head_dim} must be even (rotary)")
        if self.vocab <= len(SPECIAL_NAMES):
            raise ConfigError(f"{prefix}.vocab", "must leave room for ordinary tokens besides the 4 specials")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def validate(self) -> None:
        self.encoder.validate()
        self.decoder.validate()
        if self.encoder.out_width != self.decoder.width:
            raise ConfigError("encoder.out_width",
                              f"{self.encoder.out_width} must equal decoder.width {self.decoder.width}")


@dataclass(frozen=True)
class PackingConfig:
    tau: float = math.sqrt(2) / 2
    area_threshold: int = 1024
    factor: int = 2

    def validate(self) -> None:
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("packing.tau", f"must lie in (0, 1), got {self.tau}")
        if self.area_threshold < 1:
            raise ConfigError("packing.area_threshold", "must be >= 1")
        if self.factor < 1:
            raise ConfigError("packing.factor", "must be >= 1")


@dataclass(frozen=True)
class StageSchedule:
    stage: str = "S2"
    steps: int = 100
    peak_lr: float = 3e-3
    schedule: str = "constant"  # "constant" (with warm-up) | "cosine"
    warmup_steps: int = 20
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8

    def validate(self, prefix: str = "stages") -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"{prefix}.stage", f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"{prefix}.schedule", f"unknown schedule {self.schedule!r}")
        if self.steps < 0 or self.warmup_steps < 0:
            raise ConfigError(f"{prefix}.steps", "step counts must be >= 0")
        if self.peak_lr < 0 or self.weight_decay < 0:
            raise ConfigError(f"{prefix}.peak_lr", "learning rate and weight decay must be >= 0")

    def lr_at(self, step: int) -> float:
        """Learning rate for 0-based ``step`` within this stage."""
        if self.warmup_steps and step < self.warmup_steps:
            return self.peak_lr * (step + 1) / self.warmup_steps
        if self.schedule == "constant":
            return self.peak_lr
        span = max(self.steps - self.warmup_steps, 1)
        progress = min((step - self.warmup_steps) / span, 1.0)
        return 0.5 * self.peak_lr * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class DataSpec:
    seed: int = 0
    n_train: int = 512
    n_val: int = 64
    grid: int = 2
    colors: int = 4
    image_size: int = 64
    batch_size: int = 8
    text_ratio: float = 0.0  # pure-text samples per multimodal sample

    def validate(self) -> None:
        for name in ("n_train", "n_val", "grid", "colors", "image_size", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"data.{name}", "must be >= 1")
        if self.image_size % self.grid:
            raise ConfigError("data.image_size", f"{self.image_size} not divisible by grid {self.grid}")
        if self.text_ratio < 0:
            raise ConfigError("data.text_ratio", "must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    packing: PackingConfig = field(default_factory=PackingConfig)
    stages: tuple[StageSchedule, ...] = ()
    data: DataSpec = field(default_factory=DataSpec)
    seed: int = 0
    eval_every: int = 50
    out_dir: str = "runs/out"
    runnable: bool = True
    name: str = "custom"
    init_checkpoint: str = ""  # warm start from one of our own checkpoints

    def validate(self) -> RunConfig:
        self.model.validate()
        self.packing.validate()
        self.data.validate()
        if not self.stages:
            raise ConfigError("stages", "at least one stage is required")
        for i, st in enumerate(self.stages):
            st.validate(f"stages[{i}]")
        if self.data.colors + 1 > self.model.decoder.text_vocab:
            raise ConfigError("data.colors", "caption tokens do not fit in the text vocabulary")
        if self.eval_every < 1:
            raise ConfigError("eval_every", "must be >= 1")
        return self

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["stages"] = [dataclasses.asdict(s) for s in self.stages]
        return d


def _positive(obj, prefix: str, names) -> None:
    for name in names:
        if getattr(obj, name) < 1:
            raise ConfigError(f"{prefix}.{name}", "must be >= 1")


# ---------------------------------------------------------------- presets


def _desk_tiny() -> RunConfig:
    return RunConfig(
        model=ModelConfig(EncoderConfig(), DecoderConfig()),
        packing=PackingConfig(),
        stages=(
            StageSchedule("S1.1", steps=200, peak_lr=3e-3, schedule="constant", warmup_steps=20, weight_decay=0.05),
            StageSchedule("S1.2", steps=200, peak_lr=3e-3, schedule="constant", warmup_steps=20, weight_decay=0.1),
            StageSchedule("S2", steps=1600, peak_lr=3e-3, schedule="cosine", warmup_steps=20, weight_decay=0.01),
        ),
        data=DataSpec(),
        name="desk-tiny",
    )


def _navil_2b_reference() -> RunConfig:
    # architecture and optimizer values of the published 2B model; far too large to run here
    return RunConfig(
        model=ModelConfig(
            EncoderConfig(depth=24, width=1472, mlp_width=5888, heads=23, patch_stride=16,
                          shuffle_factor=2, out_width=2048),
            DecoderConfig(depth=24, width=2048, mlp_width=8192, heads=16, vocab=92553),
        ),
        packing=PackingConfig(),
        stages=(
            StageSchedule("S1.1", steps=70_000, peak_lr=5e-5, schedule="constant", warmup_steps=200, weight_decay=0.05),
            StageSchedule("S1.2", steps=40_000, peak_lr=5e-5, schedule="constant", warmup_steps=200, weight_decay=0.1),
            StageSchedule("S2", steps=30_000, peak_lr=2e-5, schedule="cosine", warmup_steps=200, weight_decay=0.01),
        ),
        data=DataSpec(batch_size=7000),
        runnable=False,
        name="navil-2b-paper",
    )


PRESETS = {"desk-tiny": _desk_tiny, "navil-2b-paper": _navil_2b_reference}


def preset(name: str) -> RunConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError("preset", f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None


# ---------------------------------------------------------------- loading

_SECTIONS = {
    "encoder": EncoderConfig,
    "decoder": DecoderConfig,
    "packing": PackingConfig,
    "data": DataSpec,
}


def _build(cls, section: str, values: dict, base) -> Any:
    names = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in names:
            raise ConfigError(f"{section}.{key}", "unknown field")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in values:
            kwargs[f.name] = values[f.name]
        elif base is not None:
            kwargs[f.name] = getattr(base, f.name)
        else:
            raise ConfigError(f"{section}.{f.name}", "missing field")
    return cls(**kwargs)


def from_dict(raw: dict[str, Any], base: RunConfig | None = None) -> RunConfig:
    """Build a RunConfig from parsed TOML. Without ``base`` every field is required."""
    raw = dict(raw)
    if "preset" in raw:
        base = preset(raw.pop("preset"))
    known = {"encoder", "decoder", "packing", "data", "stages", "seed", "eval_every", "out_dir", "name",
             "init_checkpoint"}
    for key in raw:
        if key not in known:
            raise ConfigError(key, "unknown field")
    parts = {}
    for sec, cls in _SECTIONS.items():
        if base is None and sec not in raw:
            raise ConfigError(sec, "missing section")
        base_sec = None
        if base is not None:
            base_sec = getattr(base.model, sec) if sec in ("encoder", "decoder") else getattr(base, sec)
        parts[sec] = _build(cls, sec, raw.get(sec, {}), base_sec)
    if "stages" in raw:
        stages = tuple(_build(StageSchedule, f"stages[{i}]", s, None if base is None else StageSchedule())
                       for i, s in enumerate(raw["stages"]))
    elif base is not None:
        stages = base.stages
    else:
        raise ConfigError("stages", "missing section")
    scalars = {}
    for key in ("seed", "eval_every", "out_dir", "name", "init_checkpoint"):
        if key in raw:
            scalars[key] = raw[key]
        elif base is not None:
            scalars[key] = getattr(base, key)
        elif key == "seed":
            raise ConfigError("seed", "missing field")
    cfg = RunConfig(
        model=ModelConfig(parts["encoder"], parts["decoder"]),
        packing=parts["packing"],
        stages=stages,
        data=parts["data"],
        runnable=base.runnable if base is not None else True,
        **scalars,
    )
    return cfg.validate()


def load(path: str, base: RunConfig | None = None) -> RunConfig:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("config", f"cannot parse {path}: {exc}") from None
    return from_dict(raw, base)
