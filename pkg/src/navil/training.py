"""Next-token training with staged freezing, validation loss and a synthetic captioning task."""

from __future__ import annotations

import colorsys
import io
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .config import DataSpec, ModelConfig, RunConfig, StageSchedule
from .numkernel import GradTape, NonFiniteError
from .params import GROUPS, ParameterStore, init_params, load_checkpoint, rng_stream
from .model import PreparedBatch, Sample, batch_loss, forward, modality_rms, prepare

log = logging.getLogger(__name__)

STAGE_GROUPS = {
    "S1.1": ("vision", "visual_experts"),
    "S1.2": ("vision", "visual_experts", "text_attn"),
    "S2": GROUPS,
}
NOISE_STD = 0.05
METRIC_FIELDS = ("step", "stage", "lr", "train_loss", "val_loss", "rms_visual", "rms_text")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- synthetic data


def palette(colors: int) -> np.ndarray:
    """``colors`` well-separated RGB colours (evenly spaced hues, alternating brightness)."""
    return np.array([colorsys.hsv_to_rgb(k / colors, 0.85, 0.95 if k % 2 == 0 else 0.55)
                     for k in range(colors)])


def gen_synthetic(seed, n: int, spec: DataSpec, stream: str = "data") -> list[Sample]:
    """``n`` images of ``grid x grid`` coloured blocks; caption = block colours row-major, then an end token.

    Colour ``k`` is token ``k``; the end token is ``colors``. Pixels carry small
    Gaussian noise, so captions are recoverable by nearest-palette decoding.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng_stream(seed, stream)
    pal = palette(spec.colors)
    g, size = spec.grid, spec.image_size
    block = size // g
    out = []
    for _ in range(n):
        ids = rng.integers(0, spec.colors, size=(g, g))
        img = np.repeat(np.repeat(pal[ids], block, axis=0), block, axis=1)
        img = np.clip(img + rng.normal(0.0, NOISE_STD, size=img.shape), 0.0, 1.0)
        out.append(Sample(img, [int(k) for k in ids.reshape(-1)] + [spec.colors]))
    return out


def gen_text_only(seed, n: int, spec: DataSpec) -> list[Sample]:
    """Pure-language samples: random colour-token strings with the same end token."""
    rng = rng_stream(seed, "data.text")
    L = spec.grid * spec.grid
    return [Sample(None, [int(k) for k in rng.integers(0, spec.colors, size=L)] + [spec.colors])
            for _ in range(n)]


def decode_caption(img: np.ndarray, spec: DataSpec) -> list[int]:
    """Rule-based inverse of :func:`gen_synthetic`."""
    pal = palette(spec.colors)
    g = spec.grid
    block = spec.image_size // g
    ids = []
    for r in range(g):
        for c in range(g):
            mean = img[r * block:(r + 1) * block, c * block:(c + 1) * block].reshape(-1, 3).mean(axis=0)
            ids.append(int(np.argmin(((pal - mean) ** 2).sum(axis=1))))
    return ids + [spec.colors]


# ---------------------------------------------------------------- stages and optimiser


def apply_stage(schedule: StageSchedule | str, store: ParameterStore) -> None:
    stage = schedule if isinstance(schedule, str) else schedule.stage
    try:
        groups = STAGE_GROUPS[stage]
    except KeyError:
        raise ValueError(f"unknown stage {stage!r}") from None
    store.set_trainable(groups)


def decays(name: str) -> bool:
    """Norm gains and biases are exempt from weight decay."""
    last = name.rsplit(".", 1)[-1]
    return not (last.endswith("norm") or last == "bias" or (last[:1] == "b" and last[1:].isdigit()))


class AdamW:
    """Decoupled-weight-decay Adam with per-parameter step counts."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def update(self, store: ParameterStore, grads: Mapping[str, np.ndarray], lr: float,
               schedule: StageSchedule) -> None:
        b1, b2 = schedule.beta1, schedule.beta2
        for name in store.trainable_names():
            p = store[name].data
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if schedule.weight_decay and decays(name):
                p *= 1.0 - lr * schedule.weight_decay
            mhat = m / (1.0 - b1 ** t)
            vhat = v / (1.0 - b2 ** t)
            p -= lr * mhat / (np.sqrt(vhat) + schedule.eps)


def train_step(batch: PreparedBatch, store: ParameterStore, cfg: ModelConfig, schedule: StageSchedule,
               opt: AdamW, lr: float, hidden_out: list | None = None) -> float:
    """One forward/backward/update on the trainable groups; returns the pre-update loss."""
    try:
        with GradTape() as tape:
            loss = batch_loss(batch, cfg, store, hidden_out=hidden_out)
        wanted = {n: store[n] for n in store.trainable_names()}
        grads = tape.gradient(loss, wanted)
    except NonFiniteError as exc:
        raise TrainingError(f"non-finite value during step: {exc}") from exc
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value}")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {name}")
    opt.update(store, grads, lr, schedule)
    return value


def per_sample_losses(batch: PreparedBatch, cfg: ModelConfig, store: Mapping) -> np.ndarray:
    logits = forward(batch, cfg, store).data
    a = batch.arrays
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = []
    for b in range(logits.shape[0]):
        rows = np.flatnonzero(a.target_mask[b])
        if rows.size == 0:
            raise ValueError(f"sample {b} has no target tokens")
        out.append(-logp[b, rows, a.targets[b, rows]].mean())
    return np.array(out)


def validation_loss(store: Mapping, cfg: ModelConfig, heldout: Sequence[PreparedBatch]) -> float:
    """Mean teacher-forced loss over held-out samples; no parameter is touched."""
    losses = [per_sample_losses(b, cfg, store) for b in heldout]
    if not losses:
        raise ValueError("empty held-out set")
    return float(np.concatenate(losses).mean())


# ---------------------------------------------------------------- runs


@dataclass
class TrainResult:
    store: ParameterStore
    metrics: list[dict]
    val_history: list[tuple[int, float]] = field(default_factory=list)

    @property
    def final_val(self) -> float:
        return self.val_history[-1][1]

    @property
    def initial_val(self) -> float:
        return self.val_history[0][1]

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(METRIC_FIELDS) + "\n")
        for row in self.metrics:
            buf.write(",".join(_fmt(row.get(k)) for k in METRIC_FIELDS) + "\n")
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_metrics_csv(text: str) -> list[dict]:
    lines = text.strip().splitlines()
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        vals = line.split(",")
        row = {}
        for k, v in zip(header, vals):
            if v == "":
                row[k] = None
            elif k in ("step",):
                row[k] = int(v)
            elif k == "stage":
                row[k] = v
            else:
                row[k] = float(v)
        rows.append(row)
    return rows


def prepare_batches(samples: Sequence[Sample], cfg: RunConfig) -> list[PreparedBatch]:
    bs = cfg.data.batch_size
    return [prepare(samples[i:i + bs], cfg.model, cfg.packing) for i in range(0, len(samples), bs)]


def make_datasets(cfg: RunConfig) -> tuple[list[Sample], list[Sample]]:
    d = cfg.data
    root = (cfg.seed, d.seed)
    train = gen_synthetic(root, d.n_train, d)
    n_text = int(round(d.n_train * d.text_ratio))
    if n_text:
        train = train + gen_text_only(root, n_text, d)
    val = gen_synthetic(root, d.n_val, d, stream="data.val")
    return train, val


def train(cfg: RunConfig, store: ParameterStore | None = None, stop_at_fraction: float | None = None,
          max_steps: int | None = None) -> TrainResult:
    """Run every stage in order.

    ``stop_at_fraction`` ends the run at the first evaluation whose validation
    loss is at most that fraction of the initial one.
    """
    cfg.validate()
    if store is None:
        store = init_params(cfg.model, cfg.seed)
        if cfg.init_checkpoint:
            warm, _ = load_checkpoint(cfg.init_checkpoint)
            for n in warm:
                if n in store and store[n].shape == warm[n].shape:
                    store[n].data[...] = warm[n].data
    train_samples, val_samples = make_datasets(cfg)
    val_batches = prepare_batches(val_samples, cfg)
    order_rng = rng_stream(cfg.seed, "order")
    bs = cfg.data.batch_size
    cache: dict[tuple[int, ...], PreparedBatch] = {}

    def next_batches():
        while True:
            perm = order_rng.permutation(len(train_samples))
            for i in range(0, len(perm) - bs + 1, bs):
                yield tuple(int(j) for j in perm[i:i + bs])

    batches = next_batches()
    opt = AdamW()
    metrics: list[dict] = []
    val0 = validation_loss(store, cfg.model, val_batches)
    history = [(0, val0)]
    log.info("initial validation loss %.4f", val0)
    step = 0
    done = False
    for sched in cfg.stages:
        apply_stage(sched, store)
        for k in range(sched.steps):
            if max_steps is not None and step >= max_steps:
                done = True
                break
            idx = next(batches)
            if idx not in cache:
                if len(cache) > 256:
                    cache.clear()
                cache[idx] = prepare([train_samples[j] for j in idx], cfg.model, cfg.packing)
            batch = cache[idx]
            lr = sched.lr_at(k)
            hidden: list = []
            loss = train_step(batch, store, cfg.model, sched, opt, lr, hidden_out=hidden)
            step += 1
            rv, rt = modality_rms(hidden[0], batch.arrays)
            row = {"step": step, "stage": sched.stage, "lr": lr, "train_loss": loss,
                   "rms_visual": rv, "rms_text": rt}
            if step % cfg.eval_every == 0:
                val = validation_loss(store, cfg.model, val_batches)
                row["val_loss"] = val
                history.append((step, val))
                log.info("step %d [%s] train %.4f val %.4f", step, sched.stage, loss, val)
                if stop_at_fraction is not None and val <= stop_at_fraction * val0:
                    done = True
            metrics.append(row)
            if done:
                break
        if done:
            break
    if history[-1][0] != step:
        val = validation_loss(store, cfg.model, val_batches)
        history.append((step, val))
        if metrics:
            metrics[-1]["val_loss"] = val
    store.set_trainable(GROUPS)
    return TrainResult(store, metrics, history)
