"""Command line: ``navil train|sweep|attn-dump|pack-debug``.

Exit codes: 0 success, 1 configuration error, 2 runtime or numeric failure.
``NAVIL_OUT_DIR`` overrides the configured output directory (``--out`` wins over both).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys

import numpy as np

from . import config as config_mod
from .config import ConfigError, RunConfig
from .decoder import attention_stats
from .model import prepare, forward
from .numkernel import NonFiniteError
from .packing import SpecialTokens, assemble_sequence, build_pyramid
from .params import init_params, load_checkpoint, read_manifest, save_checkpoint
from .scaling import SweepError, SweepSpec, fit_report, records_to_csv, report_json, run_sweep
from .training import TrainingError, gen_synthetic, train
from .vision import token_grid

log = logging.getLogger("navil")

OUT_ENV = "NAVIL_OUT_DIR"
ATTN_FIELDS = ("layer", "visual_to_visual", "visual_to_text", "text_to_visual", "text_to_text")


class RuntimeFailure(RuntimeError):
    pass


def _load_raw(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            return config_mod.tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"no such file: {path}") from None
    except config_mod.tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"cannot parse {path}: {exc}") from None


def resolve_config(args, raw: dict | None = None) -> RunConfig:
    """Preset (``--preset``, default desk-tiny when no file), overlaid by the file, then flags."""
    if raw is None and args.config:
        raw = _load_raw(args.config)
    if raw is not None:
        base = config_mod.preset(args.preset) if args.preset else None
        cfg = config_mod.from_dict(raw, base)
    else:
        cfg = config_mod.preset(args.preset or "desk-tiny").validate()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = args.out or os.environ.get(OUT_ENV) or cfg.out_dir
    return dataclasses.replace(cfg, out_dir=out)


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if not cfg.runnable:
        raise ConfigError("preset", f"{cfg.name} is a reference fixture and cannot be trained at desk scale")
    result = train(cfg)
    out = cfg.out_dir
    _write(os.path.join(out, "metrics.csv"), result.metrics_csv())
    _write(os.path.join(out, "config.json"), json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    save_checkpoint(result.store, cfg.model, os.path.join(out, "checkpoint"))
    print(f"validation loss {result.initial_val:.4f} -> {result.final_val:.4f}; wrote {out}")
    return 0


def _pairs(raw, field: str) -> tuple[tuple[int, int], ...]:
    try:
        pairs = tuple((int(a), int(b)) for a, b in raw)
    except (TypeError, ValueError):
        raise ConfigError(field, "expected a list of [depth, width] pairs") from None
    if not pairs:
        raise ConfigError(field, "must not be empty")
    return pairs


def sweep_spec(args) -> SweepSpec:
    raw = _load_raw(args.config) if args.config else {}
    sw = dict(raw.pop("sweep", {}))
    base = resolve_config(args, raw if args.config else None)
    for key in ("encoders", "decoders"):
        if key not in sw:
            raise ConfigError(f"sweep.{key}", "missing field")
    known = {"encoders", "decoders", "data_sizes", "seeds", "lam", "workers", "encoder_heads", "decoder_heads"}
    for key in sw:
        if key not in known:
            raise ConfigError(f"sweep.{key}", "unknown field")
    spec = SweepSpec(
        base=base,
        encoders=_pairs(sw["encoders"], "sweep.encoders"),
        decoders=_pairs(sw["decoders"], "sweep.decoders"),
        data_sizes=tuple(int(n) for n in sw.get("data_sizes", ())),
        seeds=tuple(int(s) for s in sw.get("seeds", (base.seed,))),
        lam=float(sw.get("lam", 0.01)),
        workers=int(sw.get("workers", 1)),
        encoder_heads=sw.get("encoder_heads"),
        decoder_heads=sw.get("decoder_heads"),
    )
    from .scaling import point_config

    for enc, dec, n in spec.points():  # validate every point before any compute
        point_config(spec, enc, dec, n, spec.seeds[0])
    return spec


def cmd_sweep(args) -> int:
    spec = sweep_spec(args)
    records = run_sweep(spec)
    out = spec.base.out_dir
    _write(os.path.join(out, "records.csv"), records_to_csv(records))
    _write(os.path.join(out, "fit_report.json"), report_json(fit_report(records, spec.lam)))
    print(f"{len(records)} records; wrote {out}")
    return 0


def store_for_config(path: str, cfg: RunConfig):
    """Load a checkpoint and check it against the configured model.

    Checkpoints without visual experts (a plain transformer) get them tied to the text experts.
    """
    try:
        manifest = read_manifest(path)
    except FileNotFoundError:
        raise ConfigError("checkpoint", f"no checkpoint at {path}") from None
    if manifest.get("model") != dataclasses.asdict(cfg.model):
        raise ConfigError("checkpoint", "model configuration in checkpoint does not match the run config")
    loaded, _ = load_checkpoint(path)
    store = init_params(cfg.model, cfg.seed)
    for name in store:
        src = name if name in loaded else name.replace(".visual.", ".text.")
        if src not in loaded:
            raise ConfigError("checkpoint", f"missing tensor {name}")
        if loaded[src].shape != store[name].shape:
            raise ConfigError("checkpoint", f"{name}: shape {loaded[src].shape} != expected {store[name].shape}")
        store[name].data[...] = loaded[src].data
    return store


def attention_dump(store, cfg: RunConfig, seed: int) -> np.ndarray:
    sample = gen_synthetic((seed, cfg.data.seed), 1, cfg.data, stream="attn")
    batch = prepare(sample, cfg.model, cfg.packing)
    record: list = []
    forward(batch, cfg.model, store, record=record)
    return attention_stats(record, batch.arrays.route, batch.arrays.valid)


def attention_csv(stats: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ATTN_FIELDS)
    for i, blk in enumerate(stats):
        w.writerow([i, repr(float(blk[1, 1])), repr(float(blk[1, 0])), repr(float(blk[0, 1])), repr(float(blk[0, 0]))])
    return buf.getvalue()


def cmd_attn_dump(args) -> int:
    cfg = resolve_config(args)
    if not args.checkpoint:
        raise ConfigError("checkpoint", "--checkpoint is required")
    store = store_for_config(args.checkpoint, cfg)
    stats = attention_dump(store, cfg, cfg.seed)
    path = os.path.join(cfg.out_dir, "attention.csv")
    _write(path, attention_csv(stats))
    print(f"{len(stats)} layers; wrote {path}")
    return 0


def _image_dims(spec: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in spec.lower().split("x"))
    except ValueError:
        raise ConfigError("image", f"expected HxW, got {spec!r}") from None
    if h < 1 or w < 1:
        raise ConfigError("image", f"dims must be positive, got {spec!r}")
    return h, w


def pack_debug(height: int, width: int, cfg: RunConfig, caption=()) -> str:
    enc = cfg.model.encoder
    pyr = build_pyramid(np.zeros((height, width, 3)), cfg.packing.tau, cfg.packing.area_threshold)
    grids = [token_grid(h, w, enc) for h, w in pyr.dims]
    seq = assemble_sequence(pyr, grids, caption, SpecialTokens.for_decoder(cfg.model.decoder),
                            downsample=enc.patch_stride * enc.shuffle_factor)
    seq.validate()
    return seq.to_json()


def cmd_pack_debug(args) -> int:
    cfg = resolve_config(args)
    packing = cfg.packing
    if args.threshold is not None:
        packing = dataclasses.replace(packing, area_threshold=args.threshold)
    if args.tau is not None:
        packing = dataclasses.replace(packing, tau=args.tau)
    cfg = dataclasses.replace(cfg, packing=packing)
    cfg.packing.validate()
    h, w = _image_dims(args.image)
    caption = [int(t) for t in args.caption.split(",")] if args.caption else []
    text = pack_debug(h, w, cfg, caption)
    if args.out or os.environ.get(OUT_ENV):
        _write(os.path.join(cfg.out_dir, "packed.json"), text)
    sys.stdout.write(text)
    return 0


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "attn-dump": cmd_attn_dump, "pack-debug": cmd_pack_debug}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="navil", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="root seed override")
    p.add_argument("--preset", help=f"named preset ({', '.join(sorted(config_mod.PRESETS))})")
    p.add_argument("--checkpoint", help="checkpoint directory (attn-dump)")
    p.add_argument("--image", default="64x64", help="image size HxW (pack-debug)")
    p.add_argument("--threshold", type=int, help="pyramid area threshold override (pack-debug)")
    p.add_argument("--tau", type=float, help="pyramid downsampling ratio override (pack-debug)")
    p.add_argument("--caption", help="comma-separated caption token ids (pack-debug)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, SweepError, NonFiniteError, RuntimeFailure, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
