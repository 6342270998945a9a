import contextlib
import time

import numpy as np

from navil.config import (DataSpec, DecoderConfig, EncoderConfig, ModelConfig, PackingConfig, RunConfig,
                          StageSchedule)


def tiny_model(enc_depth=1, enc_width=8, enc_heads=2, stride=4, factor=2, dec_depth=2, dec_width=16,
               dec_heads=2, vocab=12, mlp=None) -> ModelConfig:
    enc = EncoderConfig(depth=enc_depth, width=enc_width, mlp_width=max(1, round(8 * enc_width / 3)),
                        heads=enc_heads, patch_stride=stride, shuffle_factor=factor, out_width=dec_width)
    dec = DecoderConfig(depth=dec_depth, width=dec_width, mlp_width=mlp or 2 * dec_width, heads=dec_heads,
                        vocab=vocab)
    cfg = ModelConfig(enc, dec)
    cfg.validate()
    return cfg


def tiny_run(model=None, steps=(20, 20, 40), n_train=32, n_val=8, image_size=32, seed=0, **data) -> RunConfig:
    model = model or tiny_model()
    stages = tuple(StageSchedule(name, steps=n, peak_lr=3e-3, schedule="cosine" if name == "S2" else "constant",
                                 warmup_steps=2, weight_decay=0.01)
                   for name, n in zip(("S1.1", "S1.2", "S2"), steps))
    spec = DataSpec(seed=0, n_train=n_train, n_val=n_val, grid=2, colors=4, image_size=image_size, batch_size=4,
                    **data)
    return RunConfig(model=model, packing=PackingConfig(), stages=stages, data=spec, seed=seed,
                     eval_every=10).validate()


def randomize(store, seed, std=0.3):
    """Larger-than-init weights so activations are far from zero; norm gains stay near 1."""
    rng = np.random.default_rng(seed)
    for name in store:
        t = store[name].data
        if name.endswith("norm"):
            t[...] = 1.0 + 0.2 * rng.standard_normal(t.shape)
        else:
            t[...] = std * rng.standard_normal(t.shape)
    return store


# acceptance results, printed by the terminal-summary hook in conftest
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@contextlib.contextmanager
def criterion(number, title):
    """Record PASS/FAIL for one acceptance criterion; the body may fill ``info["detail"]``."""
    info = {"detail": ""}
    start = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        msg = str(exc).splitlines()[0] if str(exc) else ""
        ACCEPTANCE[number] = ("FAIL", title, f"{type(exc).__name__}: {msg}"[:160])
        raise
    else:
        took = time.perf_counter() - start
        ACCEPTANCE[number] = ("PASS", title, f"{info['detail']} ({took:.1f}s)".strip())
