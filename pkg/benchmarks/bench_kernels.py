"""Compiled kernels vs the numpy fallback: raw kernels and one desk-tiny training step.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import contextlib
import timeit

import numpy as np

from navil import _backend
from navil.config import preset
from navil.model import prepare
from navil.params import init_params
from navil.training import AdamW, apply_stage, gen_synthetic, train_step


@contextlib.contextmanager
def using(module):
    saved = _backend.active
    _backend.active = module
    try:
        yield
    finally:
        _backend.active = saved


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def kernel_cases(rng):
    a, b = rng.standard_normal((64, 64)), rng.standard_normal((64, 64))
    a2, b2 = rng.standard_normal((256, 64)), rng.standard_normal((64, 256))
    q, k = rng.standard_normal((16, 80, 16)), rng.standard_normal((16, 16, 80))
    s = rng.standard_normal((1280, 80))
    return [
        ("matmul 64x64 @ 64x64", lambda m: m.matmul(a, b)),
        ("matmul 256x64 @ 64x256", lambda m: m.matmul(a2, b2)),
        ("bmm 16 x (80x16 @ 16x80)", lambda m: m.bmm(q, k)),
        ("rowsum 1280x80", lambda m: m.rowsum(s)),
    ]


def step_case():
    cfg = preset("desk-tiny")
    store = init_params(cfg.model, 0)
    apply_stage("S2", store)
    batch = prepare(gen_synthetic(0, cfg.data.batch_size, cfg.data), cfg.model, cfg.packing)
    sched = cfg.stages[-1]
    opt = AdamW()
    return lambda: train_step(batch, store, cfg.model, sched, opt, 0.0)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if _backend.compiled is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    rng = np.random.default_rng(0)
    rows = []
    for name, fn in kernel_cases(rng):
        t_c = best_of(lambda: fn(_backend.compiled), args.repeat, 20)
        t_f = best_of(lambda: fn(_backend.fallback), args.repeat, 20)
        rows.append((name, t_c, t_f))
    step = step_case()
    timings = []
    for module in (_backend.compiled, _backend.fallback):
        with using(module):
            timings.append(best_of(step, args.repeat, 3))
    rows.append(("train step, desk-tiny batch 8", *timings))

    print(f"{'case':34s} {'cython':>11s} {'numpy':>11s} {'speedup':>8s}")
    for name, t_c, t_f in rows:
        print(f"{name:34s} {t_c * 1e3:9.3f}ms {t_f * 1e3:9.3f}ms {t_f / t_c:7.1f}x")


if __name__ == "__main__":
    main()
