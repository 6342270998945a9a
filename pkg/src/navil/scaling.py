"""Parameter budgeting, the optimal-encoder-size rule, log-linear fits and desk-scale sweeps."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from collections.abc import Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import DecoderConfig, ModelConfig, RunConfig

BUDGET_GRID = ((3, 4096), (6, 2880), (12, 2048), (24, 1472), (48, 1024))
GRID_BUDGET = 600_000_000
DEFAULT_LAMBDA = 0.01


def param_count(d: int, w: int) -> int:
    """Approximate transformer-stack size ``12 d w^2`` (exact integer)."""
    if d < 0 or w < 1:
        raise ValueError(f"need d >= 0 and w >= 1, got d={d}, w={w}")
    return 12 * d * w * w


def width_for_budget(n: float, d: int, heads: int = 1) -> int:
    """Width giving ``12 d w^2 ~= n``, rounded to the nearest multiple of ``heads`` (at least one head)."""
    if n <= 0 or d <= 0 or heads < 1:
        raise ValueError("budget, depth and heads must be positive")
    w = round(math.sqrt(n / (12 * d)))
    return max(heads, int(round(w / heads)) * heads)


@dataclass(frozen=True)
class SweepPoint:
    d: int
    w: int
    n_target: int

    def __post_init__(self):
        if abs(param_count(self.d, self.w) - self.n_target) > 0.05 * self.n_target:
            raise ValueError(f"({self.d}, {self.w}) is more than 5% away from budget {self.n_target}")


def sweep_grid() -> list[SweepPoint]:
    """The fixed-budget depth/width grid (about 0.6B parameters per point)."""
    return [SweepPoint(d, w, GRID_BUDGET) for d, w in BUDGET_GRID]


# ---------------------------------------------------------------- optimal encoder size


@dataclass(frozen=True)
class OptimalSize:
    size: float
    saturated: bool  # False: no ladder entry met the rule, ``size`` is the largest tried


def optimal_encoder_size(losses: Mapping[float, float], lam: float = DEFAULT_LAMBDA) -> OptimalSize:
    """Smallest size ``s`` with ``loss(s) - loss(2s) < lam * loss(smallest)`` on a doubling ladder."""
    sizes = sorted(losses)
    if len(sizes) < 2:
        raise ValueError("need at least two ladder entries")
    for a, b in zip(sizes, sizes[1:]):
        if not math.isclose(b, 2 * a, rel_tol=1e-9):
            raise ValueError(f"ladder is not a doubling sequence: {a} -> {b}")
    threshold = lam * losses[sizes[0]]
    for a, b in zip(sizes, sizes[1:]):
        if losses[a] - losses[b] < threshold:
            return OptimalSize(a, True)
    return OptimalSize(sizes[-1], False)


# ---------------------------------------------------------------- fits


@dataclass(frozen=True)
class LogLinearFit:
    slope: float
    intercept: float
    r2: float
    log_y: bool

    def predict(self, x) -> np.ndarray:
        y = self.slope * np.log(np.asarray(x, dtype=float)) + self.intercept
        return np.exp(y) if self.log_y else y


def fit_loglinear(xs: Sequence[float], ys: Sequence[float], log_y: bool = False) -> LogLinearFit:
    """Least squares of ``y`` (or ``log y``) against ``log x``; natural logs."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("need at least two (x, y) pairs of equal length")
    if (x <= 0).any() or (log_y and (y <= 0).any()):
        raise ValueError("log fit needs positive values")
    lx = np.log(x)
    ly = np.log(y) if log_y else y
    dx = lx - lx.mean()
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise ValueError("degenerate x: all sizes equal")
    slope = float(dx @ (ly - ly.mean())) / sxx
    intercept = float(ly.mean() - slope * lx.mean())
    resid = ly - (slope * lx + intercept)
    ss_res = float(resid @ resid)
    dy = ly - ly.mean()
    ss_tot = float(dy @ dy)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return LogLinearFit(slope, intercept, r2, log_y)


# ---------------------------------------------------------------- records


@dataclass(frozen=True, order=True)
class ScalingRecord:
    encoder_params: int
    llm_params: int
    data_size: int
    val_loss: float

    def __post_init__(self):
        if min(self.encoder_params, self.llm_params, self.data_size) <= 0 or not self.val_loss > 0:
            raise ValueError(f"scaling record fields must be positive: {self}")


RECORD_FIELDS = ("encoder_params", "llm_params", "data_size", "val_loss")


def records_to_csv(records: Sequence[ScalingRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    for r in sorted(records):
        w.writerow([r.encoder_params, r.llm_params, r.data_size, repr(r.val_loss)])
    return buf.getvalue()


def records_from_csv(text: str) -> list[ScalingRecord]:
    rows = csv.DictReader(io.StringIO(text))
    return [ScalingRecord(int(r["encoder_params"]), int(r["llm_params"]), int(r["data_size"]),
                          float(r["val_loss"])) for r in rows]


def _is_doubling(sizes: Sequence[float]) -> bool:
    return len(sizes) >= 2 and all(math.isclose(b, 2 * a, rel_tol=1e-9) for a, b in zip(sizes, sizes[1:]))


def fit_report(records: Sequence[ScalingRecord], lam: float = DEFAULT_LAMBDA) -> dict:
    """Loss-vs-size fits along each axis, plus the optimal encoder per LLM size where the ladder allows."""
    report: dict = {"lambda": lam, "loss_vs_encoder": [], "loss_vs_llm": [], "optimal_encoder": []}
    data_sizes = sorted({r.data_size for r in records})
    for n in data_sizes:
        sub = [r for r in records if r.data_size == n]
        for llm in sorted({r.llm_params for r in sub}):
            pts = sorted((r.encoder_params, r.val_loss) for r in sub if r.llm_params == llm)
            if len({p[0] for p in pts}) >= 2:
                f = fit_loglinear([p[0] for p in pts], [p[1] for p in pts])
                report["loss_vs_encoder"].append({"data_size": n, "llm_params": llm, "slope": f.slope,
                                                  "intercept": f.intercept, "r2": f.r2})
            sizes = [p[0] for p in pts]
            if _is_doubling(sizes):
                opt = optimal_encoder_size(dict(pts), lam)
                report["optimal_encoder"].append({"data_size": n, "llm_params": llm,
                                                  "encoder_params": opt.size, "saturated": opt.saturated})
        for enc in sorted({r.encoder_params for r in sub}):
            pts = sorted((r.llm_params, r.val_loss) for r in sub if r.encoder_params == enc)
            if len({p[0] for p in pts}) >= 2:
                f = fit_loglinear([p[0] for p in pts], [p[1] for p in pts])
                report["loss_vs_llm"].append({"data_size": n, "encoder_params": enc, "slope": f.slope,
                                              "intercept": f.intercept, "r2": f.r2})
    opts = [o for o in report["optimal_encoder"] if o["data_size"] == (data_sizes[-1] if data_sizes else None)]
    if len({o["llm_params"] for o in opts}) >= 2:
        f = fit_loglinear([o["llm_params"] for o in opts], [o["encoder_params"] for o in opts], log_y=True)
        report["optimal_vs_llm"] = {"slope": f.slope, "intercept": f.intercept, "r2": f.r2}
    return report


# ---------------------------------------------------------------- sweeps


@dataclass(frozen=True)
class SweepSpec:
    """Grid of encoder (depth, width), decoder (depth, width) and training-set sizes.

    Everything else (stages, packing, data task, heads) comes from ``base``.
    """

    base: RunConfig
    encoders: tuple[tuple[int, int], ...]
    decoders: tuple[tuple[int, int], ...]
    data_sizes: tuple[int, ...] = ()
    seeds: tuple[int, ...] = (0,)
    lam: float = DEFAULT_LAMBDA
    workers: int = 1
    encoder_heads: int | None = None
    decoder_heads: int | None = None

    def points(self) -> list[tuple[tuple[int, int], tuple[int, int], int]]:
        sizes = self.data_sizes or (self.base.data.n_train,)
        return [(e, d, n) for e in self.encoders for d in self.decoders for n in sizes]


class SweepError(RuntimeError):
    def __init__(self, point_id: str, cause: BaseException):
        super().__init__(f"sweep point {point_id} failed: {cause}")
        self.point_id = point_id


def point_config(spec: SweepSpec, enc: tuple[int, int], dec: tuple[int, int], n: int, seed: int) -> RunConfig:
    base = spec.base
    ed, ew = enc
    dd, dw = dec
    eh = spec.encoder_heads or max(1, ew // 16)
    dh = spec.decoder_heads or max(1, dw // 16)
    encoder = dataclasses.replace(base.model.encoder, depth=ed, width=ew, heads=eh,
                                  mlp_width=max(1, round(8 * ew / 3)), out_width=dw)
    decoder: DecoderConfig = dataclasses.replace(base.model.decoder, depth=dd, width=dw, heads=dh,
                                                 mlp_width=2 * dw)
    return dataclasses.replace(base, model=ModelConfig(encoder, decoder),
                               data=dataclasses.replace(base.data, n_train=n), seed=seed).validate()


def point_id(enc, dec, n, seed) -> str:
    return f"enc{enc[0]}x{enc[1]}-dec{dec[0]}x{dec[1]}-n{n}-seed{seed}"


def _run_point(args) -> float:
    from .training import train

    cfg, pid = args
    try:
        return train(cfg).final_val
    except Exception as exc:  # re-raised with the point named
        raise SweepError(pid, exc) from exc


def run_sweep(spec: SweepSpec) -> list[ScalingRecord]:
    """Train every grid point for every seed; one record per point with the median validation loss."""
    jobs = []
    for enc, dec, n in spec.points():
        for seed in spec.seeds:
            jobs.append((point_config(spec, enc, dec, n, seed), point_id(enc, dec, n, seed)))
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            losses = list(pool.map(_run_point, jobs))
    else:
        losses = [_run_point(j) for j in jobs]
    records = []
    k = 0
    for enc, dec, n in spec.points():
        vals = losses[k:k + len(spec.seeds)]
        k += len(spec.seeds)
        records.append(ScalingRecord(param_count(*enc), param_count(*dec), n, float(np.median(vals))))
    return sorted(records)


def report_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True) + "\n"
