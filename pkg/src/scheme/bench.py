"""Wall-clock microbenchmarks of mixer forward passes.

Timings are machine-dependent and only ever reported.  The MAC columns come
from :mod:`scheme.accounting`, so iso-FLOP rows carry identical values.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from .accounting import cca_macs, effective_expansion, mixer_macs
from .errors import ConfigError
from .mixers import MixerConfig, bd_mlp_forward, cca_forward, dense_mlp_forward, format_fraction, init_params
from .tensor import Tensor

BENCH_COLUMNS = ("kind", "d", "E", "g1", "g2", "N", "reps", "macs", "flops", "median_s", "p10_s", "p90_s", "macs_per_s")
BENCH_KINDS = ("dense", "bdmlp", "cca")


@dataclass
class BenchRow:
    kind: str
    d: int
    E: object
    g1: int
    g2: int
    n_tokens: int
    reps: int
    macs: int
    times: np.ndarray

    @property
    def median(self) -> float:
        return float(np.median(self.times))

    def as_list(self) -> list:
        p10, p90 = np.percentile(self.times, [10, 90])
        med = self.median
        return [
            self.kind, self.d, format_fraction(self.E), self.g1, self.g2, self.n_tokens, self.reps,
            self.macs, 2 * self.macs, f"{med:.9f}", f"{p10:.9f}", f"{p90:.9f}",
            f"{self.macs / med:.6e}" if med > 0 else "inf",
        ]


def bench(kind: str, d: int, E=1, g1: int = 1, g2: int = 1, n_tokens: int = 196, reps: int = 20, warmup: int = 3,
          dtype=np.float64, seed: int = 0) -> BenchRow:
    """Time ``reps`` forward passes of one mixer kind on a ``(d, n_tokens)`` input after ``warmup`` untimed ones."""
    if kind not in BENCH_KINDS:
        raise ConfigError(f"unknown bench kind {kind!r}; expected one of {BENCH_KINDS}")
    if reps < 1 or warmup < 0:
        raise ConfigError("reps must be >= 1 and warmup >= 0")
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((d, n_tokens)), dtype=dtype)
    if kind == "cca":
        run = lambda: cca_forward(x, 1.0)
        macs = cca_macs(d, n_tokens)
        E, g1, g2 = 0, 1, 1
    else:
        if kind == "dense":
            g1 = g2 = 1
        cfg = MixerConfig(d=d, E=E, g1=g1, g2=g2, mode="inference").validate()
        params = init_params(cfg, rng, with_alpha=False)
        for t in params.tensors().values():
            t.data = t.data.astype(dtype)
        if kind == "dense":
            run = lambda: dense_mlp_forward(x, params, cfg.activation)
        else:
            run = lambda: bd_mlp_forward(x, cfg, params)
        macs = mixer_macs(cfg, n_tokens)
        E = cfg.E
    for _ in range(warmup):
        run()
    times = np.empty(reps)
    for i in range(reps):
        t0 = time.perf_counter()
        run()
        times[i] = time.perf_counter() - t0
    return BenchRow(kind, d, E, g1, g2, n_tokens, reps, macs, times)


def iso_flop_rows(d: int, E, g: int, n_tokens: int, reps: int = 20, warmup: int = 3, dtype=np.float64,
                  include_cca: bool = True) -> list[BenchRow]:
    """Dense expansion ``E`` next to the grouped mixer with the same MACs (``g1 = g2 = g``)."""
    rows = [
        bench("dense", d, E, 1, 1, n_tokens, reps, warmup, dtype),
        bench("bdmlp", d, effective_expansion(E, g, g), g, g, n_tokens, reps, warmup, dtype),
    ]
    if include_cca:
        rows.append(bench("cca", d, 0, 1, 1, n_tokens, reps, warmup, dtype))
    return rows


def bench_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in rows:
        w.writerow(r.as_list())
    return buf.getvalue()
