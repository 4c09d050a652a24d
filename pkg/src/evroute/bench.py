"""Inference latency measurement: two untimed warmups, five timed repeats,
identical pre-encoded batch throughout.

Encoding happens before the first warmup so the timed region covers forward
passes only. Single-threaded is the default so numbers isolate model compute;
the thread count is recorded in every result so runs are never silently mixed.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Dataset, ValidationError
from .models import Predictor
from .train import encode_routes, make_batches

BENCH_CSV_HEADER = "model,n_routes,threads,warmups,repeats,mean_s,throughput_routes_per_s"

DEFAULT_WARMUPS = 2
DEFAULT_REPEATS = 5
DEFAULT_N_ROUTES = 10_000


def _blas_thread_cap(threads: int):
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=threads)
    except ImportError:
        return nullcontext()


@dataclass
class BenchResult:
    model: str
    n_routes: int
    mean_route_len: float
    threads: int
    warmups: int
    repeats: int
    times_s: list[float] = field(default_factory=list)
    error: str | None = None

    @property
    def mean_s(self) -> float:
        return float(np.mean(self.times_s)) if self.times_s else float("nan")

    @property
    def throughput_routes_per_s(self) -> float:
        m = self.mean_s
        return self.n_routes / m if m > 0 else float("nan")


@dataclass
class EncodedInferenceBatch:
    """Padded feature batch shared by every model in a grid."""

    feats: np.ndarray  # (B, Lmax, F)
    mask: np.ndarray  # (B, Lmax)

    @property
    def n_routes(self) -> int:
        return self.feats.shape[0]

    @property
    def mean_route_len(self) -> float:
        return float(self.mask.sum() / self.feats.shape[0])


def encode_inference_batch(dataset: Dataset) -> EncodedInferenceBatch:
    """Pad every route in the dataset into one batch, longest route's length."""
    if not dataset.routes:
        raise ValidationError("no routes to benchmark")
    encoded = encode_routes(list(dataset.routes), dataset, require_energy=False)
    batch = make_batches(encoded, batch_size=len(encoded))[0]
    return EncodedInferenceBatch(feats=batch.feats, mask=batch.mask)


def time_inference(
    predictor: Predictor,
    batch: EncodedInferenceBatch,
    warmups: int = DEFAULT_WARMUPS,
    repeats: int = DEFAULT_REPEATS,
    threads: int = 1,
) -> BenchResult:
    """Mean forward-pass wall time for one model over the pre-encoded batch."""
    if batch.n_routes == 0:
        raise ValidationError("cannot benchmark an empty route batch")
    result = BenchResult(
        model=predictor.name,
        n_routes=batch.n_routes,
        mean_route_len=batch.mean_route_len,
        threads=threads,
        warmups=warmups,
        repeats=repeats,
    )
    if threads > 1:
        bounds = np.linspace(0, batch.n_routes, threads + 1).astype(int)
        chunks = [
            (batch.feats[a:b], batch.mask[a:b])
            for a, b in zip(bounds[:-1], bounds[1:])
            if b > a
        ]
        pool = ThreadPoolExecutor(max_workers=threads)

        def one_pass():
            futures = [pool.submit(predictor.predict_batch, f, m) for f, m in chunks]
            for fut in futures:
                fut.result()
    else:
        pool = None

        def one_pass():
            predictor.predict_batch(batch.feats, batch.mask)

    try:
        with _blas_thread_cap(threads):
            for _ in range(warmups):
                one_pass()
            for _ in range(repeats):
                start = time.perf_counter_ns()
                one_pass()
                result.times_s.append((time.perf_counter_ns() - start) / 1e9)
    finally:
        if pool is not None:
            pool.shutdown()
    return result


def bench_grid(
    predictors: list[Predictor | tuple[str, Exception]],
    batch: EncodedInferenceBatch,
    warmups: int = DEFAULT_WARMUPS,
    repeats: int = DEFAULT_REPEATS,
    threads: int = 1,
) -> list[BenchResult]:
    """One BenchResult per model over the identical batch.

    Entries that failed to load arrive as (name, exception) and produce a row
    marked failed instead of aborting the grid.
    """
    results = []
    for entry in predictors:
        if isinstance(entry, tuple):
            name, exc = entry
            results.append(BenchResult(
                model=name, n_routes=batch.n_routes, mean_route_len=batch.mean_route_len,
                threads=threads, warmups=warmups, repeats=repeats, error=str(exc),
            ))
            continue
        results.append(time_inference(entry, batch, warmups=warmups,
                                      repeats=repeats, threads=threads))
    return results


def grid_to_csv(results: list[BenchResult]) -> str:
    lines = [BENCH_CSV_HEADER]
    for r in results:
        if r.error is not None:
            lines.append(f"{r.model},{r.n_routes},{r.threads},{r.warmups},{r.repeats},,")
        else:
            lines.append(
                f"{r.model},{r.n_routes},{r.threads},{r.warmups},{r.repeats},"
                f"{r.mean_s:.3f},{r.throughput_routes_per_s:.1f}"
            )
    return "\n".join(lines) + "\n"


def write_grid_csv(results: list[BenchResult], path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(grid_to_csv(results))
