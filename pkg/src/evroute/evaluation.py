"""MAPE computation, hot/cold slicing, and the basis-point comparison grid.

The default evaluation level is route: the operational question is whether a
vehicle can finish its route, so per-segment predictions are summed (raw,
unfloored) before comparing against the actual total. Segment level is
available for diagnostics.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Dataset, Route
from .models import Predictor, SchemaMismatchError
from .train import encode_routes, make_batches

HOT_THRESHOLD_C = 35.0
COLD_THRESHOLD_C = 0.0
MIN_ACTUAL_WH = 1.0  # pairs at or below this are skipped, not errors

# Table row order; the FFN row is the basis-point reference.
REPORT_ORDER = ("distance", "physics", "ffn", "rnn", "ret-20k", "ret-300k", "ret-3m")
REFERENCE_MODEL = "ffn"

REPORT_CSV_HEADER = (
    "model,level,n_routes,mape_pct,bps_vs_ffn,mape_cold_pct,bps_cold,mape_hot_pct,bps_hot"
)


class EmptyEvaluationError(ValueError):
    """Every pred/actual pair was skipped; nothing to average."""


class MissingReferenceError(ValueError):
    """Basis-point deltas were requested without the reference model."""


def mape_detail(preds, actuals) -> tuple[float, int, int]:
    """(MAPE %, pairs used, pairs skipped); skips actuals <= MIN_ACTUAL_WH."""
    preds = np.asarray(preds, dtype=np.float64)
    actuals = np.asarray(actuals, dtype=np.float64)
    if preds.shape != actuals.shape or preds.ndim != 1 or preds.size == 0:
        raise ValueError(f"need equal-length 1-D inputs, got {preds.shape} and {actuals.shape}")
    keep = actuals > MIN_ACTUAL_WH
    n_skipped = int((~keep).sum())
    if not keep.any():
        raise EmptyEvaluationError(f"all {preds.size} pairs skipped (actual <= {MIN_ACTUAL_WH} Wh)")
    value = 100.0 * float(np.mean(np.abs(preds[keep] - actuals[keep]) / actuals[keep]))
    return value, int(keep.sum()), n_skipped


def mape(preds, actuals) -> float:
    """Mean absolute percentage error: 100 * mean(|pred - actual| / actual)."""
    return mape_detail(preds, actuals)[0]


def bps_delta(reference_mape: float, model_mape: float) -> float:
    """MAPE improvement over the reference in basis points; positive is better."""
    return (reference_mape - model_mape) * 100.0


def route_slice(route: Route, which: str) -> bool:
    if which == "overall":
        return True
    if which == "hot":
        return route.mean_temperature >= HOT_THRESHOLD_C
    if which == "cold":
        return route.mean_temperature <= COLD_THRESHOLD_C
    raise ValueError(f"unknown slice {which!r}; expected overall, hot, or cold")


def slice_routes(dataset: Dataset, which: str) -> list[Route]:
    """Test-split routes in a temperature slice (mean segment temperature)."""
    return [r for r in dataset.routes_in("test") if route_slice(r, which)]


@dataclass
class ReportRow:
    model: str
    level: str
    n_routes: int
    mape_pct: float
    bps_vs_ffn: float
    mape_cold_pct: float | None
    bps_cold: float | None
    mape_hot_pct: float | None
    bps_hot: float | None


@dataclass
class EvalReport:
    rows: list[ReportRow]
    level: str
    n_routes: int
    n_cold: int
    n_hot: int
    n_skipped_pairs: int

    def row(self, model: str) -> ReportRow:
        for r in self.rows:
            if r.model == model:
                return r
        raise KeyError(model)

    def to_csv(self) -> str:
        lines = [REPORT_CSV_HEADER]
        for r in self.rows:
            cells = [r.model, r.level, str(r.n_routes), repr(r.mape_pct), repr(r.bps_vs_ffn)]
            for v in (r.mape_cold_pct, r.bps_cold, r.mape_hot_pct, r.bps_hot):
                cells.append("" if v is None else repr(v))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_csv())


def read_report_csv(path: str | Path) -> list[ReportRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.append(ReportRow(
                model=rec["model"],
                level=rec["level"],
                n_routes=int(rec["n_routes"]),
                mape_pct=float(rec["mape_pct"]),
                bps_vs_ffn=float(rec["bps_vs_ffn"]),
                mape_cold_pct=float(rec["mape_cold_pct"]) if rec["mape_cold_pct"] else None,
                bps_cold=float(rec["bps_cold"]) if rec["bps_cold"] else None,
                mape_hot_pct=float(rec["mape_hot_pct"]) if rec["mape_hot_pct"] else None,
                bps_hot=float(rec["bps_hot"]) if rec["bps_hot"] else None,
            ))
    return rows


def _predictions(predictor: Predictor, batches, level: str) -> np.ndarray:
    """Flat per-route (or per-segment) raw predictions in batch traversal order."""
    chunks = []
    for b in batches:
        pred = predictor.predict_batch(b.feats, b.mask)
        if level == "route":
            chunks.append((pred * b.mask).sum(axis=1))
        else:
            chunks.append(pred[b.mask > 0])
    return np.concatenate(chunks) if chunks else np.empty(0)


def build_report(predictors: list[Predictor], dataset: Dataset, level: str = "route") -> EvalReport:
    """Table-style comparison of every predictor on the test split.

    Rows follow REPORT_ORDER; basis-point deltas are relative to the FFN row
    and require it to be present. Hot/cold columns are omitted (with a
    warning) when the slice is empty.
    """
    if level not in ("route", "segment"):
        raise ValueError(f"level must be 'route' or 'segment', got {level!r}")
    by_name = {p.name: p for p in predictors}
    if len(by_name) != len(predictors):
        raise ValueError("duplicate predictor names")
    unknown = set(by_name) - set(REPORT_ORDER)
    if unknown:
        raise ValueError(f"unknown model names {sorted(unknown)}")
    if REFERENCE_MODEL not in by_name:
        raise MissingReferenceError(
            f"basis-point deltas are relative to {REFERENCE_MODEL!r}, which is missing "
            f"from {sorted(by_name)}"
        )
    expected = dataset.schema.fingerprint()
    for p in predictors:
        if p.schema_fingerprint != expected:
            raise SchemaMismatchError(
                f"{p.name}: schema fingerprint {p.schema_fingerprint[:12]} does not match "
                f"dataset {expected[:12]}"
            )

    test_routes = dataset.routes_in("test")
    if not test_routes:
        raise EmptyEvaluationError("dataset has no test routes")
    encoded = encode_routes(test_routes, dataset)
    batches = make_batches(encoded, batch_size=64)
    order = sorted(range(len(encoded)), key=lambda i: len(encoded[i].target_kwh))
    ordered_routes = [test_routes[i] for i in order]

    if level == "route":
        actuals = np.array([encoded[i].actual_route_wh for i in order])
        in_slice = {
            which: np.array([route_slice(r, which) for r in ordered_routes])
            for which in ("overall", "hot", "cold")
        }
    else:
        actuals = np.concatenate(
            [np.asarray(encoded[i].target_kwh, dtype=np.float64) * 1000.0 for i in order]
        )
        in_slice = {}
        for which in ("overall", "hot", "cold"):
            flags = [
                np.full(len(encoded[i].target_kwh), route_slice(test_routes[i], which))
                for i in order
            ]
            in_slice[which] = np.concatenate(flags)

    n_hot = sum(route_slice(r, "hot") for r in ordered_routes)
    n_cold = sum(route_slice(r, "cold") for r in ordered_routes)
    for which, n in (("hot", n_hot), ("cold", n_cold)):
        if n == 0:
            warnings.warn(f"{which} slice is empty; its columns are omitted", UserWarning)

    preds = {name: _predictions(by_name[name], batches, level) for name in by_name}

    def slice_mape(name: str, which: str) -> tuple[float | None, int]:
        m = in_slice[which]
        if not m.any():
            return None, 0
        value, _, skipped = mape_detail(preds[name][m], actuals[m])
        return value, skipped

    overall = {name: slice_mape(name, "overall") for name in by_name}
    cold = {name: slice_mape(name, "cold") for name in by_name}
    hot = {name: slice_mape(name, "hot") for name in by_name}

    def delta(ref: float | None, val: float | None) -> float | None:
        if ref is None or val is None:
            return None
        return bps_delta(ref, val)

    rows = []
    for name in REPORT_ORDER:
        if name not in by_name:
            continue
        rows.append(ReportRow(
            model=name,
            level=level,
            n_routes=len(test_routes),
            mape_pct=overall[name][0],
            bps_vs_ffn=bps_delta(overall[REFERENCE_MODEL][0], overall[name][0]),
            mape_cold_pct=cold[name][0],
            bps_cold=delta(cold[REFERENCE_MODEL][0], cold[name][0]),
            mape_hot_pct=hot[name][0],
            bps_hot=delta(hot[REFERENCE_MODEL][0], hot[name][0]),
        ))
    return EvalReport(
        rows=rows,
        level=level,
        n_routes=len(test_routes),
        n_cold=n_cold,
        n_hot=n_hot,
        n_skipped_pairs=overall[REFERENCE_MODEL][1],
    )
