"""Training loop: masked MAE on per-segment energy with route-level
early stopping.

Routes are encoded once up front, bucketed by length to keep padding small,
and batch order is reshuffled per epoch from the training seed, so a given
(dataset, config) pair always produces bitwise-identical parameters
single-threaded.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import nnengine as ng
from .core import Dataset, Route, ValidationError, route_to_matrix
from .models import NetModel, NetPredictor, TrainConfig, build_model

WH_PER_KWH = 1000.0


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


@dataclass
class EncodedRoute:
    feats: np.ndarray  # (L, F) float32
    target_kwh: np.ndarray  # (L,) float32
    actual_route_wh: float


@dataclass
class Batch:
    feats: np.ndarray  # (B, Lmax, F)
    target: np.ndarray  # (B, Lmax) kWh
    mask: np.ndarray  # (B, Lmax) {0,1}


@dataclass
class TrainResult:
    predictor: NetPredictor
    history: list[tuple[int, float, float]]  # (epoch, train_mae_kwh, val_route_mape_pct)
    best_val_mape: float
    epochs_run: int
    train_seconds: float


def encode_routes(routes: list[Route], dataset: Dataset,
                  require_energy: bool = True) -> list[EncodedRoute]:
    out = []
    for r in routes:
        feats = route_to_matrix(r, dataset.schema).astype(np.float32)
        if r.actual_energy is None:
            if require_energy:
                raise ValidationError(
                    f"route {r.route_id!r} has no actual_energy; cannot train on it"
                )
            target = np.zeros(len(r.segments), dtype=np.float32)
            total = 0.0
        else:
            target = (np.asarray(r.actual_energy, dtype=np.float64) / WH_PER_KWH).astype(np.float32)
            total = float(sum(r.actual_energy))
        out.append(EncodedRoute(feats, target, total))
    return out


def make_batches(encoded: list[EncodedRoute], batch_size: int) -> list[Batch]:
    """Bucket routes by length, then pad each bucket chunk to its own max."""
    order = sorted(range(len(encoded)), key=lambda i: len(encoded[i].target_kwh))
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [encoded[i] for i in order[start:start + batch_size]]
        max_len = max(len(e.target_kwh) for e in chunk)
        width = chunk[0].feats.shape[1]
        feats = np.zeros((len(chunk), max_len, width), dtype=np.float32)
        target = np.zeros((len(chunk), max_len), dtype=np.float32)
        mask = np.zeros((len(chunk), max_len), dtype=np.float32)
        for j, e in enumerate(chunk):
            n = len(e.target_kwh)
            feats[j, :n] = e.feats
            target[j, :n] = e.target_kwh
            mask[j, :n] = 1.0
        batches.append(Batch(feats, target, mask))
    return batches


def _route_mape_on(model: NetModel, batches: list[Batch], actual_wh: list[list[float]]) -> float:
    """Route-level MAPE of a model over pre-encoded batches (inference mode)."""
    errs = []
    i = 0
    for batch in batches:
        pred = model.forward(ng.Tensor(batch.feats)).data.astype(np.float64) * WH_PER_KWH
        sums = (pred * batch.mask).sum(axis=1)
        for j in range(len(sums)):
            actual = actual_wh[i]
            if actual > 1.0:
                errs.append(abs(sums[j] - actual) / actual)
            i += 1
    if not errs:
        raise ng.EmptyBatchError("no routes with positive actual energy to validate on")
    return 100.0 * float(np.mean(errs))


def train(kind: str, dataset: Dataset, config: TrainConfig) -> TrainResult:
    """Train a network kind ('ffn', 'rnn', 'ret-*') on the dataset's train split."""
    train_routes = dataset.routes_in("train")
    val_routes = dataset.routes_in("val")
    if not train_routes or not val_routes:
        raise ValidationError(
            f"need nonempty train and val splits, got {len(train_routes)}/{len(val_routes)}"
        )
    rng = np.random.default_rng(config.seed)
    model = build_model(kind, dataset.schema.width, rng)

    train_enc = encode_routes(train_routes, dataset)
    val_enc = encode_routes(val_routes, dataset)
    train_batches = make_batches(train_enc, config.batch_size)
    val_batches = make_batches(val_enc, config.batch_size)
    # actuals in the same order make_batches visits them (sorted by length)
    val_order = sorted(range(len(val_enc)), key=lambda i: len(val_enc[i].target_kwh))
    val_actuals = [val_enc[i].actual_route_wh for i in val_order]

    optimizer = ng.AdamState(lr=config.lr)
    history: list[tuple[int, float, float]] = []
    best_mape = float("inf")
    best_params = [p.data.copy() for p in model.params]
    best_epoch = 0
    started = time.perf_counter()

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_batches))
        losses = []
        for bi in order:
            batch = train_batches[bi]
            try:
                with ng.Tape() as tape:
                    pred = model.forward(ng.Tensor(batch.feats))
                    loss = ng.mae_loss(pred, ng.Tensor(batch.target), ng.Tensor(batch.mask))
                    ng.backward(tape, loss)
            except ng.FiniteCheckError as exc:
                raise TrainingDivergedError(
                    f"{kind}: non-finite values at epoch {epoch}, batch {int(bi)}: {exc}"
                ) from exc
            losses.append(loss.item())
            ng.adam_step(model.params, optimizer)

        val_mape = _route_mape_on(model, val_batches, val_actuals)
        history.append((epoch, float(np.mean(losses)), val_mape))
        if val_mape < best_mape:
            best_mape = val_mape
            best_epoch = epoch
            best_params = [p.data.copy() for p in model.params]
        elif config.patience is not None and epoch - best_epoch >= config.patience:
            break

    for p, data in zip(model.params, best_params):
        p.data = data
        p.zero_grad()
    predictor = NetPredictor(model, kind, dataset.schema)
    return TrainResult(
        predictor=predictor,
        history=history,
        best_val_mape=best_mape,
        epochs_run=len(history),
        train_seconds=time.perf_counter() - started,
    )
