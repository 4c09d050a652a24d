"""The estimator zoo: distance and physics baselines, segment FFN, route GRU,
and the decoder-only route transformer, plus a uniform batch-prediction
interface so the eval and bench harnesses treat all of them identically.

Networks train on kWh targets (Wh / 1000) to keep magnitudes near 1; the
predictors convert back to Wh. Raw predictions may be negative; flooring at
zero happens only at the reporting surface (route_energy), never inside
training or metric computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nnengine as ng
from .core import MAX_LEN, FeatureSchema, Route, ValidationError, VehicleModel, route_to_matrix
from .simgen import CABIN_SETPOINT_C

MODEL_KINDS = ("distance", "physics", "ffn", "rnn", "ret-20k", "ret-300k", "ret-3m")

# (blocks, model dim) per transformer preset; head_dim is fixed at 32.
RET_PRESETS = {"ret-20k": (1, 32), "ret-300k": (3, 96), "ret-3m": (6, 192)}


class SchemaMismatchError(ValueError):
    """Model and data were built against different feature schemas."""


class ContextLengthError(ValidationError):
    """Route longer than the model's context window."""


class DegenerateFitError(ValueError):
    """Regression input has no variance to fit on."""


# -- configs -------------------------------------------------------------------


@dataclass(frozen=True)
class FFNConfig:
    input_width: int
    hidden: tuple[int, int] = (32, 32)


@dataclass(frozen=True)
class RNNConfig:
    input_width: int
    embed: int = 32
    hidden: int = 64
    out_embed: int = 32


@dataclass(frozen=True)
class TransformerConfig:
    input_width: int
    blocks: int
    dim: int
    context: int = MAX_LEN
    head_dim: int = 32
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.dim % self.head_dim != 0:
            raise ValidationError(f"dim {self.dim} must be divisible by head_dim {self.head_dim}")

    @property
    def heads(self) -> int:
        return self.dim // self.head_dim


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    patience: int | None = 10  # None disables early stopping
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ValidationError("lr, batch_size and epochs must be positive")
        if self.patience is not None and self.patience <= 0:
            raise ValidationError("patience must be positive or None")


# -- parameter manifests -------------------------------------------------------
# Shapes are the single source of truth for both allocation and param_count.


def _ffn_shapes(cfg: FFNConfig) -> list[tuple[str, tuple[int, ...]]]:
    h1, h2 = cfg.hidden
    return [
        ("l1_w", (cfg.input_width, h1)), ("l1_b", (h1,)),
        ("l2_w", (h1, h2)), ("l2_b", (h2,)),
        ("head_w", (h2, 1)), ("head_b", (1,)),
    ]


def _rnn_shapes(cfg: RNNConfig) -> list[tuple[str, tuple[int, ...]]]:
    e, h = cfg.embed, cfg.hidden
    return [
        ("embed_w", (cfg.input_width, e)), ("embed_b", (e,)),
        # update, reset, candidate gates fused along the last axis
        ("gate_xw", (e, 3 * h)), ("gate_hw", (h, 3 * h)), ("gate_b", (3 * h,)),
        ("out_w", (h, cfg.out_embed)), ("out_b", (cfg.out_embed,)),
        ("head_w", (cfg.out_embed, 1)), ("head_b", (1,)),
    ]


def _ret_shapes(cfg: TransformerConfig) -> list[tuple[str, tuple[int, ...]]]:
    d = cfg.dim
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("in_w", (cfg.input_width, d)), ("in_b", (d,)),
        ("pos", (cfg.context, d)),
    ]
    for i in range(cfg.blocks):
        shapes += [
            (f"b{i}_ln1_g", (d,)), (f"b{i}_ln1_b", (d,)),
            (f"b{i}_qkv_w", (d, 3 * d)), (f"b{i}_qkv_b", (3 * d,)),
            (f"b{i}_proj_w", (d, d)), (f"b{i}_proj_b", (d,)),
            (f"b{i}_ln2_g", (d,)), (f"b{i}_ln2_b", (d,)),
            (f"b{i}_mlp1_w", (d, cfg.mlp_ratio * d)), (f"b{i}_mlp1_b", (cfg.mlp_ratio * d,)),
            (f"b{i}_mlp2_w", (cfg.mlp_ratio * d, d)), (f"b{i}_mlp2_b", (d,)),
        ]
    shapes += [("lnf_g", (d,)), ("lnf_b", (d,)), ("head_w", (d, 1)), ("head_b", (1,))]
    return shapes


def param_count(config: FFNConfig | RNNConfig | TransformerConfig) -> int:
    """Exact trainable-parameter count for a model config."""
    if isinstance(config, FFNConfig):
        shapes = _ffn_shapes(config)
    elif isinstance(config, RNNConfig):
        shapes = _rnn_shapes(config)
    elif isinstance(config, TransformerConfig):
        shapes = _ret_shapes(config)
    else:
        raise TypeError(f"unsupported config {type(config).__name__}")
    return sum(math.prod(shape) for _, shape in shapes)


def _init_params(shapes, rng: np.random.Generator, dtype) -> dict[str, ng.Parameter]:
    """Glorot-uniform weights, zero biases, unit LN gains, N(0, 0.02^2) embeddings."""
    params = {}
    for name, shape in shapes:
        if name == "pos":
            data = rng.normal(0.0, 0.02, size=shape)
        elif name.endswith("_w"):
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-bound, bound, size=shape)
        elif name.endswith("_g"):
            data = np.ones(shape)
        else:  # biases and LN shifts
            data = np.zeros(shape)
        params[name] = ng.Parameter(name, data.astype(dtype))
    return params


# -- network models ------------------------------------------------------------


class FFNModel:
    """Per-segment feed-forward net; each position is predicted independently."""

    kind = "ffn"

    def __init__(self, config: FFNConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        self._p = _init_params(_ffn_shapes(config), rng, dtype)

    @property
    def params(self) -> list[ng.Parameter]:
        return list(self._p.values())

    def forward(self, x: ng.Tensor) -> ng.Tensor:
        p = self._p
        h = ng.relu(ng.affine(x, p["l1_w"], p["l1_b"]))
        h = ng.relu(ng.affine(h, p["l2_w"], p["l2_b"]))
        out = ng.affine(h, p["head_w"], p["head_b"])
        return ng.reshape(out, x.shape[:-1])


class GRUModel:
    """Unidirectional GRU over the route sequence, one energy output per step."""

    kind = "rnn"

    def __init__(self, config: RNNConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        self._p = _init_params(_rnn_shapes(config), rng, dtype)

    @property
    def params(self) -> list[ng.Parameter]:
        return list(self._p.values())

    def forward(self, x: ng.Tensor) -> ng.Tensor:
        if x.data.ndim != 3:
            raise ng.ShapeError(f"expected (batch, length, features), got {x.shape}")
        p = self._p
        batch, length = x.shape[0], x.shape[1]
        h_units = self.config.hidden

        e = ng.relu(ng.affine(x, p["embed_w"], p["embed_b"]))
        # input contribution of all three gates for every step, one matmul
        xg = ng.affine(e, p["gate_xw"], p["gate_b"])

        h = ng.Tensor(np.zeros((batch, h_units)), dtype=x.data.dtype)
        steps = []
        for t in range(length):
            xt = ng.slice_(xg, np.s_[:, t, :])
            hg = ng.matmul(h, p["gate_hw"])
            zr = ng.sigmoid(ng.add(ng.slice_(xt, np.s_[:, : 2 * h_units]),
                                   ng.slice_(hg, np.s_[:, : 2 * h_units])))
            z = ng.slice_(zr, np.s_[:, :h_units])
            r = ng.slice_(zr, np.s_[:, h_units:])
            n = ng.tanh(ng.add(ng.slice_(xt, np.s_[:, 2 * h_units:]),
                               ng.mul(r, ng.slice_(hg, np.s_[:, 2 * h_units:]))))
            # update gate interpolates previous state and candidate
            h = ng.add(ng.mul(ng.sub(1.0, z), n), ng.mul(z, h))
            steps.append(ng.reshape(h, (batch, 1, h_units)))
        seq = ng.concat(steps, axis=1)
        out = ng.relu(ng.affine(seq, p["out_w"], p["out_b"]))
        out = ng.affine(out, p["head_w"], p["head_b"])
        return ng.reshape(out, (batch, length))


class TransformerModel:
    """Decoder-only transformer: pre-norm blocks, causal attention, head_dim 32."""

    kind = "ret"

    def __init__(self, config: TransformerConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        self._p = _init_params(_ret_shapes(config), rng, dtype)

    @property
    def params(self) -> list[ng.Parameter]:
        return list(self._p.values())

    def _attention(self, h: ng.Tensor, i: int) -> ng.Tensor:
        p = self._p
        cfg = self.config
        batch, length = h.shape[0], h.shape[1]
        d, heads, hd = cfg.dim, cfg.heads, cfg.head_dim

        qkv = ng.affine(h, p[f"b{i}_qkv_w"], p[f"b{i}_qkv_b"])

        def split(part: int) -> ng.Tensor:
            piece = ng.slice_(qkv, np.s_[:, :, part * d:(part + 1) * d])
            piece = ng.reshape(piece, (batch, length, heads, hd))
            return ng.transpose(piece, (0, 2, 1, 3))  # (B, H, L, hd)

        q, k, v = split(0), split(1), split(2)
        scores = ng.mul(ng.matmul(q, ng.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        weights = ng.softmax_last_dim(ng.causal_masked_fill(scores))
        mixed = ng.matmul(weights, v)
        mixed = ng.reshape(ng.transpose(mixed, (0, 2, 1, 3)), (batch, length, d))
        return ng.affine(mixed, p[f"b{i}_proj_w"], p[f"b{i}_proj_b"])

    def forward(self, x: ng.Tensor) -> ng.Tensor:
        if x.data.ndim != 3:
            raise ng.ShapeError(f"expected (batch, length, features), got {x.shape}")
        batch, length = x.shape[0], x.shape[1]
        if length > self.config.context:
            raise ContextLengthError(
                f"sequence length {length} exceeds context {self.config.context}"
            )
        p = self._p
        h = ng.affine(x, p["in_w"], p["in_b"])
        h = ng.add(h, ng.slice_(p["pos"], np.s_[:length]))
        for i in range(self.config.blocks):
            a = ng.layer_norm(h, p[f"b{i}_ln1_g"], p[f"b{i}_ln1_b"])
            h = ng.add(h, self._attention(a, i))
            m = ng.layer_norm(h, p[f"b{i}_ln2_g"], p[f"b{i}_ln2_b"])
            m = ng.affine(m, p[f"b{i}_mlp1_w"], p[f"b{i}_mlp1_b"])
            m = ng.gelu(m)
            m = ng.affine(m, p[f"b{i}_mlp2_w"], p[f"b{i}_mlp2_b"])
            h = ng.add(h, m)
        h = ng.layer_norm(h, p["lnf_g"], p["lnf_b"])
        out = ng.affine(h, p["head_w"], p["head_b"])
        return ng.reshape(out, (batch, length))


NetModel = FFNModel | GRUModel | TransformerModel


def build_model(kind: str, input_width: int, rng: np.random.Generator | None = None,
                dtype=np.float32) -> NetModel:
    if kind == "ffn":
        return FFNModel(FFNConfig(input_width), rng, dtype)
    if kind == "rnn":
        return GRUModel(RNNConfig(input_width), rng, dtype)
    if kind in RET_PRESETS:
        blocks, dim = RET_PRESETS[kind]
        return TransformerModel(TransformerConfig(input_width, blocks, dim), rng, dtype)
    raise ValidationError(f"unknown trainable model kind {kind!r}; expected ffn, rnn, or {sorted(RET_PRESETS)}")


# -- baselines -----------------------------------------------------------------


@dataclass(frozen=True)
class DistanceBaseline:
    """Route energy as a line in route distance, the 'range' mental model."""

    slope: float  # Wh per meter
    intercept: float  # Wh


def fit_distance_baseline(train_routes: list[Route]) -> DistanceBaseline:
    """Ordinary least squares of total route energy on total route distance."""
    if len(train_routes) < 2:
        raise DegenerateFitError(f"need >= 2 routes, got {len(train_routes)}")
    xs = np.array([r.total_distance for r in train_routes], dtype=np.float64)
    ys = np.array([r.total_energy for r in train_routes], dtype=np.float64)
    if np.any(np.isnan(ys)):
        raise ValidationError("all routes need actual_energy to fit the distance baseline")
    var = np.var(xs)
    if var == 0:
        raise DegenerateFitError("all routes have the same total distance")
    slope = float(np.cov(xs, ys, bias=True)[0, 1] / var)
    intercept = float(ys.mean() - slope * xs.mean())
    return DistanceBaseline(slope=slope, intercept=intercept)


# -- uniform prediction interface ----------------------------------------------
# Predictors consume pre-encoded padded batches (B, L, F) plus a {0,1} mask and
# return raw per-segment Wh. Entries at masked positions are unspecified; the
# harnesses multiply by the mask. Every predict_batch call bumps forward_count
# so the bench protocol can be verified.


def _decode_continuous(feats: np.ndarray, schema: FeatureSchema) -> tuple[np.ndarray, ...]:
    means = np.asarray(schema.means)
    stds = np.asarray(schema.stds)
    cont = feats[..., :4].astype(np.float64) * stds + means
    return cont[..., 0], cont[..., 1], cont[..., 2], cont[..., 3]


class NetPredictor:
    """Wraps a trained network; converts its kWh outputs back to Wh."""

    def __init__(self, model: NetModel, name: str, schema: FeatureSchema):
        self.model = model
        self.name = name
        self.schema = schema
        self.schema_fingerprint = schema.fingerprint()
        self.forward_count = 0

    def predict_batch(self, feats: np.ndarray, mask: np.ndarray) -> np.ndarray:
        self.forward_count += 1
        x = ng.Tensor(feats.astype(np.float32, copy=False))
        out = self.model.forward(x)
        return out.data.astype(np.float64) * 1000.0


class DistancePredictor:
    """Distance-baseline route prediction spread over segments by distance share."""

    name = "distance"

    def __init__(self, baseline: DistanceBaseline, schema: FeatureSchema):
        self.baseline = baseline
        self.schema = schema
        self.schema_fingerprint = schema.fingerprint()
        self.forward_count = 0

    def predict_batch(self, feats: np.ndarray, mask: np.ndarray) -> np.ndarray:
        self.forward_count += 1
        d, _, _, _ = _decode_continuous(feats, self.schema)
        d = d * mask
        total = d.sum(axis=1, keepdims=True)
        route_pred = self.baseline.slope * total + self.baseline.intercept
        share = np.divide(d, total, out=np.full_like(d, 1.0 / max(1, d.shape[1])),
                          where=total > 0)
        return route_pred * share


class PhysicsPredictor:
    """Perfect-physics / imperfect-information baseline over encoded features."""

    name = "physics"

    def __init__(self, fleet: tuple[VehicleModel, ...], schema: FeatureSchema):
        if len(fleet) != schema.vehicle_vocab:
            raise SchemaMismatchError(
                f"fleet size {len(fleet)} != schema vocab {schema.vehicle_vocab}"
            )
        self.schema = schema
        self.schema_fingerprint = schema.fingerprint()
        self.forward_count = 0
        self.fleet = tuple(sorted(fleet, key=lambda v: v.id))
        self._base = np.array([v.traction_base for v in self.fleet])
        self._quad = np.array([v.traction_quad for v in self.fleet])
        self._hvac = np.array([v.hvac_coeff for v in self.fleet])
        self._derate = np.array([v.cold_derate for v in self.fleet])

    def predict_batch(self, feats: np.ndarray, mask: np.ndarray) -> np.ndarray:
        self.forward_count += 1
        d, v, t_stat, temp = _decode_continuous(feats, self.schema)
        vehicle = feats[..., 5:].argmax(axis=-1)
        v_safe = np.maximum(v, 1e-9)
        traction = (d / 1000.0) * (self._base[vehicle] + self._quad[vehicle] * v * v)
        t_total_h = (d / v_safe + t_stat) / 3600.0
        hvac = self._hvac[vehicle] * np.abs(temp - CABIN_SETPOINT_C) * t_total_h
        derate = 1.0 + self._derate[vehicle] * np.maximum(0.0, -temp)
        return derate * (traction + hvac) * mask


Predictor = NetPredictor | DistancePredictor | PhysicsPredictor


def predict_route_raw(predictor: Predictor, route: Route, schema: FeatureSchema) -> np.ndarray:
    """Raw per-segment Wh for one route (may contain negative values)."""
    if predictor.schema_fingerprint != schema.fingerprint():
        raise SchemaMismatchError(
            f"{predictor.name}: model schema {predictor.schema_fingerprint[:12]} != "
            f"data schema {schema.fingerprint()[:12]}"
        )
    feats = route_to_matrix(route, schema)[None, :, :]
    mask = np.ones(feats.shape[:2])
    return predictor.predict_batch(feats, mask)[0]


def route_energy(predictor: Predictor, route: Route, schema: FeatureSchema) -> float:
    """Route-level energy in Wh for reporting: segment sum floored at zero."""
    raw = float(predict_route_raw(predictor, route, schema).sum())
    return max(0.0, raw)


# -- checkpoint glue -----------------------------------------------------------


def _schema_to_dict(schema: FeatureSchema) -> dict:
    return {
        "version": schema.version,
        "vehicle_vocab": schema.vehicle_vocab,
        "means": list(schema.means),
        "stds": list(schema.stds),
    }


def _schema_from_dict(d: dict) -> FeatureSchema:
    return FeatureSchema(vehicle_vocab=int(d["vehicle_vocab"]), means=tuple(d["means"]),
                         stds=tuple(d["stds"]), version=d["version"])


def predictor_to_checkpoint(predictor: Predictor) -> ng.Checkpoint:
    schema = predictor.schema
    config: dict = {"schema": _schema_to_dict(schema)}
    if isinstance(predictor, NetPredictor):
        model = predictor.model
        tensors = {p.name: p.data for p in model.params}
        config["input_width"] = model.config.input_width
        if isinstance(model, TransformerModel):
            config["blocks"] = model.config.blocks
            config["dim"] = model.config.dim
        return ng.Checkpoint(predictor.name, config, schema.fingerprint(), tensors)
    if isinstance(predictor, DistancePredictor):
        tensors = {
            "slope": np.array([predictor.baseline.slope], dtype=np.float32),
            "intercept": np.array([predictor.baseline.intercept], dtype=np.float32),
        }
        return ng.Checkpoint("distance", config, schema.fingerprint(), tensors)
    if isinstance(predictor, PhysicsPredictor):
        from .simgen import fleet_to_json

        config["fleet"] = fleet_to_json(predictor.fleet)
        return ng.Checkpoint("physics", config, schema.fingerprint(), tensors={})
    raise TypeError(f"cannot checkpoint {type(predictor).__name__}")


def predictor_from_checkpoint(ckpt: ng.Checkpoint) -> Predictor:
    schema = _schema_from_dict(ckpt.config["schema"])
    if ckpt.schema_fingerprint != schema.fingerprint():
        raise SchemaMismatchError("checkpoint fingerprint does not match its embedded schema")
    if ckpt.kind == "distance":
        baseline = DistanceBaseline(float(ckpt.tensors["slope"][0]),
                                    float(ckpt.tensors["intercept"][0]))
        return DistancePredictor(baseline, schema)
    if ckpt.kind == "physics":
        from .simgen import fleet_from_json

        return PhysicsPredictor(fleet_from_json(ckpt.config["fleet"]), schema)
    if ckpt.kind in RET_PRESETS:
        cfg = TransformerConfig(int(ckpt.config["input_width"]),
                                int(ckpt.config["blocks"]), int(ckpt.config["dim"]))
        model: NetModel = TransformerModel(cfg)
    else:
        model = build_model(ckpt.kind, int(ckpt.config["input_width"]))
    for p in model.params:
        if p.name not in ckpt.tensors:
            raise ng.CheckpointFormatError(f"checkpoint missing tensor {p.name!r}")
        if tuple(ckpt.tensors[p.name].shape) != p.data.shape:
            raise ng.ShapeError(
                f"tensor {p.name!r}: checkpoint shape {ckpt.tensors[p.name].shape} "
                f"!= model shape {p.data.shape}"
            )
        p.data = ckpt.tensors[p.name].astype(p.data.dtype)
        p.zero_grad()
    return NetPredictor(model, ckpt.kind, schema)
