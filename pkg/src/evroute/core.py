"""Domain types, feature encoding, and dataset serialization.

Everything downstream (generator, models, eval, bench) shares the types in
this module. All types are immutable after construction and the operations
are pure functions, so they are safe to share across threads.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAX_LEN = 256

# z-scored continuous features, in this order, then is_stem, then the
# vehicle one-hot block. Reordering this list silently breaks every trained
# checkpoint, which is why FeatureSchema carries a version tag.
CONTINUOUS_FEATURES = ("distance", "speed_moving", "time_stationary", "air_temperature")

SCHEMA_VERSION = "fs-1"

STD_FLOOR = 1e-6

SPLITS = ("train", "val", "test")


class ValidationError(ValueError):
    """An input violates a domain-type invariant."""


class UnknownVehicleError(ValidationError):
    """vehicle_id outside the schema's one-hot vocabulary."""


class RouteLengthError(ValidationError):
    """Route length outside [1, MAX_LEN]."""


class DatasetParseError(ValueError):
    """Malformed dataset file; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class SchemaVersionError(ValueError):
    """Schema file written by an incompatible version of this package."""


def _require_finite(name: str, value: float) -> None:
    if not math.isfinite(value):
        raise ValidationError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class VehicleModel:
    """Physics constants and battery capacity for one synthetic vehicle.

    traction_base is Wh per km at crawl; traction_quad multiplies v^2
    (Wh*s^2/(m^2*km)); hvac_coeff is W per degC of cabin-setpoint deviation;
    cold_derate is the fractional consumption penalty per degC below 0.
    """

    id: int
    name: str
    traction_base: float
    traction_quad: float
    hvac_coeff: float
    cold_derate: float
    battery_capacity_kwh: float

    def __post_init__(self):
        if self.id < 0:
            raise ValidationError(f"vehicle id must be >= 0, got {self.id}")
        if self.traction_base <= 0:
            raise ValidationError("traction_base must be > 0")
        if self.traction_quad < 0:
            raise ValidationError("traction_quad must be >= 0")
        if self.hvac_coeff < 0:
            raise ValidationError("hvac_coeff must be >= 0")
        if not 0 <= self.cold_derate < 0.1:
            raise ValidationError("cold_derate must be in [0, 0.1)")
        if self.battery_capacity_kwh <= 0:
            raise ValidationError("battery_capacity_kwh must be > 0")


@dataclass(frozen=True)
class Segment:
    """One travel leg between consecutive stops plus the delivery at its end."""

    distance: float  # meters
    speed_moving: float  # m/s
    time_stationary: float  # seconds parked and delivering
    air_temperature: float  # degC at segment start
    is_stem: bool = False

    def __post_init__(self):
        for name in ("distance", "speed_moving", "time_stationary", "air_temperature"):
            _require_finite(name, getattr(self, name))
        if self.distance < 0:
            raise ValidationError(f"distance must be >= 0, got {self.distance}")
        if self.speed_moving <= 0:
            raise ValidationError(f"speed_moving must be > 0, got {self.speed_moving}")
        if self.time_stationary < 0:
            raise ValidationError(f"time_stationary must be >= 0, got {self.time_stationary}")


@dataclass(frozen=True)
class LatentConditions:
    """Per-route conditions the estimators never observe.

    The generator draws these to create the gap between what a
    perfect-information simulation would predict and what actually happens.
    """

    traffic_factor: float = 1.0
    driver_factor: float = 1.0
    hvac_usage_factor: float = 1.0
    noise_sigma: float = 0.05

    def __post_init__(self):
        for name in ("traffic_factor", "driver_factor", "hvac_usage_factor", "noise_sigma"):
            _require_finite(name, getattr(self, name))
        if self.traffic_factor < 0.5:
            raise ValidationError("traffic_factor must be >= 0.5")
        if self.driver_factor < 0.5:
            raise ValidationError("driver_factor must be >= 0.5")
        if not 0.0 <= self.hvac_usage_factor <= 2.0:
            raise ValidationError("hvac_usage_factor must be in [0, 2]")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class Route:
    """An ordered sequence of segments executed by one vehicle."""

    route_id: str
    vehicle_id: int
    segments: tuple[Segment, ...]
    actual_energy: tuple[float, ...] | None = None  # Wh per segment
    latents: LatentConditions | None = None  # present only in generated data

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not 1 <= len(self.segments) <= MAX_LEN:
            raise RouteLengthError(
                f"route {self.route_id!r} has {len(self.segments)} segments, "
                f"allowed range is [1, {MAX_LEN}]"
            )
        if self.actual_energy is not None:
            object.__setattr__(self, "actual_energy", tuple(self.actual_energy))
            if len(self.actual_energy) != len(self.segments):
                raise ValidationError(
                    f"route {self.route_id!r}: {len(self.actual_energy)} energies "
                    f"for {len(self.segments)} segments"
                )
            for e in self.actual_energy:
                _require_finite("actual_energy", e)
                if e < 0:
                    raise ValidationError("actual_energy entries must be >= 0")

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def total_distance(self) -> float:
        return sum(s.distance for s in self.segments)

    @property
    def total_energy(self) -> float | None:
        if self.actual_energy is None:
            return None
        return sum(self.actual_energy)

    @property
    def mean_temperature(self) -> float:
        return sum(s.air_temperature for s in self.segments) / len(self.segments)


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature layout plus the normalization statistics fit on train.

    Encoded width F = 5 + vehicle_vocab: four z-scored continuous features,
    the 0/1 stem flag, then the vehicle one-hot block.
    """

    vehicle_vocab: int
    means: tuple[float, ...]
    stds: tuple[float, ...]
    version: str = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "means", tuple(float(m) for m in self.means))
        object.__setattr__(self, "stds", tuple(float(s) for s in self.stds))
        if self.vehicle_vocab < 1:
            raise ValidationError("vehicle_vocab must be >= 1")
        n = len(CONTINUOUS_FEATURES)
        if len(self.means) != n or len(self.stds) != n:
            raise ValidationError(f"means/stds must each have {n} entries")
        if any(s <= 0 for s in self.stds):
            raise ValidationError("stds must be > 0 (fit_schema floors them)")

    @property
    def feature_names(self) -> tuple[str, ...]:
        onehot = tuple(f"onehot_{i}" for i in range(self.vehicle_vocab))
        return CONTINUOUS_FEATURES + ("is_stem",) + onehot

    @property
    def width(self) -> int:
        return 5 + self.vehicle_vocab

    def fingerprint(self) -> str:
        payload = json.dumps(
            {
                "version": self.version,
                "feature_names": list(self.feature_names),
                "vehicle_vocab": self.vehicle_vocab,
                "means": list(self.means),
                "stds": list(self.stds),
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()

    @staticmethod
    def identity(vehicle_vocab: int) -> "FeatureSchema":
        """Schema with mean 0 / std 1, used when there is nothing to fit."""
        n = len(CONTINUOUS_FEATURES)
        return FeatureSchema(vehicle_vocab=vehicle_vocab, means=(0.0,) * n, stds=(1.0,) * n)


@dataclass(frozen=True)
class Dataset:
    """Routes plus their split assignment, provenance seed, and schema."""

    routes: tuple[Route, ...]
    split: dict[str, str] = field(default_factory=dict)  # route_id -> train|val|test
    generator_seed: int = 0
    schema: FeatureSchema = field(default_factory=lambda: FeatureSchema.identity(4))

    def __post_init__(self):
        object.__setattr__(self, "routes", tuple(self.routes))
        seen = set()
        for r in self.routes:
            if r.route_id in seen:
                raise ValidationError(f"duplicate route_id {r.route_id!r}")
            seen.add(r.route_id)
            label = self.split.get(r.route_id)
            if label not in SPLITS:
                raise ValidationError(
                    f"route {r.route_id!r} has split {label!r}, expected one of {SPLITS}"
                )
            if r.vehicle_id >= self.schema.vehicle_vocab:
                raise UnknownVehicleError(
                    f"route {r.route_id!r} has vehicle_id {r.vehicle_id} "
                    f">= vocab {self.schema.vehicle_vocab}"
                )

    def routes_in(self, split: str) -> list[Route]:
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}")
        return [r for r in self.routes if self.split[r.route_id] == split]

    def __len__(self) -> int:
        return len(self.routes)


def encode_segment(segment: Segment, vehicle_id: int, schema: FeatureSchema) -> np.ndarray:
    """Encode one segment as a width-F float vector.

    Continuous features are z-scored with the schema statistics, is_stem maps
    to {0, 1}, and the vehicle one-hot block has exactly one position set.
    """
    if not 0 <= vehicle_id < schema.vehicle_vocab:
        raise UnknownVehicleError(
            f"vehicle_id {vehicle_id} outside vocabulary of size {schema.vehicle_vocab}"
        )
    out = np.zeros(schema.width, dtype=np.float64)
    raw = (segment.distance, segment.speed_moving, segment.time_stationary, segment.air_temperature)
    for i, (x, m, s) in enumerate(zip(raw, schema.means, schema.stds)):
        out[i] = (x - m) / s
    out[4] = 1.0 if segment.is_stem else 0.0
    out[5 + vehicle_id] = 1.0
    return out


def route_to_matrix(route: Route, schema: FeatureSchema) -> np.ndarray:
    """Encode a route as an L x F matrix, row t = encode_segment(segments[t])."""
    mat = np.empty((len(route.segments), schema.width), dtype=np.float64)
    for t, seg in enumerate(route.segments):
        mat[t] = encode_segment(seg, route.vehicle_id, schema)
    return mat


def fit_schema(train_routes: list[Route], vehicle_vocab: int) -> FeatureSchema:
    """Fit z-score statistics over every segment of the training routes.

    Uses the population standard deviation, floored at STD_FLOOR so constant
    columns cannot divide by zero.
    """
    rows = [
        (s.distance, s.speed_moving, s.time_stationary, s.air_temperature)
        for r in train_routes
        for s in r.segments
    ]
    if len(rows) < 2:
        raise ValidationError(f"need at least 2 training segments to fit a schema, got {len(rows)}")
    arr = np.asarray(rows, dtype=np.float64)
    means = arr.mean(axis=0)
    stds = np.maximum(arr.std(axis=0), STD_FLOOR)
    return FeatureSchema(vehicle_vocab=vehicle_vocab, means=tuple(means), stds=tuple(stds))


# ---------------------------------------------------------------------------
# Serialization. One route per JSONL line; schema (plus the generator seed)
# lives in a sidecar schema.json next to the routes file. Floats are written
# with repr-style shortest decimal form, which round-trips float64 exactly.


def _route_to_json(route: Route, split: str) -> dict:
    rec: dict = {
        "route_id": route.route_id,
        "vehicle_id": route.vehicle_id,
        "split": split,
        "segments": [
            {
                "d_m": s.distance,
                "v_mps": s.speed_moving,
                "t_stat_s": s.time_stationary,
                "temp_c": s.air_temperature,
                "is_stem": s.is_stem,
            }
            for s in route.segments
        ],
    }
    if route.actual_energy is not None:
        rec["energy_wh"] = list(route.actual_energy)
    if route.latents is not None:
        rec["latents"] = {
            "traffic_factor": route.latents.traffic_factor,
            "driver_factor": route.latents.driver_factor,
            "hvac_usage_factor": route.latents.hvac_usage_factor,
            "noise_sigma": route.latents.noise_sigma,
        }
    return rec


def _route_from_json(rec: dict) -> tuple[Route, str]:
    segments = tuple(
        Segment(
            distance=float(s["d_m"]),
            speed_moving=float(s["v_mps"]),
            time_stationary=float(s["t_stat_s"]),
            air_temperature=float(s["temp_c"]),
            is_stem=bool(s["is_stem"]),
        )
        for s in rec["segments"]
    )
    latents = None
    if "latents" in rec:
        latents = LatentConditions(**rec["latents"])
    route = Route(
        route_id=rec["route_id"],
        vehicle_id=int(rec["vehicle_id"]),
        segments=segments,
        actual_energy=tuple(rec["energy_wh"]) if "energy_wh" in rec else None,
        latents=latents,
    )
    return route, rec["split"]


def schema_sidecar_path(routes_path: Path) -> Path:
    return Path(routes_path).parent / "schema.json"


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write routes as JSONL at `path` and the schema sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for route in dataset.routes:
            fh.write(json.dumps(_route_to_json(route, dataset.split[route.route_id])))
            fh.write("\n")
    sidecar = {
        "version": dataset.schema.version,
        "feature_names": list(dataset.schema.feature_names),
        "vehicle_vocab": dataset.schema.vehicle_vocab,
        "means": list(dataset.schema.means),
        "stds": list(dataset.schema.stds),
        "generator_seed": dataset.generator_seed,
    }
    with open(schema_sidecar_path(path), "w") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")


def read_dataset(path: str | Path) -> Dataset:
    """Read a JSONL routes file and its schema sidecar back into a Dataset."""
    path = Path(path)
    sidecar_path = schema_sidecar_path(path)
    if not sidecar_path.exists():
        raise DatasetParseError(f"missing schema sidecar {sidecar_path}")
    with open(sidecar_path) as fh:
        sidecar = json.load(fh)
    version = sidecar.get("version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"schema version {version!r} not supported (expected {SCHEMA_VERSION!r})"
        )
    schema = FeatureSchema(
        vehicle_vocab=int(sidecar["vehicle_vocab"]),
        means=tuple(sidecar["means"]),
        stds=tuple(sidecar["stds"]),
        version=version,
    )
    routes: list[Route] = []
    split: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                route, label = _route_from_json(rec)
            except (json.JSONDecodeError, KeyError, TypeError, ValidationError) as exc:
                raise DatasetParseError(str(exc), line=lineno) from exc
            routes.append(route)
            split[route.route_id] = label
    return Dataset(
        routes=tuple(routes),
        split=split,
        generator_seed=int(sidecar.get("generator_seed", 0)),
        schema=schema,
    )
