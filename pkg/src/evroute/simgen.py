"""Synthetic route generator and full-knowledge physics oracle.

The oracle computes per-segment ground-truth energy from traction, HVAC, a
cold-weather derate, per-route latent conditions (traffic, driver style,
HVAC usage) and multiplicative log-normal noise. The learned estimators only
ever see the observable segment features, so the latents create the
irreducible gap a perfect-information simulation would not have.

Generation is deterministic for a given config: each route draws from its
own counter-based RNG stream keyed by (seed, route_index), so results are
identical whether routes are produced serially or fanned out across threads.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    MAX_LEN,
    Dataset,
    FeatureSchema,
    LatentConditions,
    Route,
    Segment,
    ValidationError,
    VehicleModel,
    fit_schema,
)

CABIN_SETPOINT_C = 21.0

# (weight, mean, std) per mixture component; route temperature is constant
# across its segments. The hot and cold components guarantee non-empty
# >=35C and <=0C evaluation slices.
DEFAULT_TEMPERATURE_MIXTURE = ((0.70, 15.0, 8.0), (0.15, 38.0, 2.0), (0.15, -5.0, 3.0))
TEMPERATURE_CLAMP_C = (-20.0, 45.0)

# Stem legs connect the station and the delivery zone: faster, longer, no
# delivery at the end. On-zone legs hop between customer stops.
STEM_SPEED_MPS = (15.0, 25.0)
STEM_DISTANCE_M = (2000.0, 8000.0)
ONZONE_SPEED_MPS = (4.0, 12.0)
ONZONE_DISTANCE_M = (100.0, 1500.0)
ONZONE_STATIONARY_S = (60.0, 420.0)

NOISE_SIGMA = 0.05

LATENT_TRAFFIC_RANGE = (0.8, 1.4)
LATENT_DRIVER_RANGE = (0.9, 1.2)
LATENT_HVAC_RANGE = (0.5, 2.0)


def default_fleet() -> tuple[VehicleModel, ...]:
    """Four synthetic vehicles spread enough for the one-hot to carry signal."""
    return (
        VehicleModel(0, "VAN-A", 120.0, 0.8, 50.0, 0.010, 60.0),
        VehicleModel(1, "VAN-B", 150.0, 1.0, 60.0, 0.012, 80.0),
        VehicleModel(2, "CAR-A", 90.0, 0.6, 40.0, 0.008, 40.0),
        VehicleModel(3, "VAN-C", 135.0, 0.9, 55.0, 0.010, 70.0),
    )


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    n_routes: int = 1000
    route_length_range: tuple[int, int] = (20, 100)
    temperature_mixture: tuple[tuple[float, float, float], ...] = DEFAULT_TEMPERATURE_MIXTURE
    stem_fraction: float = 0.10
    vehicle_fleet: tuple[VehicleModel, ...] = field(default_factory=default_fleet)

    def __post_init__(self):
        lo, hi = self.route_length_range
        if not 1 <= lo <= hi <= MAX_LEN:
            raise ValidationError(
                f"route_length_range must satisfy 1 <= min <= max <= {MAX_LEN}, got {lo, hi}"
            )
        if self.n_routes < 0:
            raise ValidationError("n_routes must be >= 0")
        weights = sum(w for w, _, _ in self.temperature_mixture)
        if abs(weights - 1.0) > 1e-9:
            raise ValidationError(f"temperature mixture weights must sum to 1, got {weights}")
        if not 0.0 <= self.stem_fraction <= 1.0:
            raise ValidationError("stem_fraction must be in [0, 1]")
        if not self.vehicle_fleet:
            raise ValidationError("vehicle_fleet must be nonempty")
        ids = sorted(v.id for v in self.vehicle_fleet)
        if ids != list(range(len(self.vehicle_fleet))):
            raise ValidationError(f"fleet ids must be dense 0..V-1, got {ids}")


def physics_energy_full(
    segment: Segment,
    vehicle: VehicleModel,
    latents: LatentConditions,
    noise_draw: float = 1.0,
) -> float:
    """Ground-truth energy (Wh) for one segment under full knowledge.

    E = derate(T) * [ d_km * (A + B*v^2) * traffic * driver
                      + hvac_coeff * |T - 21| * hvac_usage * t_total_h ] * noise
    with t_total = d/v + t_stationary and derate(T) = 1 + cold_derate * max(0, -T).
    """
    if noise_draw <= 0:
        raise ValidationError(f"noise_draw must be > 0, got {noise_draw}")
    d_km = segment.distance / 1000.0
    traction = (
        d_km
        * (vehicle.traction_base + vehicle.traction_quad * segment.speed_moving**2)
        * latents.traffic_factor
        * latents.driver_factor
    )
    t_total_s = segment.distance / segment.speed_moving + segment.time_stationary
    hvac = (
        vehicle.hvac_coeff
        * abs(segment.air_temperature - CABIN_SETPOINT_C)
        * latents.hvac_usage_factor
        * (t_total_s / 3600.0)
    )
    derate = 1.0 + vehicle.cold_derate * max(0.0, -segment.air_temperature)
    return derate * (traction + hvac) * noise_draw


_NOMINAL_LATENTS = LatentConditions(1.0, 1.0, 1.0, 0.0)


def physics_energy_proxy(segment: Segment, vehicle: VehicleModel) -> float:
    """Imperfect-information energy estimate (Wh): the oracle at nominal latents."""
    return physics_energy_full(segment, vehicle, _NOMINAL_LATENTS, noise_draw=1.0)


def _route_rng(seed: int, route_index: int) -> np.random.Generator:
    # Philox is counter-based; keying the stream on (seed, index) makes each
    # route's draws independent of generation order and thread count.
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, route_index))))


def split_for_route_id(route_id: str) -> str:
    """Stable 80/10/10 split from a hash of the route id."""
    digest = hashlib.sha256(route_id.encode()).digest()
    bucket = int.from_bytes(digest[:8], "big") % 100
    if bucket < 80:
        return "train"
    if bucket < 90:
        return "val"
    return "test"


def _draw_temperature(rng: np.random.Generator, mixture, clamp=TEMPERATURE_CLAMP_C) -> float:
    weights = [w for w, _, _ in mixture]
    idx = rng.choice(len(mixture), p=weights)
    _, mean, std = mixture[idx]
    return float(np.clip(rng.normal(mean, std), clamp[0], clamp[1]))


def _generate_route(config: GeneratorConfig, index: int) -> Route:
    rng = _route_rng(config.seed, index)
    lo, hi = config.route_length_range
    length = int(rng.integers(lo, hi + 1))
    vehicle = config.vehicle_fleet[int(rng.integers(0, len(config.vehicle_fleet)))]
    temperature = _draw_temperature(rng, config.temperature_mixture)
    latents = LatentConditions(
        traffic_factor=float(rng.uniform(*LATENT_TRAFFIC_RANGE)),
        driver_factor=float(rng.uniform(*LATENT_DRIVER_RANGE)),
        hvac_usage_factor=float(rng.uniform(*LATENT_HVAC_RANGE)),
        noise_sigma=NOISE_SIGMA,
    )

    n_stem_each = max(1, round(length * config.stem_fraction / 2)) if config.stem_fraction > 0 else 0
    front = min(n_stem_each, length)
    back = min(n_stem_each, length - front)
    stem_flags = [True] * front + [False] * (length - front - back) + [True] * back

    segments = []
    for is_stem in stem_flags:
        if is_stem:
            speed = float(rng.uniform(*STEM_SPEED_MPS))
            distance = float(rng.uniform(*STEM_DISTANCE_M))
            t_stat = 0.0
        else:
            speed = float(rng.uniform(*ONZONE_SPEED_MPS))
            distance = float(rng.uniform(*ONZONE_DISTANCE_M))
            t_stat = float(rng.uniform(*ONZONE_STATIONARY_S))
        segments.append(
            Segment(
                distance=distance,
                speed_moving=speed,
                time_stationary=t_stat,
                air_temperature=temperature,
                is_stem=is_stem,
            )
        )

    noise = np.exp(rng.normal(0.0, NOISE_SIGMA, size=length))
    energies = tuple(
        physics_energy_full(seg, vehicle, latents, noise_draw=float(n))
        for seg, n in zip(segments, noise)
    )
    return Route(
        route_id=f"s{config.seed}-r{index:06d}",
        vehicle_id=vehicle.id,
        segments=tuple(segments),
        actual_energy=energies,
        latents=latents,
    )


def generate_dataset(config: GeneratorConfig) -> Dataset:
    """Generate n_routes synthetic routes with oracle energies and split labels.

    Output is a pure function of the config. The feature schema is fit on the
    train split; with no train segments it falls back to identity statistics.
    """
    routes = tuple(_generate_route(config, i) for i in range(config.n_routes))
    split = {r.route_id: split_for_route_id(r.route_id) for r in routes}
    vocab = len(config.vehicle_fleet)
    train_routes = [r for r in routes if split[r.route_id] == "train"]
    if sum(len(r) for r in train_routes) >= 2:
        schema = fit_schema(train_routes, vocab)
    else:
        schema = FeatureSchema.identity(vocab)
    return Dataset(routes=routes, split=split, generator_seed=config.seed, schema=schema)


def soc_trace(route: Route, vehicle: VehicleModel) -> tuple[tuple[float, ...], float, bool]:
    """State-of-charge after each segment, the returning SOC, and feasibility.

    SOC starts at 100% and is clamped at 0 for display; feasibility uses the
    unclamped value so an over-budget route is reported infeasible.
    """
    if route.actual_energy is None:
        raise ValidationError(f"route {route.route_id!r} has no actual_energy")
    capacity_wh = vehicle.battery_capacity_kwh * 1000.0
    soc = 100.0
    trace = []
    for e in route.actual_energy:
        soc -= 100.0 * e / capacity_wh
        trace.append(max(0.0, soc))
    return tuple(trace), max(0.0, soc), soc >= 0.0


def export_soc_scatter(
    dataset: Dataset, fleet: tuple[VehicleModel, ...], path: str | Path
) -> None:
    """One CSV row per route: normalized distance, returning SOC %, mean temp.

    Distances are normalized by the longest route in the dataset so the
    x-axis is comparable across fleets.
    """
    by_id = {v.id: v for v in fleet}
    max_distance = max((r.total_distance for r in dataset.routes), default=0.0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["norm_distance", "returning_soc_pct", "mean_temp_c"])
            for route in dataset.routes:
                _, returning, _ = soc_trace(route, by_id[route.vehicle_id])
                norm = route.total_distance / max_distance if max_distance > 0 else 0.0
                writer.writerow([repr(norm), repr(returning), repr(route.mean_temperature)])
    except OSError as exc:
        raise OSError(f"failed writing scatter CSV to {path}: {exc}") from exc


def reference_route(vehicle_id: int = 0, temperature_c: float = 21.0, length: int = 60) -> Route:
    """A fixed representative route shape for temperature-sensitivity checks.

    Three stem legs on each end, slow short stop-dense legs in between. Only
    the ambient temperature varies between calls; everything else is pinned.
    """
    n_stem = 3
    segments = []
    for i in range(length):
        if i < n_stem or i >= length - n_stem:
            segments.append(Segment(5000.0, 20.0, 0.0, temperature_c, is_stem=True))
        else:
            segments.append(Segment(600.0, 6.0, 300.0, temperature_c, is_stem=False))
    return Route(route_id=f"reference-{temperature_c}", vehicle_id=vehicle_id, segments=tuple(segments))


def fleet_to_json(fleet: tuple[VehicleModel, ...]) -> list[dict]:
    return [
        {
            "id": v.id,
            "name": v.name,
            "traction_base": v.traction_base,
            "traction_quad": v.traction_quad,
            "hvac_coeff": v.hvac_coeff,
            "cold_derate": v.cold_derate,
            "battery_capacity_kwh": v.battery_capacity_kwh,
        }
        for v in fleet
    ]


def fleet_from_json(records: list[dict]) -> tuple[VehicleModel, ...]:
    return tuple(
        VehicleModel(
            id=int(r["id"]),
            name=str(r["name"]),
            traction_base=float(r["traction_base"]),
            traction_quad=float(r["traction_quad"]),
            hvac_coeff=float(r["hvac_coeff"]),
            cold_derate=float(r["cold_derate"]),
            battery_capacity_kwh=float(r["battery_capacity_kwh"]),
        )
        for r in sorted(records, key=lambda r: r["id"])
    )
