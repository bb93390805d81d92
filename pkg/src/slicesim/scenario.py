"""Highway drop generation and constant-speed mobility on a wrap-around strip.

Six lanes, three per direction.  Vehicle longitudinal positions follow a
renewal process with uniform inter-vehicle gaps inside a density band; the
strip is a torus in x so vehicles never leave.  Roadside units sit on a fixed
grid behind the first lane.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .simcli import SimConfig

SPEED_MPS = 38.89  # 140 km/h, every vehicle
LANE_COUNT = 6
LANE_WIDTH_M = 4.0
RSU_SPACING_M = 1732.0
RSU_LATERAL_M = -35.0  # 35 m behind lane 0

SCENARIO_CSV_VERSION = "scenario-csv-v1"

_REJECTION_BUDGET = 10_000


@dataclass(frozen=True, slots=True)
class Position:
    x: float
    y: float


@dataclass(frozen=True, slots=True)
class Vehicle:
    vid: int
    position: Position
    lane: int
    direction: int  # -1 for lanes 0-2, +1 for lanes 3-5
    speed: float
    wants_video: bool


@dataclass(frozen=True, slots=True)
class Rsu:
    rid: int
    position: Position


@dataclass(frozen=True, slots=True)
class Scenario:
    rsus: tuple[Rsu, ...]
    vehicles: tuple[Vehicle, ...]
    highway_length: float
    density_band: tuple[float, float]

    def video_vehicle_ids(self) -> list[int]:
        return [v.vid for v in self.vehicles if v.wants_video]


def lane_direction(lane: int) -> int:
    return -1 if lane < LANE_COUNT // 2 else 1


def lane_y(lane: int) -> float:
    return lane * LANE_WIDTH_M


def _lane_positions(length: float, d_min: float, d_max: float, rng) -> np.ndarray:
    """Sample one lane of x positions whose circular gaps all lie in [d_min, d_max].

    Gaps are drawn sequentially; the leftover closing gap on the torus must
    also land in the band, so the draw is retried when it does not.
    """
    for _ in range(_REJECTION_BUDGET):
        gaps = []
        total = 0.0
        while length - total > d_max:
            g = rng.uniform(d_min, d_max)
            gaps.append(g)
            total += g
        if length - total < d_min:
            continue
        phase = rng.uniform(0.0, length)
        xs = (phase + np.concatenate(([0.0], np.cumsum(gaps)))) % length
        return np.sort(xs)
    raise RuntimeError("gap sampling failed to close the torus")


def generate_drop(config: "SimConfig", rng) -> Scenario:
    """Build an immutable vehicle drop from a config and a topology RNG stream."""
    d_min = float(config.density_min_m)
    d_max = float(config.density_max_m)
    length = float(config.highway_length_m)
    if not 0.0 < d_min < d_max:
        raise ValueError(f"density band ({d_min}, {d_max}) must satisfy 0 < min < max")
    if length < 2.0 * d_max:
        raise ValueError(f"highway length {length} m too short for gaps up to {d_max} m")

    vehicles = []
    vid = 0
    for lane in range(LANE_COUNT):
        for x in _lane_positions(length, d_min, d_max, rng):
            vehicles.append(
                Vehicle(
                    vid=vid,
                    position=Position(float(x), lane_y(lane)),
                    lane=lane,
                    direction=lane_direction(lane),
                    speed=SPEED_MPS,
                    wants_video=bool(rng.random() < config.video_fraction),
                )
            )
            vid += 1

    # RSU count targets the nominal 1732 m grid; on the torus the sites are
    # spread evenly so no pair of consecutive RSUs is squeezed by the wrap seam
    n_rsu = int(np.ceil(length / RSU_SPACING_M))
    spacing = length / n_rsu
    rsus = tuple(
        Rsu(rid=i, position=Position(i * spacing, RSU_LATERAL_M))
        for i in range(n_rsu)
    )
    return Scenario(rsus, tuple(vehicles), length, (d_min, d_max))


def step_mobility(scenario: Scenario, dt_s: float) -> Scenario:
    """Advance every vehicle by speed*dt along its direction, wrapping in x."""
    if dt_s < 0:
        raise ValueError("dt must be non-negative")
    length = scenario.highway_length
    moved = tuple(
        replace(
            v,
            position=Position((v.position.x + v.direction * v.speed * dt_s) % length, v.position.y),
        )
        for v in scenario.vehicles
    )
    return replace(scenario, vehicles=moved)


def distance(a: Position, b: Position, highway_length: float) -> float:
    """Euclidean distance with wrap-around along x."""
    dx = abs(a.x - b.x)
    dx = min(dx, highway_length - dx)
    return float(np.hypot(dx, a.y - b.y))


def wrap_dx(xa: np.ndarray, xb: np.ndarray, highway_length: float) -> np.ndarray:
    """Vectorised wrap-around |dx| between two broadcastable x arrays."""
    dx = np.abs(np.asarray(xa) - np.asarray(xb))
    return np.minimum(dx, highway_length - dx)


def pairwise_distances(
    xa: np.ndarray, ya: np.ndarray, xb: np.ndarray, yb: np.ndarray, highway_length: float
) -> np.ndarray:
    """Distance matrix (len(a) x len(b)) with wrap-around in x."""
    dx = wrap_dx(np.asarray(xa)[:, None], np.asarray(xb)[None, :], highway_length)
    dy = np.asarray(ya)[:, None] - np.asarray(yb)[None, :]
    return np.hypot(dx, dy)


def write_scenario_csv(scenario: Scenario, path) -> None:
    """Serialise the drop, one vehicle per row (RSUs are regenerable from config)."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {SCENARIO_CSV_VERSION} highway_length={scenario.highway_length!r} "
                 f"band={scenario.density_band[0]!r},{scenario.density_band[1]!r}\n")
        writer = csv.writer(fh)
        writer.writerow(["id", "x", "y", "lane", "direction", "wants_video"])
        for v in scenario.vehicles:
            writer.writerow([v.vid, repr(v.position.x), repr(v.position.y), v.lane,
                             v.direction, int(v.wants_video)])


def read_scenario_csv(path) -> list[Vehicle]:
    """Load vehicle rows written by write_scenario_csv."""
    vehicles = []
    with open(path, newline="") as fh:
        header = fh.readline()
        if SCENARIO_CSV_VERSION not in header:
            raise ValueError(f"unrecognised scenario CSV header: {header.strip()}")
        for row in csv.DictReader(fh):
            vehicles.append(
                Vehicle(
                    vid=int(row["id"]),
                    position=Position(float(row["x"]), float(row["y"])),
                    lane=int(row["lane"]),
                    direction=int(row["direction"]),
                    speed=SPEED_MPS,
                    wants_video=bool(int(row["wants_video"])),
                )
            )
    return vehicles
