"""Two-hop serving of poor-coverage video vehicles through nearby good ones.

Vehicles whose downlink SINR falls below a cutoff get their video stream
forwarded by a relay: downlink to the relay on the 2 GHz band, then one
store-and-forward TTI, then a sidelink hop sharing the 5.9 GHz band.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scenario import Position, distance

DEFAULT_LOW_SINR_THRESHOLD_DB = 0.0
DEFAULT_RELAY_MAX_RANGE_M = 150.0
DEFAULT_RELAY_MAX_CLIENTS = 4
DEFAULT_PROXIMITY_WEIGHT = 0.2   # dB of score per metre of range headroom
STORE_AND_FORWARD_TTIS = 1


@dataclass(frozen=True, slots=True)
class RelayPlan:
    assignment: dict[int, int]   # low-SINR vehicle id -> relay vehicle id

    def relays(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.assignment.values())))

    def clients_of(self, relay_id: int) -> list[int]:
        return sorted(v for v, r in self.assignment.items() if r == relay_id)


def identify_low_sinr(video_ids, sinr_v2i_db: dict[int, float],
                      threshold_db: float = DEFAULT_LOW_SINR_THRESHOLD_DB) -> list[int]:
    """Video vehicles strictly below the downlink SINR cutoff, by id."""
    if not np.isfinite(threshold_db):
        raise ValueError("threshold must be finite")
    return sorted(v for v in video_ids if sinr_v2i_db[v] < threshold_db)


def select_relay(low_vehicle: int, candidates, sinr_v2i_db: dict[int, float],
                 positions: dict[int, Position], highway_length: float,
                 quality_threshold_db: float = 3.0,
                 max_range_m: float = DEFAULT_RELAY_MAX_RANGE_M,
                 proximity_weight: float = DEFAULT_PROXIMITY_WEIGHT) -> int | None:
    """Best relay for one vehicle: max of min(SINR margin, weighted range headroom).

    Candidates beyond ``max_range_m`` are out; ties go to the lower id.
    Returns None when nobody qualifies.
    """
    best = None
    best_score = -np.inf
    for cand in sorted(candidates):
        if cand == low_vehicle:
            continue
        d = distance(positions[low_vehicle], positions[cand], highway_length)
        if d > max_range_m:
            continue
        score = min(sinr_v2i_db[cand] - quality_threshold_db,
                    proximity_weight * (max_range_m - d))
        if score > best_score:
            best, best_score = cand, score
    return best


def build_relay_plan(low_ids, candidates, sinr_v2i_db, positions, highway_length,
                     quality_threshold_db: float = 3.0,
                     max_range_m: float = DEFAULT_RELAY_MAX_RANGE_M,
                     max_clients: int = DEFAULT_RELAY_MAX_CLIENTS,
                     proximity_weight: float = DEFAULT_PROXIMITY_WEIGHT) -> RelayPlan:
    """Assign relays to low-SINR vehicles in id order, honouring client caps."""
    loads: dict[int, int] = {}
    assignment: dict[int, int] = {}
    pool = set(candidates)
    for low in sorted(low_ids):
        open_pool = [c for c in pool if loads.get(c, 0) < max_clients]
        pick = select_relay(low, open_pool, sinr_v2i_db, positions, highway_length,
                            quality_threshold_db, max_range_m, proximity_weight)
        if pick is None:
            continue  # stays on the direct downlink
        assignment[low] = pick
        loads[pick] = loads.get(pick, 0) + 1
    return RelayPlan(assignment=assignment)


def relay_delivery(rng, hop1_bler: float, hop2_bler: float,
                   max_attempts: int = 1) -> tuple[bool, int]:
    """Bernoulli two-hop delivery model: per-attempt independent decodes.

    Returns (delivered, latency in TTIs) with latency counting each hop's
    attempts plus one store-and-forward TTI.  With ``max_attempts=1`` the
    success probability is exactly (1-hop1_bler)*(1-hop2_bler).
    """
    latency = 0
    for hop, prob in enumerate((hop1_bler, hop2_bler)):
        ok = False
        for _ in range(max_attempts):
            latency += 1
            if rng.random() >= prob:
                ok = True
                break
        if not ok:
            return False, latency
        if hop == 0:
            latency += STORE_AND_FORWARD_TTIS
    return True, latency
