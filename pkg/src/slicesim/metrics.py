"""Reception bookkeeping, packet reception ratio, and throughput CDFs.

Accumulators are mergeable (associative and commutative up to record order)
so per-seed runs of the same cell can be pooled before reporting.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

FLOAT_FORMAT = "%.6g"


@dataclass(frozen=True, slots=True)
class ReceptionRecord:
    """Outcome of one transmitted packet toward its intended receiver set."""

    packet_id: int
    slice_name: str              # "safety" | "video"
    intended: int
    successes: int

    def __post_init__(self):
        if self.intended < 1 or not 0 <= self.successes <= self.intended:
            raise ValueError("invalid reception counts")


@dataclass(slots=True)
class MetricsAccumulator:
    """Per-run tallies: reception records, per-vehicle bits, plan diagnostics."""

    label: str = ""
    sim_time_ms: int = 0
    records: list = field(default_factory=list)
    # (label, vehicle id, slice) -> delivered bits; registration pins zeros
    delivered_bits: dict = field(default_factory=dict)
    ap_counts: list = field(default_factory=list)
    relay_counts: list = field(default_factory=list)

    def register_vehicle(self, vehicle_id: int, slice_name: str) -> None:
        self.delivered_bits.setdefault((self.label, vehicle_id, slice_name), 0)

    def add_bits(self, vehicle_id: int, slice_name: str, bits: int) -> None:
        key = (self.label, vehicle_id, slice_name)
        self.delivered_bits[key] = self.delivered_bits.get(key, 0) + bits

    def add_record(self, record: ReceptionRecord) -> None:
        self.records.append(record)

    def advance_time(self, dt_ms: int) -> None:
        if dt_ms < 0:
            raise ValueError("time must be monotone")
        self.sim_time_ms += dt_ms

    def vehicle_bits(self, slice_name: str) -> dict:
        return {key: bits for key, bits in self.delivered_bits.items() if key[2] == slice_name}

    def merge(self, other: "MetricsAccumulator") -> "MetricsAccumulator":
        """Pool two accumulators; labels must differ or vehicle keys collide."""
        merged = MetricsAccumulator(label=f"{self.label}+{other.label}")
        merged.sim_time_ms = max(self.sim_time_ms, other.sim_time_ms)
        merged.records = self.records + other.records
        merged.delivered_bits = dict(self.delivered_bits)
        for key, bits in other.delivered_bits.items():
            if key in merged.delivered_bits:
                raise ValueError(f"merge collision on {key}; label runs distinctly")
            merged.delivered_bits[key] = bits
        merged.ap_counts = self.ap_counts + other.ap_counts
        merged.relay_counts = self.relay_counts + other.relay_counts
        return merged


def prr(records, slice_name: str | None = None) -> float:
    """Mean over packets of (successful receivers / intended receivers)."""
    chosen = [r for r in records if slice_name is None or r.slice_name == slice_name]
    if not chosen:
        raise ValueError("no reception records to average")
    return float(np.mean([r.successes / r.intended for r in chosen]))


@dataclass(frozen=True, slots=True)
class ThroughputCdf:
    grid_kbps: np.ndarray
    cdf: np.ndarray              # P(rate <= grid point)
    rates_kbps: np.ndarray       # sorted per-vehicle rates behind the CDF


def throughput_cdf(per_vehicle_bits: dict, duration_s: float,
                   grid_kbps) -> ThroughputCdf:
    """Empirical CDF of per-vehicle average rate over a fixed kbps grid."""
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    if not per_vehicle_bits:
        raise ValueError("no vehicles registered for this slice")
    grid = np.asarray(grid_kbps, dtype=float)
    if grid.ndim != 1 or len(grid) < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be increasing")
    rates = np.sort(np.array([bits / duration_s / 1000.0
                              for bits in per_vehicle_bits.values()]))
    cdf = np.searchsorted(rates, grid, side="right") / len(rates)
    return ThroughputCdf(grid_kbps=grid, cdf=cdf, rates_kbps=rates)


def target_rate_probability(cdf: ThroughputCdf, target_kbps: float) -> float:
    """1 - CDF(target-) read off the gridded step function.

    The target must sit on the grid; the CDF's value just below it is the
    value at the previous grid point, so rates within one grid step under the
    target still count as reaching it (reporting resolution, not a knife edge).
    """
    grid = cdf.grid_kbps
    idx = int(np.searchsorted(grid, target_kbps))
    if idx >= len(grid) or not np.isclose(grid[idx], target_kbps):
        raise ValueError(f"target {target_kbps} kbps is not on the CDF grid")
    if idx == 0:
        return 1.0
    return float(1.0 - cdf.cdf[idx - 1])


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return FLOAT_FORMAT % value


def write_prr_table(path, rows) -> None:
    """rows: iterables of (scenario, technology, sigma, prr)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "technology", "sigma", "prr"])
        for scenario_name, technology, sigma, value in rows:
            writer.writerow([scenario_name, technology, sigma, _fmt(value)])


def write_cdf_csv(path, cdf: ThroughputCdf) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kbps", "cdf"])
        for g, c in zip(cdf.grid_kbps, cdf.cdf):
            writer.writerow([_fmt(g), _fmt(c)])


def write_summary_csv(path, rows) -> None:
    """rows: (scenario, technology, sigma, slice, target_kbps, probability)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "technology", "sigma", "slice",
                         "target_kbps", "probability"])
        for scenario_name, technology, sigma, slice_name, target, prob in rows:
            writer.writerow([scenario_name, technology, sigma, slice_name,
                             _fmt(target), _fmt(prob)])
