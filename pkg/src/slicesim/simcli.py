"""Run configuration, seeded RNG streams, and the command-line front end.

Configs are flat ``key = value`` text files.  A single ``run`` simulates one
(scenario, technology, sigma, seed) cell and writes its metrics CSVs; the
``matrix`` subcommand sweeps density bands, technologies, and sigmas, pooling
a fixed number of seeds per cell.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine, link_abstraction, metrics
from .errors import ConfigError, InvariantError

TECHNOLOGIES = ("rsu", "rsu_relay", "ns", "ns_relay")
SLICED_TECHNOLOGIES = ("ns", "ns_relay")


@dataclass(frozen=True)
class SimConfig:
    # scenario
    highway_length_m: float = 2000.0
    density_min_m: float = 1.0
    density_max_m: float = 100.0
    video_fraction: float = 0.5
    # run
    technology: str = "ns"
    duration_ms: int = 10_000
    seed: int = 1
    tti_ms: int = 1
    reslice_period_ms: int = 100
    # radio
    prb_count: int = 50
    prb_bandwidth_hz: float = 180_000.0
    tx_power_v2i_dbm: float = 46.0
    tx_power_v2v_dbm: float = 20.0
    noise_figure_db: float = 9.0
    thermal_noise_dbm_hz: float = -174.0
    rx_antennas: int = 2
    shadowing_sigma_v2i_db: float = 8.0
    shadowing_sigma_v2v_db: float = 3.0
    # slicing
    sigma_m: float = 5.0
    ap_sinr_threshold_db: float = 3.0
    eigengap_cap: int = 256
    kmeans_restarts: int = 10
    # relaying
    relay_low_sinr_db: float = 0.0
    relay_max_range_m: float = 300.0
    relay_max_clients: int = 4
    relay_proximity_weight: float = 0.2
    # traffic
    safety_bits: int = 12_800
    safety_period_ms: int = 100
    video_bits: int = 1000
    video_period_ms: int = 1
    # link adaptation
    harq_max_attempts: int = 4
    harq_rtt_ttis: int = 8
    cqi_delay_ttis: int = 1
    mcs_table_path: str = ""
    mi_curves_path: str = ""
    # reporting
    safety_target_kbps: float = 128.0
    video_target_kbps: float = 1000.0
    cdf_max_kbps: float = 2000.0
    cdf_step_kbps: float = 8.0
    # 0 counts every addressed receiver in the PRR; > 0 restricts the
    # per-packet receiver set to vehicles within this range of the sender
    locality_radius_m: float = 0.0

    def noise_power_mw(self) -> float:
        from .channel import noise_power_mw
        return noise_power_mw(self.prb_bandwidth_hz, self.noise_figure_db,
                              self.thermal_noise_dbm_hz)

    def scenario_name(self) -> str:
        return f"{self.density_min_m:g}-{self.density_max_m:g}"

    def cdf_grid(self) -> np.ndarray:
        return np.arange(0.0, self.cdf_max_kbps + self.cdf_step_kbps / 2, self.cdf_step_kbps)


def _mix_key(*tokens) -> int:
    """128-bit Philox key from arbitrary tokens, stable across processes."""
    text = "/".join(str(t) for t in tokens)
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=16).digest(), "little")


class RngStream:
    """Named counter-based substreams, all derived from one master seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._cache: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        if name not in self._cache:
            self._cache[name] = np.random.Generator(
                np.random.Philox(key=_mix_key(self.seed, name)))
        return self._cache[name]

    def derive(self, name: str, *indices) -> np.random.Generator:
        """Fresh generator for one event, e.g. one link in one TTI."""
        return np.random.Generator(np.random.Philox(key=_mix_key(self.seed, name, *indices)))


def _coerce(field_name: str, field_type, raw: str):
    raw = raw.strip()
    try:
        if field_type is int:
            return int(raw)
        if field_type is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {field_name!r}: {raw!r}") from exc


def validate_config(config: SimConfig) -> SimConfig:
    c = config
    checks = [
        (c.technology in TECHNOLOGIES, f"technology must be one of {TECHNOLOGIES}"),
        (c.tti_ms == 1, "tti_ms must be 1"),
        (c.duration_ms > 0, "duration_ms must be positive"),
        (c.reslice_period_ms > 0, "reslice_period_ms must be positive"),
        (c.duration_ms % c.reslice_period_ms == 0,
         "duration_ms must be a multiple of reslice_period_ms"),
        (0.0 < c.density_min_m < c.density_max_m, "density band must satisfy 0 < min < max"),
        (c.highway_length_m >= 2 * c.density_max_m, "highway too short for the density band"),
        (0.0 < c.video_fraction <= 1.0, "video_fraction must lie in (0, 1]"),
        (c.sigma_m > 0, "sigma_m must be positive"),
        (c.prb_count > 0, "prb_count must be positive"),
        (c.rx_antennas >= 1, "rx_antennas must be at least 1"),
        (c.safety_period_ms == c.reslice_period_ms,
         "safety_period_ms must equal reslice_period_ms"),
        (c.harq_max_attempts >= 1, "harq_max_attempts must be at least 1"),
        (c.cdf_step_kbps > 0 and c.cdf_max_kbps > c.cdf_step_kbps, "bad CDF grid"),
        (c.safety_target_kbps % c.cdf_step_kbps == 0,
         "safety_target_kbps must sit on the CDF grid"),
        (c.video_target_kbps % c.cdf_step_kbps == 0,
         "video_target_kbps must sit on the CDF grid"),
        (c.locality_radius_m >= 0, "locality_radius_m must be non-negative"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)
    # data files must resolve (and packaged defaults must match their pins)
    try:
        link_abstraction.McsTable.load(c.mcs_table_path or None)
        link_abstraction.MiCurves.load(c.mi_curves_path or None)
    except (FileNotFoundError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return config


def parse_config(path, overrides: dict | None = None) -> SimConfig:
    """Read a flat key = value config file; unknown keys are rejected."""
    fields = {f.name: f.type for f in dataclasses.fields(SimConfig)}
    type_of = {name: (int if t in ("int", int) else float if t in ("float", float) else str)
               for name, t in fields.items()}
    values: dict = {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in fields:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, type_of[key], raw)
    if overrides:
        values.update(overrides)
    return validate_config(SimConfig(**values))


def _write_run_outputs(config: SimConfig, result, out_dir: Path) -> list[Path]:
    duration_s = config.duration_ms / 1000.0
    grid = config.cdf_grid()
    acc = result.accumulator
    written = []

    safety_cdf = metrics.throughput_cdf(acc.vehicle_bits("safety"), duration_s, grid)
    video_bits = acc.vehicle_bits("video")
    scenario_name = config.scenario_name()
    sigma = f"{config.sigma_m:g}" if config.technology in SLICED_TECHNOLOGIES else "-"

    path = out_dir / "throughput_cdf_safety.csv"
    metrics.write_cdf_csv(path, safety_cdf)
    written.append(path)

    summary_rows = [(scenario_name, config.technology, sigma, "safety",
                     config.safety_target_kbps,
                     metrics.target_rate_probability(safety_cdf, config.safety_target_kbps))]
    if video_bits:
        video_cdf = metrics.throughput_cdf(video_bits, duration_s, grid)
        path = out_dir / "throughput_cdf_video.csv"
        metrics.write_cdf_csv(path, video_cdf)
        written.append(path)
        summary_rows.append((scenario_name, config.technology, sigma, "video",
                             config.video_target_kbps,
                             metrics.target_rate_probability(video_cdf, config.video_target_kbps)))

    path = out_dir / "prr_table.csv"
    metrics.write_prr_table(path, [(scenario_name, config.technology, sigma,
                                    metrics.prr(acc.records, "safety"))])
    written.append(path)

    path = out_dir / "summary.csv"
    metrics.write_summary_csv(path, summary_rows)
    written.append(path)
    return written


def _write_run_meta(config: SimConfig, result, out_dir: Path, wall_s: float) -> None:
    mcs = link_abstraction.McsTable.load(config.mcs_table_path or None)
    mi = link_abstraction.MiCurves.load(config.mi_curves_path or None)
    lines = [f"{f.name} = {getattr(config, f.name)}" for f in dataclasses.fields(SimConfig)]
    lines += [
        f"mcs_table_sha256 = {mcs.sha256}",
        f"mi_curves_sha256 = {mi.sha256}",
        f"vehicles = {result.n_vehicles}",
        f"video_vehicles = {result.n_video}",
        f"wall_time_s = {wall_s:.3f}",
    ]
    (out_dir / "run_meta.txt").write_text("\n".join(lines) + "\n")


def run(config: SimConfig, out_dir, trace: bool = False) -> "engine.RunResult":
    """Simulate one cell and write its CSV outputs under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    written: list[Path] = []
    try:
        result = engine.simulate(config, trace_dir=out_dir if trace else None)
        written = _write_run_outputs(config, result, out_dir)
    except InvariantError:
        for path in written:
            path.unlink(missing_ok=True)
        for name in ("throughput_cdf_safety.csv", "throughput_cdf_video.csv",
                     "prr_table.csv", "summary.csv", "run_meta.txt"):
            (out_dir / name).unlink(missing_ok=True)
        raise
    _write_run_meta(config, result, out_dir, time.perf_counter() - t0)
    return result


def parse_band(text: str) -> tuple[float, float]:
    try:
        lo, _, hi = text.partition("-")
        band = (float(lo), float(hi))
    except ValueError as exc:
        raise ConfigError(f"bad scenario band {text!r}; expected e.g. 100-200") from exc
    if not 0 < band[0] < band[1]:
        raise ConfigError(f"bad scenario band {text!r}")
    return band


def run_matrix(base: SimConfig, scenarios, technologies, sigmas, seeds: int,
               out_dir, trace: bool = False) -> dict:
    """Sweep scenario x technology (x sigma for sliced modes), pooling seeds.

    Returns {(scenario, technology, sigma_label): merged accumulator} and
    writes the pooled PRR table and target-rate summary.
    """
    if seeds < 1:
        raise ConfigError("need at least one seed")
    if not scenarios or not technologies:
        raise ConfigError("matrix needs at least one scenario and one technology")
    for tech in technologies:
        if tech not in TECHNOLOGIES:
            raise ConfigError(f"unknown technology {tech!r}")
    if not sigmas and any(t in SLICED_TECHNOLOGIES for t in technologies):
        raise ConfigError("sliced technologies need at least one sigma")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    cells: dict[tuple, metrics.MetricsAccumulator] = {}
    wall: dict[tuple, float] = {}
    for band in scenarios:
        d_min, d_max = parse_band(band) if isinstance(band, str) else band
        for tech in technologies:
            sigma_list = sigmas if tech in SLICED_TECHNOLOGIES else [None]
            for sigma in sigma_list:
                overrides = {"density_min_m": d_min, "density_max_m": d_max,
                             "technology": tech}
                if sigma is not None:
                    overrides["sigma_m"] = float(sigma)
                cell_cfg = validate_config(dataclasses.replace(base, **overrides))
                label = f"{sigma:g}" if sigma is not None else "-"
                key = (cell_cfg.scenario_name(), tech, label)
                t0 = time.perf_counter()
                merged = None
                for seed in range(1, seeds + 1):
                    cfg = dataclasses.replace(cell_cfg, seed=seed)
                    result = engine.simulate(cfg)
                    merged = result.accumulator if merged is None else merged.merge(result.accumulator)
                cells[key] = merged
                wall[key] = time.perf_counter() - t0

    duration_s = base.duration_ms / 1000.0
    grid = base.cdf_grid()
    prr_rows, summary_rows = [], []
    for (scen, tech, sigma), acc in sorted(cells.items()):
        prr_rows.append((scen, tech, sigma, metrics.prr(acc.records, "safety")))
        safety_cdf = metrics.throughput_cdf(acc.vehicle_bits("safety"), duration_s, grid)
        summary_rows.append((scen, tech, sigma, "safety", base.safety_target_kbps,
                             metrics.target_rate_probability(safety_cdf, base.safety_target_kbps)))
        video_bits = acc.vehicle_bits("video")
        if video_bits:
            video_cdf = metrics.throughput_cdf(video_bits, duration_s, grid)
            summary_rows.append((scen, tech, sigma, "video", base.video_target_kbps,
                                 metrics.target_rate_probability(video_cdf, base.video_target_kbps)))
    metrics.write_prr_table(out_dir / "prr_table.csv", prr_rows)
    metrics.write_summary_csv(out_dir / "summary.csv", summary_rows)
    with open(out_dir / "run_meta.txt", "w") as fh:
        for key in sorted(wall):
            fh.write(f"cell {key[0]}/{key[1]}/{key[2]} wall_time_s = {wall[key]:.3f}\n")
    return cells


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slicesim",
                                     description="V2X network-slicing simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate one configured cell")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default="out")
    p_run.add_argument("--trace", action="store_true",
                       help="also write plan/relay/SINR/delivery debug CSVs")

    p_matrix = sub.add_parser("matrix", help="sweep scenarios x technologies x sigmas")
    p_matrix.add_argument("--config", required=True)
    p_matrix.add_argument("--scenarios", required=True,
                          help="comma-separated density bands, e.g. 1-100,100-200")
    p_matrix.add_argument("--tech", required=True,
                          help=f"comma-separated subset of {','.join(TECHNOLOGIES)}")
    p_matrix.add_argument("--sigmas", default="5",
                          help="comma-separated sigma values for sliced modes")
    p_matrix.add_argument("--seeds", type=int, default=5)
    p_matrix.add_argument("--out", default="out")
    p_matrix.add_argument("--trace", action="store_true")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            overrides = {"seed": args.seed} if args.seed is not None else None
            config = parse_config(args.config, overrides)
            run(config, args.out, trace=args.trace)
        else:
            base = parse_config(args.config)
            run_matrix(
                base,
                scenarios=[s.strip() for s in args.scenarios.split(",") if s.strip()],
                technologies=[t.strip() for t in args.tech.split(",") if t.strip()],
                sigmas=[float(s) for s in args.sigmas.split(",") if s.strip()],
                seeds=args.seeds,
                out_dir=args.out,
                trace=args.trace,
            )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
