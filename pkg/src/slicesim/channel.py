"""Per-PRB link budgets, Rayleigh block fading, and post-combining SINR.

Two carriers are modelled: the RSU downlink at 2 GHz (macro line-of-sight
path loss) and the sidelink at 5.9 GHz (free-space-like path loss).  The
bands are orthogonal, so interference only ever sums within a band.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

V2I_REF_DB = 100.7   # at 1 km
V2I_SLOPE_DB = 23.5  # per decade
V2V_REF_DB = 63.3    # at 1 m
V2V_EXPONENT = 2.0
MIN_PATHLOSS_DISTANCE_M = 1.0


class Band(Enum):
    V2I = "v2i"  # 2 GHz RSU downlink
    V2V = "v2v"  # 5.9 GHz sidelink


def pathloss_v2i(distance_m, ref_db: float = V2I_REF_DB, slope_db: float = V2I_SLOPE_DB):
    """Macro downlink path loss in dB; distances below 1 m are clamped."""
    d = np.maximum(np.asarray(distance_m, dtype=float), MIN_PATHLOSS_DISTANCE_M)
    return ref_db + slope_db * np.log10(d / 1000.0)


def pathloss_v2v(distance_m, ref_db: float = V2V_REF_DB, exponent: float = V2V_EXPONENT):
    """Sidelink path loss in dB; distances below 1 m are clamped."""
    d = np.maximum(np.asarray(distance_m, dtype=float), MIN_PATHLOSS_DISTANCE_M)
    return ref_db + 10.0 * exponent * np.log10(d)


def dbm_to_mw(dbm):
    return np.power(10.0, np.asarray(dbm, dtype=float) / 10.0)


def mw_to_dbm(mw):
    return 10.0 * np.log10(np.asarray(mw, dtype=float))


def noise_power_mw(
    bandwidth_hz: float,
    noise_figure_db: float = 9.0,
    thermal_dbm_hz: float = -174.0,
) -> float:
    """Receiver noise power over one allocation unit, in mW."""
    return float(dbm_to_mw(thermal_dbm_hz + noise_figure_db + 10.0 * np.log10(bandwidth_hz)))


@dataclass(frozen=True, slots=True)
class LinkBudget:
    """Mean received power for one link; fading multiplies on top of this."""

    tx_power_dbm: float
    pathloss_db: float
    band: Band
    shadowing_db: float = 0.0  # log-normal term, zero unless enabled

    def rx_power_dbm(self) -> float:
        return self.tx_power_dbm - self.pathloss_db - self.shadowing_db

    def rx_power_mw(self) -> float:
        return float(dbm_to_mw(self.rx_power_dbm()))


@dataclass(frozen=True, slots=True)
class FadingRealization:
    """Complex channel gains per receive antenna and PRB, unit mean power."""

    gains: np.ndarray  # shape (n_rx, n_prb), complex
    coherence_ttis: int = 1

    def power(self) -> np.ndarray:
        return np.abs(self.gains) ** 2


@dataclass(frozen=True, slots=True)
class SinrReport:
    per_prb_sinr: np.ndarray  # linear
    band: Band


def draw_fading(rng, n_rx: int, n_prb: int, coherence_ttis: int = 1) -> FadingRealization:
    """I.i.d. CN(0,1) gains: E[|h|^2] = 1 per antenna-PRB entry."""
    parts = rng.standard_normal((n_rx, n_prb, 2))
    gains = (parts[..., 0] + 1j * parts[..., 1]) / np.sqrt(2.0)
    return FadingRealization(gains=gains, coherence_ttis=coherence_ttis)


def sinr_mrc(desired, interferers, noise_power: float):
    """Post-combining SINR: antenna-summed desired power over summed co-channel
    interference plus per-branch noise.

    ``desired`` and each interferer are per-antenna received powers, shape
    (n_rx,) or (n_rx, n_prb).  Returns a scalar or per-PRB array.
    """
    if noise_power <= 0:
        raise ValueError("noise power must be positive")
    desired = np.asarray(desired, dtype=float)
    total_interference = 0.0
    for power in interferers:
        total_interference = total_interference + np.asarray(power, dtype=float).sum(axis=0)
    return desired.sum(axis=0) / (total_interference + noise_power)
