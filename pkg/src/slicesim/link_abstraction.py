"""Link-to-system abstraction: MCS selection, effective SINR, BLER, HARQ.

Per-PRB SINRs collapse to a single effective SINR through the mutual
information of the active modulation (mean MI, then inverse mapping).  A
logistic curve anchored at each MCS's 10%-BLER reference point turns that
into a block error probability; chase combining accumulates linear SINR
across retransmissions.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

LOGISTIC_SLOPE_PER_DB = 2.0
# shift between the logistic midpoint and the 10%-BLER anchor
_TEN_PCT_OFFSET_DB = math.log(9.0) / LOGISTIC_SLOPE_PER_DB
MAX_HARQ_ATTEMPTS = 4
HARQ_RTT_TTIS = 8

MCS_TABLE_FILE = "mcs_table_v1.csv"
MI_CURVES_FILE = "mi_curves_v1.csv"


def _data_root() -> Path:
    return Path(str(resources.files("slicesim.data")))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _pinned_checksums() -> dict[str, str]:
    out = {}
    checksums = _data_root() / "CHECKSUMS"
    for line in checksums.read_text().splitlines():
        digest, name = line.split()
        out[name] = digest
    return out


def _resolve(path, default_name: str) -> tuple[Path, str, bool]:
    """Return (path, sha256, is_packaged); packaged files are verified against CHECKSUMS."""
    packaged = path is None
    resolved = _data_root() / default_name if packaged else Path(path)
    if not resolved.is_file():
        raise FileNotFoundError(f"data file not found: {resolved}")
    digest = _sha256(resolved)
    if packaged:
        pinned = _pinned_checksums().get(default_name)
        if digest != pinned:
            raise ValueError(f"{default_name} is corrupt: sha256 {digest} != pinned {pinned}")
    return resolved, digest, packaged


@dataclass(frozen=True, slots=True)
class McsEntry:
    index: int
    modulation_order: int
    code_rate: float
    spectral_efficiency: float
    bler_ref_sinr_db: float


class McsTable:
    """Ordered MCS entries with efficiency and 10%-BLER reference SINR."""

    def __init__(self, entries: list[McsEntry], sha256: str = ""):
        if not entries:
            raise ValueError("empty MCS table")
        for prev, cur in zip(entries, entries[1:]):
            if not (cur.spectral_efficiency > prev.spectral_efficiency
                    and cur.bler_ref_sinr_db > prev.bler_ref_sinr_db):
                raise ValueError("MCS table must be sorted by efficiency and reference SINR")
        self.entries = tuple(entries)
        self.sha256 = sha256
        self._refs = np.array([e.bler_ref_sinr_db for e in entries])

    @classmethod
    def load(cls, path=None) -> "McsTable":
        resolved, digest, _ = _resolve(path, MCS_TABLE_FILE)
        entries = []
        with open(resolved, newline="") as fh:
            for row in csv.DictReader(fh):
                entries.append(
                    McsEntry(
                        index=int(row["index"]),
                        modulation_order=int(row["modulation_order"]),
                        code_rate=float(row["code_rate"]),
                        spectral_efficiency=float(row["spectral_efficiency"]),
                        bler_ref_sinr_db=float(row["ref_sinr_db"]),
                    )
                )
        return cls(entries, sha256=digest)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i) -> McsEntry:
        return self.entries[i]


class MiCurves:
    """Tabulated per-modulation mutual information with a monotone inverse."""

    def __init__(self, curves: dict[int, tuple[np.ndarray, np.ndarray]], sha256: str = ""):
        self.sha256 = sha256
        self._fwd = {}
        self._inv = {}
        for order, (snr_db, mi) in curves.items():
            if np.any(np.diff(snr_db) <= 0) or np.any(np.diff(mi) < 0):
                raise ValueError(f"MI curve for order {order} is not monotone")
            self._fwd[order] = (snr_db, mi)
            # keep only the strictly rising part for inversion; everything at or
            # past float saturation maps back to the first saturated SNR point
            rising = np.concatenate(([True], np.diff(mi) > 0))
            last = int(np.nonzero(rising)[0][-1])
            self._inv[order] = (mi[: last + 1], snr_db[: last + 1])

    @classmethod
    def load(cls, path=None) -> "MiCurves":
        resolved, digest, _ = _resolve(path, MI_CURVES_FILE)
        raw: dict[int, list[tuple[float, float]]] = {}
        with open(resolved, newline="") as fh:
            for row in csv.DictReader(fh):
                raw.setdefault(int(row["modulation_order"]), []).append(
                    (float(row["snr_db"]), float(row["mi_bits"]))
                )
        curves = {}
        for order, pairs in raw.items():
            pairs.sort()
            arr = np.array(pairs)
            curves[order] = (arr[:, 0], arr[:, 1])
        return cls(curves, sha256=digest)

    def orders(self):
        return sorted(self._fwd)

    def mi(self, modulation_order: int, snr_db):
        """MI in bits at the given SNR(s) in dB; clamped to the table range."""
        snr_grid, mi_grid = self._fwd[modulation_order]
        return np.interp(snr_db, snr_grid, mi_grid)

    def snr_db_for_mi(self, modulation_order: int, mi_bits: float) -> float:
        mi_grid, snr_grid = self._inv[modulation_order]
        return float(np.interp(mi_bits, mi_grid, snr_grid))


_DEFAULT_TABLES: dict[str, object] = {}


def default_mcs_table() -> McsTable:
    if "mcs" not in _DEFAULT_TABLES:
        _DEFAULT_TABLES["mcs"] = McsTable.load()
    return _DEFAULT_TABLES["mcs"]


def default_mi_curves() -> MiCurves:
    if "mi" not in _DEFAULT_TABLES:
        _DEFAULT_TABLES["mi"] = MiCurves.load()
    return _DEFAULT_TABLES["mi"]


def select_mcs(sinr_db: float, table: McsTable | None = None) -> McsEntry:
    """Highest entry whose 10%-BLER reference lies at or below the reported SINR.

    Falls back to the lowest entry when even that reference is above the
    report (the link still transmits, just with poor odds).
    """
    table = table or default_mcs_table()
    idx = int(np.searchsorted(table._refs, sinr_db, side="right")) - 1
    return table[max(idx, 0)]


def miesm_effective_sinr(per_prb_sinr, modulation_order: int,
                         curves: MiCurves | None = None) -> float:
    """Mean-MI effective SINR (linear in, linear out).

    Zero-SINR PRBs contribute zero MI.  The result is clipped to the
    [min, max] of the inputs, which also pins the all-equal case exactly.
    """
    curves = curves or default_mi_curves()
    gamma = np.asarray(per_prb_sinr, dtype=float)
    if gamma.size == 0:
        raise ValueError("need at least one PRB")
    if np.any(gamma < 0):
        raise ValueError("SINR must be non-negative")
    with np.errstate(divide="ignore"):
        snr_db = 10.0 * np.log10(gamma)
    mi = np.where(gamma > 0.0, curves.mi(modulation_order, snr_db), 0.0)
    eff_db = curves.snr_db_for_mi(modulation_order, float(np.mean(mi)))
    eff = 10.0 ** (eff_db / 10.0)
    return float(np.clip(eff, gamma.min(), gamma.max()))


def bler(effective_sinr_db: float, mcs: McsEntry,
         slope_per_db: float = LOGISTIC_SLOPE_PER_DB) -> float:
    """Logistic block error rate, exactly 0.1 at the entry's reference SINR."""
    midpoint = mcs.bler_ref_sinr_db - math.log(9.0) / slope_per_db
    z = np.clip(slope_per_db * (effective_sinr_db - midpoint), -500.0, 500.0)
    return float(1.0 / (1.0 + math.exp(z)))


@dataclass(frozen=True, slots=True)
class HarqProcess:
    """State of one transport block across chase-combined attempts."""

    tb_id: int
    mcs: McsEntry
    attempt: int                 # 1 after the first transmission
    accumulated_sinr: np.ndarray  # linear, per allocated PRB position


def harq_combine(process: HarqProcess, new_per_prb_sinr) -> HarqProcess:
    """Add a retransmission's per-PRB SINR into the process (chase combining)."""
    if process.attempt >= MAX_HARQ_ATTEMPTS:
        raise ValueError("process already at its final attempt")
    new = np.asarray(new_per_prb_sinr, dtype=float)
    if new.shape != process.accumulated_sinr.shape:
        raise ValueError("retransmission PRB count must match the original")
    return HarqProcess(
        tb_id=process.tb_id,
        mcs=process.mcs,
        attempt=process.attempt + 1,
        accumulated_sinr=process.accumulated_sinr + new,
    )


def decode_attempt(rng, bler_prob: float) -> bool:
    """Bernoulli decode: True for ACK, False for NACK."""
    if not 0.0 <= bler_prob <= 1.0:
        raise ValueError("BLER must be a probability")
    return bool(rng.random() >= bler_prob)
