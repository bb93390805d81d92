#!/usr/bin/env python3
"""Regenerate the versioned link-adaptation tables under src/slicesim/data/.

Two artifacts are produced:

* ``mcs_table_v1.csv``   - 15 MCS entries (QPSK/16QAM/64QAM) with spectral
  efficiencies and the SINR at which each hits 10% BLER.
* ``mi_curves_v1.csv``   - per-modulation bit-interleaved mutual information
  versus SNR, tabulated every 0.1 dB, computed by Gauss-Hermite quadrature
  over Gray-labelled square constellations.

The computation is deterministic, so the CSV bytes (and the pinned hashes in
``CHECKSUMS``) only change when this script changes.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

DATA_DIR = Path(__file__).resolve().parents[1] / "src" / "slicesim" / "data"

SNR_MIN_DB = -20.0
SNR_MAX_DB = 30.0
SNR_STEP_DB = 0.1
QUAD_ORDER = 24

# index, modulation order, code rate (x/1024), spectral efficiency (bit/sym)
MCS_ROWS = [
    (0, 2, 78, 0.1523),
    (1, 2, 120, 0.2344),
    (2, 2, 193, 0.3770),
    (3, 2, 308, 0.6016),
    (4, 2, 449, 0.8770),
    (5, 2, 602, 1.1758),
    (6, 4, 378, 1.4766),
    (7, 4, 490, 1.9141),
    (8, 4, 616, 2.4063),
    (9, 6, 466, 2.7305),
    (10, 6, 567, 3.3223),
    (11, 6, 666, 3.9023),
    (12, 6, 772, 4.5234),
    (13, 6, 873, 5.1152),
    (14, 6, 948, 5.5547),
]
REF_SINR_START_DB = -6.5
REF_SINR_STEP_DB = 1.9


def gray_levels(bits_per_axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Amplitude levels and their Gray bit labels for one I/Q axis."""
    n = 1 << bits_per_axis
    levels = np.arange(-(n - 1), n, 2, dtype=float)
    codes = np.array([k ^ (k >> 1) for k in range(n)])
    labels = ((codes[:, None] >> np.arange(bits_per_axis - 1, -1, -1)) & 1).astype(np.int8)
    return levels, labels


def constellation(modulation_order: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit-energy Gray-mapped square QAM points and per-point bit labels."""
    half = modulation_order // 2
    levels, labels = gray_levels(half)
    i_idx, q_idx = np.meshgrid(np.arange(len(levels)), np.arange(len(levels)), indexing="ij")
    points = levels[i_idx.ravel()] + 1j * levels[q_idx.ravel()]
    bits = np.concatenate([labels[i_idx.ravel()], labels[q_idx.ravel()]], axis=1)
    points = points / np.sqrt(np.mean(np.abs(points) ** 2))
    return points, bits


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))).squeeze(axis)


def bicm_mi(points: np.ndarray, bits: np.ndarray, snr_linear: float) -> float:
    """Bit-interleaved mutual information at one SNR (Es/N0, unit Es)."""
    n0 = 1.0 / snr_linear
    nodes, weights = np.polynomial.hermite.hermgauss(QUAD_ORDER)
    noise = np.sqrt(n0) * (nodes[:, None] + 1j * nodes[None, :]).ravel()
    w2 = (weights[:, None] * weights[None, :]).ravel() / np.pi

    y = points[:, None] + noise[None, :]                      # (M, Q)
    metric = -np.abs(y[:, :, None] - points[None, None, :]) ** 2 / n0  # (M, Q, M)
    log_num = _logsumexp(metric, axis=2)

    m = bits.shape[1]
    total = float(m)
    for i in range(m):
        log_den = np.empty_like(log_num)
        for b in (0, 1):
            cols = bits[:, i] == b
            rows = np.nonzero(cols)[0]
            log_den[cols] = _logsumexp(metric[np.ix_(cols, np.arange(y.shape[1]), rows)][..., :], axis=2)
        # E over uniform x and quadrature of log2(num/den); num >= den always
        total -= float(np.mean(np.sum((log_num - log_den) * w2[None, :], axis=1)) / np.log(2.0))
    return total


def build_mi_table() -> list[tuple[int, float, float]]:
    snrs_db = np.round(np.arange(SNR_MIN_DB, SNR_MAX_DB + SNR_STEP_DB / 2, SNR_STEP_DB), 1)
    rows = []
    for order in (2, 4, 6):
        points, bits = constellation(order)
        for snr_db in snrs_db:
            mi = bicm_mi(points, bits, 10.0 ** (snr_db / 10.0))
            mi = min(max(mi, 0.0), float(order))
            rows.append((order, float(snr_db), mi))
        print(f"modulation order {order}: done ({len(snrs_db)} points)")
    return rows


def write_files() -> None:
    DATA_DIR.mkdir(parents=True, exist_ok=True)

    mcs_path = DATA_DIR / "mcs_table_v1.csv"
    with open(mcs_path, "w", newline="") as fh:
        fh.write("index,modulation_order,code_rate,spectral_efficiency,ref_sinr_db\n")
        for idx, order, rate_1024, eff in MCS_ROWS:
            ref = REF_SINR_START_DB + REF_SINR_STEP_DB * idx
            fh.write(f"{idx},{order},{rate_1024 / 1024.0:.6f},{eff:.4f},{ref:.1f}\n")

    mi_path = DATA_DIR / "mi_curves_v1.csv"
    rows = build_mi_table()
    with open(mi_path, "w", newline="") as fh:
        fh.write("modulation_order,snr_db,mi_bits\n")
        for order, snr_db, mi in rows:
            fh.write(f"{order},{snr_db:.1f},{mi:.8f}\n")

    with open(DATA_DIR / "CHECKSUMS", "w") as fh:
        for path in (mcs_path, mi_path):
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            fh.write(f"{digest}  {path.name}\n")
            print(f"{digest}  {path.name}")


if __name__ == "__main__":
    write_files()
