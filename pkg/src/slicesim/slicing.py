"""Similarity graph, Laplacian spectrum, and access-point plan construction.

Vehicles form a Gaussian-kernel similarity graph over their wrap-around
positions.  The access-point count comes from the largest consecutive gap in
the Laplacian spectrum; k-means over the leading eigenvectors then places
the clusters, and each cluster snaps to the nearest eligible video vehicle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenario import Scenario, pairwise_distances

DEFAULT_AP_SINR_THRESHOLD_DB = 3.0
DEFAULT_EIGENGAP_CAP = 256
DEFAULT_KMEANS_RESTARTS = 10
_KMEANS_SEED = 0x5EED
_KMEANS_MAX_ITER = 100


@dataclass(frozen=True, slots=True)
class SimilarityMatrix:
    entries: np.ndarray          # (n, n) symmetric, unit diagonal
    sigma: float
    node_ids: tuple[int, ...]


@dataclass(frozen=True, slots=True)
class SpectralDecomposition:
    eigenvalues: np.ndarray      # ascending
    eigenvectors: np.ndarray     # columns match eigenvalues
    degrees: np.ndarray


@dataclass(frozen=True, slots=True)
class AccessPointPlan:
    access_points: tuple[int, ...]
    assignment: dict[int, int]   # vehicle id -> access point id (APs excluded)
    cluster_count: int
    valid_until_ms: int
    eigenvalues: np.ndarray      # kept for diagnostics


def similarity(positions, sigma: float, node_ids=None,
               highway_length: float | None = None) -> SimilarityMatrix:
    """Gaussian kernel exp(-d^2 / (2 sigma^2)) over 2-D positions.

    ``highway_length`` enables wrap-around x distance; without it the metric
    is plain Euclidean.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    pos = np.asarray(positions, dtype=float)
    if pos.ndim != 2 or pos.shape[1] != 2:
        raise ValueError("positions must be an (n, 2) array")
    if highway_length is None:
        dx = pos[:, 0][:, None] - pos[:, 0][None, :]
        dy = pos[:, 1][:, None] - pos[:, 1][None, :]
        dist = np.hypot(dx, dy)
    else:
        dist = pairwise_distances(pos[:, 0], pos[:, 1], pos[:, 0], pos[:, 1], highway_length)
    entries = np.exp(-(dist ** 2) / (2.0 * sigma * sigma))
    np.fill_diagonal(entries, 1.0)
    ids = tuple(node_ids) if node_ids is not None else tuple(range(len(pos)))
    if len(ids) != len(pos):
        raise ValueError("node_ids must match positions")
    return SimilarityMatrix(entries=entries, sigma=float(sigma), node_ids=ids)


def laplacian(sim) -> SpectralDecomposition:
    """Unnormalised graph Laplacian L = D - C with a full eigendecomposition."""
    entries = sim.entries if isinstance(sim, SimilarityMatrix) else np.asarray(sim, dtype=float)
    if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
        raise ValueError("similarity matrix must be square")
    if not np.allclose(entries, entries.T):
        raise ValueError("similarity matrix must be symmetric")
    degrees = entries.sum(axis=1)
    lap = np.diag(degrees) - entries
    eigenvalues, eigenvectors = np.linalg.eigh(lap)
    return SpectralDecomposition(eigenvalues=eigenvalues, eigenvectors=eigenvectors,
                                 degrees=degrees)


def eigengap_count(decomposition: SpectralDecomposition, e_max: int | None = None) -> int:
    """Cluster count = argmax over e of (zeta_{e+1} - zeta_e), ties to the smaller e."""
    zeta = decomposition.eigenvalues
    n = len(zeta)
    if n < 2:
        raise ValueError("need at least two eigenvalues")
    if e_max is None:
        e_max = n - 1
    if not 1 <= e_max <= n - 1:
        raise ValueError(f"e_max {e_max} out of range for {n} eigenvalues")
    gaps = np.diff(zeta)[:e_max]
    return int(np.argmax(gaps)) + 1  # argmax returns the first maximum


def eligible_aps(scenario: Scenario, sinr_v2i_db: dict[int, float],
                 threshold_db: float = DEFAULT_AP_SINR_THRESHOLD_DB) -> list[int]:
    """Video vehicles whose wideband downlink SINR clears the threshold, by id."""
    out = [
        v.vid
        for v in scenario.vehicles
        if v.wants_video and sinr_v2i_db.get(v.vid, -np.inf) >= threshold_db
    ]
    return sorted(out)


def _kmeans(points: np.ndarray, k: int, rng, restarts: int) -> np.ndarray:
    """Plain Lloyd iterations with greedy ++-style seeding; returns centers."""
    n = len(points)
    best_centers = None
    best_inertia = np.inf
    for _ in range(restarts):
        centers = np.empty((k, points.shape[1]))
        centers[0] = points[rng.integers(n)]
        d2 = np.sum((points - centers[0]) ** 2, axis=1)
        for j in range(1, k):
            total = d2.sum()
            if total <= 0:
                centers[j] = points[rng.integers(n)]
            else:
                centers[j] = points[rng.choice(n, p=d2 / total)]
            d2 = np.minimum(d2, np.sum((points - centers[j]) ** 2, axis=1))
        for _ in range(_KMEANS_MAX_ITER):
            dist2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
            labels = np.argmin(dist2, axis=1)
            new_centers = centers.copy()
            for j in range(k):
                members = points[labels == j]
                if len(members):
                    new_centers[j] = members.mean(axis=0)
                else:  # re-seed an empty cluster on the current farthest point
                    new_centers[j] = points[np.argmax(np.min(dist2, axis=1))]
            if np.allclose(new_centers, centers):
                centers = new_centers
                break
            centers = new_centers
        inertia = float(np.sum(np.min(
            np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2), axis=1)))
        if inertia < best_inertia:
            best_inertia = inertia
            best_centers = centers
    return best_centers


def build_plan(scenario: Scenario, eligible: list[int], sigma: float, now_ms: int,
               e_max_cap: int = DEFAULT_EIGENGAP_CAP,
               kmeans_restarts: int = DEFAULT_KMEANS_RESTARTS,
               plan_lifetime_ms: int = 100) -> AccessPointPlan:
    """Spectral clustering over all vehicles, snapped to eligible access points.

    Pure function of the scenario snapshot and eligibility list: the k-means
    RNG is seeded from a fixed constant so identical inputs give identical
    plans.
    """
    if not eligible:
        raise ValueError("eligible AP list is empty")
    vehicles = scenario.vehicles
    n = len(vehicles)
    if n < 2:
        raise ValueError("need at least two vehicles to slice")
    ids = [v.vid for v in vehicles]
    index_of = {vid: i for i, vid in enumerate(ids)}
    unknown = [vid for vid in eligible if vid not in index_of]
    if unknown:
        raise ValueError(f"eligible ids not in scenario: {unknown}")

    pos = np.array([(v.position.x, v.position.y) for v in vehicles])
    sim = similarity(pos, sigma, node_ids=ids, highway_length=scenario.highway_length)
    decomposition = laplacian(sim)
    f = eigengap_count(decomposition, e_max=min(n - 1, e_max_cap))

    eligible_idx = np.array([index_of[vid] for vid in eligible])
    if f >= len(eligible):
        ap_ids = list(eligible)
    else:
        embedding = decomposition.eigenvectors[:, :f]
        rng = np.random.default_rng(_KMEANS_SEED)
        centers = _kmeans(embedding, f, rng, kmeans_restarts)
        ap_ids = []
        taken = np.zeros(len(eligible_idx), dtype=bool)
        for center in centers:
            d2 = np.sum((embedding[eligible_idx] - center) ** 2, axis=1)
            d2[taken] = np.inf
            pick = int(np.argmin(d2))
            taken[pick] = True
            ap_ids.append(ids[eligible_idx[pick]])
        ap_ids.sort()

    # every non-AP vehicle attaches to its most similar (nearest) access point
    ap_set = set(ap_ids)
    ap_idx = np.array([index_of[a] for a in ap_ids])
    dist = pairwise_distances(pos[:, 0], pos[:, 1],
                              pos[ap_idx, 0], pos[ap_idx, 1], scenario.highway_length)
    assignment = {}
    for i, vid in enumerate(ids):
        if vid in ap_set:
            continue
        assignment[vid] = ap_ids[int(np.argmin(dist[i]))]

    return AccessPointPlan(
        access_points=tuple(ap_ids),
        assignment=assignment,
        cluster_count=f,
        valid_until_ms=int(now_ms) + plan_lifetime_ms,
        eigenvalues=decomposition.eigenvalues,
    )
