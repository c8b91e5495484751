"""Evaluation suite: mixture-kernel MMD (biased V-statistic), exact empirical
Wasserstein distances via optimal assignment, Kabsch-aligned RMSD, target hit
percentage, and the energy of the transition state along a path."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .biasnet import kabsch_align
from .kernels import pairwise_sq_dists


class MetricsError(Exception):
    pass


@dataclass
class MetricsConfig:
    mmd_bandwidths: tuple = (0.01, 0.1, 1.0, 10.0, 100.0)
    thp_radius: float = 0.75
    cv_indices: tuple | None = None      # coordinate subset for the hit test
    wasserstein_dims: int = 2            # leading coordinates used for W1/W2
    wasserstein_max: int = 512

    def __post_init__(self):
        if any(b <= 0 for b in self.mmd_bandwidths):
            raise MetricsError("bandwidths must be positive")
        if self.thp_radius <= 0:
            raise MetricsError("thp radius must be positive")


def _mixture_kernel(sq: np.ndarray, bandwidths: Sequence[float]) -> np.ndarray:
    out = np.zeros_like(sq)
    for s in bandwidths:
        out += np.exp(-sq / (2.0 * s * s))
    return out / len(bandwidths)


def rbf_mmd(x: np.ndarray, y: np.ndarray, config: MetricsConfig | None = None) -> float:
    """Biased V-statistic MMD with the bandwidth-mixture RBF kernel; inputs
    are equal-count sample matrices (M, D)."""
    config = config or MetricsConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] == 0 or y.shape[0] == 0:
        raise MetricsError("rbf_mmd: inputs must be nonempty (M, D) matrices")
    if x.shape != y.shape:
        raise MetricsError(
            f"rbf_mmd: expected equal sample counts, got {x.shape} vs {y.shape}; "
            "resample with replacement first"
        )
    bw = config.mmd_bandwidths
    kxx = _mixture_kernel(pairwise_sq_dists(x, x), bw).mean()
    kyy = _mixture_kernel(pairwise_sq_dists(y, y), bw).mean()
    kxy = _mixture_kernel(pairwise_sq_dists(x, y), bw).mean()
    return float(kxx + kyy - 2.0 * kxy)


def wasserstein(x: np.ndarray, y: np.ndarray, p: int,
                dims: int | None = None, max_size: int = 512) -> float:
    """Exact empirical W_p (p in {1, 2}) between equal-count samples via the
    optimal assignment on the pairwise distance matrix."""
    if p not in (1, 2):
        raise MetricsError(f"wasserstein: order must be 1 or 2, got {p}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2 or x.shape[0] == 0:
        raise MetricsError(f"wasserstein: need equal nonempty (M, D) inputs, got {x.shape} vs {y.shape}")
    if x.shape[0] > max_size:
        raise MetricsError(
            f"wasserstein: {x.shape[0]} samples exceed the exact-assignment limit "
            f"{max_size}; subsample first"
        )
    if dims is not None:
        x = x[:, :dims]
        y = y[:, :dims]
    sq = pairwise_sq_dists(x, y)
    cost = sq if p == 2 else np.sqrt(sq)
    rows, cols = linear_sum_assignment(cost)
    mean_cost = float(cost[rows, cols].mean())
    return float(np.sqrt(mean_cost)) if p == 2 else mean_cost


def brute_force_wasserstein(x: np.ndarray, y: np.ndarray, p: int) -> float:
    """Exhaustive-assignment oracle, feasible for M <= 7."""
    m = x.shape[0]
    if m > 7:
        raise MetricsError("brute force limited to M <= 7")
    sq = pairwise_sq_dists(x, y)
    cost = sq if p == 2 else np.sqrt(sq)
    best = np.inf
    for perm in itertools.permutations(range(m)):
        total = sum(cost[i, perm[i]] for i in range(m))
        best = min(best, total)
    mean_cost = best / m
    return float(np.sqrt(mean_cost)) if p == 2 else float(mean_cost)


def rmsd(positions: np.ndarray, reference: np.ndarray,
         mask: np.ndarray | None = None, align: bool = True) -> float:
    """Root-mean-square deviation over the masked particles, after optimal
    rigid alignment when requested (and the cloud supports it)."""
    positions = np.asarray(positions, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if positions.shape != reference.shape:
        raise MetricsError(f"rmsd: shapes {positions.shape} vs {reference.shape}")
    if align:
        _, _, positions = kabsch_align(positions, reference, mask)
    if mask is not None:
        mask = np.asarray(mask)
        idx = np.flatnonzero(mask) if mask.dtype == bool else np.asarray(mask, dtype=int)
        positions = positions[idx]
        reference = reference[idx]
    diff = positions - reference
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=-1))))


def _project(points: np.ndarray, config: MetricsConfig) -> np.ndarray:
    if config.cv_indices is None:
        return points
    return points[..., list(config.cv_indices)]


def thp(endpoints: Sequence[np.ndarray], targets: Sequence[np.ndarray],
        config: MetricsConfig | None = None) -> float:
    """Percentage of trajectories whose projected endpoint lies within the hit
    radius of its projected target."""
    config = config or MetricsConfig()
    if len(endpoints) != len(targets) or not endpoints:
        raise MetricsError("thp: need matching nonempty endpoint/target lists")
    hits = 0
    for end, tgt in zip(endpoints, targets):
        delta = _project(np.asarray(end), config) - _project(np.asarray(tgt), config)
        if np.linalg.norm(delta) < config.thp_radius:
            hits += 1
    return 100.0 * hits / len(endpoints)


def hit_flags(endpoints, targets, config: MetricsConfig | None = None) -> list[bool]:
    config = config or MetricsConfig()
    out = []
    for end, tgt in zip(endpoints, targets):
        delta = _project(np.asarray(end), config) - _project(np.asarray(tgt), config)
        out.append(bool(np.linalg.norm(delta) < config.thp_radius))
    return out


def ets(positions: np.ndarray, potential, hit: bool) -> float | None:
    """Maximum system potential energy along a discrete path; only defined for
    trajectories that hit the target."""
    if not hit:
        return None
    positions = np.asarray(positions, dtype=np.float64)
    k1, n, d = positions.shape
    values, _ = potential.value_grad(positions.reshape(k1 * n, d))
    energies = values.reshape(k1, n).sum(axis=1)
    return float(energies.max())


# ---------------------------------------------------------------------------
# report protocol: mean/std over seeded evaluation repeats
# ---------------------------------------------------------------------------

def resample_rows(arr: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    return arr[rng.integers(arr.shape[0], size=count)]


def evaluate_report(generated: np.ndarray, reference: np.ndarray,
                    metric_names: Sequence[str], config: MetricsConfig | None = None,
                    seed: int = 0, repeats: int = 5) -> dict:
    """Distribution metrics between generated points (G, D) and a reference
    cloud (P, D): per metric, mean and standard deviation over seeded repeats,
    resampling to equal counts with replacement each repeat."""
    config = config or MetricsConfig()
    generated = np.asarray(generated, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if generated.ndim != 2 or reference.ndim != 2 or generated.shape[0] == 0:
        raise MetricsError("evaluate_report: need nonempty (M, D) point sets")
    if generated.shape[1] != reference.shape[1]:
        raise MetricsError("evaluate_report: dimension mismatch between sets")
    known = {"mmd", "w1", "w2"}
    bad = [m for m in metric_names if m not in known]
    if bad:
        raise MetricsError(f"unknown metrics: {bad}; available: {sorted(known)}")

    values: dict[str, list[float]] = {m: [] for m in metric_names}
    for rep in range(repeats):
        rng = np.random.default_rng(seed + rep)
        count = generated.shape[0]
        # equal counts are compared as-is; resampling only reconciles sizes
        ref = reference if reference.shape[0] == count else \
            resample_rows(reference, count, rng)
        if "mmd" in values:
            values["mmd"].append(rbf_mmd(generated, ref, config))
        if "w1" in values or "w2" in values:
            w_count = min(count, config.wasserstein_max)
            gs = generated if count == w_count else resample_rows(generated, w_count, rng)
            rs = ref if ref.shape[0] == w_count else resample_rows(ref, w_count, rng)
            if "w1" in values:
                values["w1"].append(wasserstein(gs, rs, 1, dims=config.wasserstein_dims,
                                                max_size=config.wasserstein_max))
            if "w2" in values:
                values["w2"].append(wasserstein(gs, rs, 2, dims=config.wasserstein_dims,
                                                max_size=config.wasserstein_max))
    return {
        name: {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
        for name, vals in values.items()
    }
