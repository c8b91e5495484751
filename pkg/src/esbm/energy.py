"""Potential-energy landscapes.

Analytic toy surfaces (double well, Muller-Brown) for transition-path
experiments and an RBF data-manifold energy for cell-style experiments: fitted
so that low energy coincides with high data density, with an analytic gradient
everywhere.  All potentials evaluate batches of points: value_grad maps
(P, D) -> ((P,), (P, D)).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.optimize

from . import checkpoint, kernels


class EnergyError(Exception):
    pass


@dataclass
class DoubleWell:
    """U(x) = a (x0^2 - 1)^2 + b/2 * sum_{j>0} xj^2 with minima at x0 = +-1."""

    a: float = 1.0
    b: float = 1.0

    def value_grad(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = _check_points(x, None)
        return kernels.double_well(x, self.a, self.b)


@dataclass
class MullerBrown:
    """The standard four-Gaussian surface in D=2; global minimum near
    (-0.558, 1.442) at about -146.7."""

    def value_grad(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = _check_points(x, 2)
        return kernels.muller_brown(x)


def _check_points(x: np.ndarray, dim: int | None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    if x.ndim != 2:
        raise EnergyError(f"points must be (P, D), got {x.shape}")
    if dim is not None and x.shape[1] != dim:
        raise EnergyError(f"expected dimension {dim}, got {x.shape[1]}")
    return x


def toy_potential(kind: str, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Value and analytic gradient of a named toy landscape at point(s) x."""
    if kind == "double_well":
        return DoubleWell().value_grad(x)
    if kind == "muller_brown":
        return MullerBrown().value_grad(x)
    raise EnergyError(f"unknown toy potential '{kind}'")


# ---------------------------------------------------------------------------
# RBF manifold energy
# ---------------------------------------------------------------------------

@dataclass
class RbfManifold:
    """Gaussian-bump mixture fitted so h(x) ~ 1 on the data; the energy
    U(x) = sum_j log((h_j + eps)^(-alpha) + eps) is near 0 on the manifold and
    approaches D * alpha * log(1/eps) far away."""

    centroids: np.ndarray   # (Nc, D)
    lambdas: np.ndarray     # (Nc,)
    omega: np.ndarray       # (Nc, D) per-coordinate weights
    kappa: float
    eps: float = 1e-6
    alpha_exp: float = 1.0
    fit_residual: float = 0.0

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def h(self, x: np.ndarray) -> np.ndarray:
        x = _check_points(x, self.dim)
        return kernels.rbf_h(x, self.centroids, self.lambdas, self.omega)

    def value_grad(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = _check_points(x, self.dim)
        return kernels.rbf_energy_grad(x, self.centroids, self.lambdas, self.omega,
                                       self.eps, self.alpha_exp)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        checkpoint.save_tensors(path, {
            "centroids": self.centroids,
            "lambdas": self.lambdas,
            "omega": self.omega,
        })
        meta = {
            "kind": "rbf_manifold",
            "kappa": self.kappa,
            "eps": self.eps,
            "alpha_exp": self.alpha_exp,
            "fit_residual": self.fit_residual,
            "n_centroids": int(self.centroids.shape[0]),
            "dim": int(self.centroids.shape[1]),
        }
        path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RbfManifold":
        path = Path(path)
        tensors = checkpoint.load_tensors(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        return cls(centroids=tensors["centroids"], lambdas=tensors["lambdas"],
                   omega=tensors["omega"], kappa=meta["kappa"], eps=meta["eps"],
                   alpha_exp=meta["alpha_exp"], fit_residual=meta["fit_residual"])


def manifold_energy(manifold: RbfManifold, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return manifold.value_grad(x)


class _EmptyCluster(Exception):
    pass


def _kmeans_pp_init(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    p = data.shape[0]
    centroids = np.empty((k, data.shape[1]))
    centroids[0] = data[rng.integers(p)]
    d2 = kernels.pairwise_sq_dists(data, centroids[0:1])[:, 0]
    for m in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[m] = data[rng.integers(p)]
            continue
        centroids[m] = data[rng.choice(p, p=d2 / total)]
        d2 = np.minimum(d2, kernels.pairwise_sq_dists(data, centroids[m:m + 1])[:, 0])
    return centroids


def _kmeans(data: np.ndarray, k: int, rng: np.random.Generator,
            iters: int) -> tuple[np.ndarray, np.ndarray]:
    centroids = _kmeans_pp_init(data, k, rng)
    labels = np.full(data.shape[0], -1)
    for _ in range(iters):
        new_labels = np.argmin(kernels.pairwise_sq_dists(data, centroids), axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for m in range(k):
            members = data[labels == m]
            if members.shape[0] == 0:
                raise _EmptyCluster(m)
            centroids[m] = members.mean(axis=0)
    return centroids, labels


def fit_rbf_manifold(data: np.ndarray, n_centroids: int, kappa: float,
                     seed: int = 0, kmeans_iters: int = 50, eps: float = 1e-6,
                     alpha_exp: float = 1.0, ridge: float = 1e-8) -> RbfManifold:
    """Cluster the cloud, set per-cluster bandwidths from within-cluster mean
    squared distance, and solve the ridge least-squares problem h(x_i) ~ 1."""
    data = _check_points(data, None)
    p, dim = data.shape
    if p < n_centroids:
        raise EnergyError(f"need at least {n_centroids} points, got {p}")
    if kappa <= 0:
        raise EnergyError("kappa must be positive")

    centroids = labels = None
    for attempt in range(5):
        try:
            centroids, labels = _kmeans(data, n_centroids,
                                        np.random.default_rng(seed + attempt),
                                        kmeans_iters)
            break
        except _EmptyCluster:
            continue
    if centroids is None:
        raise EnergyError("k-means produced an empty cluster in 5 seeded attempts")

    lambdas = np.empty(n_centroids)
    for m in range(n_centroids):
        members = data[labels == m]
        msd = float(np.mean(np.sum((members - centroids[m]) ** 2, axis=1)))
        if msd <= 0:
            # degenerate cluster of identical points: fall back to the global scale
            msd = float(np.mean(np.sum((data - data.mean(axis=0)) ** 2, axis=1)))
            if msd <= 0:
                msd = 1.0
        # bandwidth from the within-cluster mean squared distance; lambda must
        # carry 1/length^2 for the exponent to stay dimensionless
        lambdas[m] = 0.5 / (kappa ** 2 * msd)

    phi = np.exp(-0.5 * lambdas[None, :] * kernels.pairwise_sq_dists(data, centroids))
    # nonnegative least squares keeps h a positive bump mixture, so the energy
    # has no spurious off-manifold wells; the ridge enters as augmented rows
    design = np.vstack([phi, np.sqrt(ridge) * np.eye(n_centroids)])
    target = np.concatenate([np.ones(p), np.zeros(n_centroids)])
    try:
        w, _ = scipy.optimize.nnls(design, target)
    except (RuntimeError, np.linalg.LinAlgError) as exc:
        raise EnergyError("least-squares solve failed in manifold fit") from exc
    omega = np.tile(w[:, None], (1, dim))

    manifold = RbfManifold(centroids=centroids, lambdas=lambdas, omega=omega,
                           kappa=kappa, eps=eps, alpha_exp=alpha_exp)
    h = manifold.h(data)
    manifold.fit_residual = float(np.mean((1.0 - h) ** 2))
    return manifold


# ---------------------------------------------------------------------------
# point-cloud ingestion and potential references
# ---------------------------------------------------------------------------

def read_point_cloud(path: str | Path) -> np.ndarray:
    """CSV point cloud: one row per point, numeric columns, optional header."""
    path = Path(path)
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                if rows:
                    raise EnergyError(f"{path}: non-numeric row after data started")
                continue  # header
    if not rows:
        raise EnergyError(f"{path}: no numeric rows")
    arr = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise EnergyError(f"{path}: non-finite values in point cloud")
    return arr


def load_potential(spec: str):
    """Resolve a potential reference: 'double_well', 'muller_brown', or a path
    to a fitted manifold checkpoint."""
    if spec == "double_well":
        return DoubleWell()
    if spec == "muller_brown":
        return MullerBrown()
    path = Path(spec)
    if path.exists():
        return RbfManifold.load(path)
    raise EnergyError(f"unknown potential '{spec}' (not a kind, not a file)")
