"""Entangled bias force: per-particle tokens, set-attention encoder, and the
cone-constrained assembly that keeps the force pointed toward the target.

Particles are treated as a set: there are no positional encodings, so the
network is permutation-equivariant by construction.  Token features are
``[r_i, v_i (or zeros), r_B_i - r_i, ||r_B_i - r_i||]``; the encoder output
feeds two MLP heads producing a raw scaling factor per particle and a
correction vector that is projected onto the plane orthogonal to the unit
target direction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor

if TYPE_CHECKING:  # pragma: no cover
    from .dynamics import SystemState

COINCIDENT_TOL = 1e-9


class BiasNetError(Exception):
    pass


class DegenerateCloudError(BiasNetError):
    pass


@dataclass
class TargetSpec:
    """Target positions with the Gaussian reward radius around them."""

    positions: np.ndarray  # (n, d)
    sigma: float
    pi_kind: str = "gaussian"

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2:
            raise BiasNetError(f"target positions must be (n, d), got {self.positions.shape}")
        if not np.all(np.isfinite(self.positions)):
            raise BiasNetError("target positions contain non-finite values")
        if self.sigma <= 0:
            raise BiasNetError(f"target sigma must be positive, got {self.sigma}")
        if self.pi_kind != "gaussian":
            raise BiasNetError(f"unsupported target density kind '{self.pi_kind}'")


@dataclass
class BiasOutput:
    """Assembled bias force plus its constituents, one row per particle."""

    alpha: np.ndarray   # (n,) nonnegative scaling factors
    h: np.ndarray       # (n, d) raw correction vectors
    s_hat: np.ndarray   # (n, d) unit target directions (zero rows where undefined)
    bias: np.ndarray    # (n, d) assembled force


def target_directions(positions: np.ndarray, target_positions: np.ndarray):
    """Unit directions toward the target and a mask of particles where the
    direction is defined (distance above the coincidence tolerance).

    Works on (n, d) or batched (..., n, d) arrays.
    """
    delta = target_positions - positions
    dist = np.linalg.norm(delta, axis=-1, keepdims=True)
    defined = dist >= COINCIDENT_TOL
    s_hat = np.where(defined, delta / np.where(defined, dist, 1.0), 0.0)
    return s_hat, defined.astype(np.float64)


def build_features(state: "SystemState", target: TargetSpec,
                   velocity_conditioning: bool = True) -> np.ndarray:
    """Token features (n, 3d+1) for one state; row i pairs with target row i."""
    return build_features_arrays(state.positions, state.velocities,
                                 target.positions, velocity_conditioning)


def build_features_arrays(positions: np.ndarray, velocities: np.ndarray,
                          target_positions: np.ndarray,
                          velocity_conditioning: bool) -> np.ndarray:
    """Batched feature construction on raw (..., n, d) arrays."""
    positions = np.asarray(positions, dtype=np.float64)
    velocities = np.asarray(velocities, dtype=np.float64)
    target_positions = np.asarray(target_positions, dtype=np.float64)
    if positions.shape != target_positions.shape or positions.shape != velocities.shape:
        raise BiasNetError(
            f"state/target shape mismatch: R{positions.shape} V{velocities.shape} "
            f"target{target_positions.shape}"
        )
    delta = target_positions - positions
    dist = np.linalg.norm(delta, axis=-1, keepdims=True)
    vel = velocities if velocity_conditioning else np.zeros_like(velocities)
    return np.concatenate([positions, vel, delta, dist], axis=-1)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class BiasNetwork:
    """Parameter container and forward pass for the bias-force network.

    ``dim`` is the particle dimensionality d; tokens always carry 3d+1
    features (the velocity block is zeroed when velocity conditioning is off,
    keeping checkpoints shape-compatible across that ablation).
    """

    def __init__(self, dim: int, hidden_dim: int = 256, n_layers: int = 4,
                 n_heads: int = 8, ff_dim: int = 512, dropout: float = 0.1,
                 velocity_conditioning: bool = True, md_mode: bool = False,
                 seed: int = 0):
        if hidden_dim % n_heads != 0:
            raise BiasNetError(f"hidden_dim {hidden_dim} not divisible by n_heads {n_heads}")
        self.dim = dim
        self.token_dim = 3 * dim + 1
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.ff_dim = ff_dim
        self.dropout = dropout
        self.velocity_conditioning = velocity_conditioning
        self.md_mode = md_mode
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    def _linear_init(self, rng, name: str, fan_in: int, fan_out: int) -> None:
        scale = np.sqrt(2.0 / (fan_in + fan_out))
        self.params[f"{name}.w"] = ad.parameter(rng.normal(0.0, scale, (fan_in, fan_out)))
        self.params[f"{name}.b"] = ad.parameter(np.zeros(fan_out))

    def _init_params(self, rng) -> None:
        dm, ff, d = self.hidden_dim, self.ff_dim, self.dim
        self._linear_init(rng, "input", self.token_dim, dm)
        for i in range(self.n_layers):
            p = f"enc{i}"
            for proj in ("wq", "wk", "wv", "wo"):
                self._linear_init(rng, f"{p}.{proj}", dm, dm)
            self._linear_init(rng, f"{p}.ff1", dm, ff)
            self._linear_init(rng, f"{p}.ff2", ff, dm)
            for ln in ("ln1", "ln2"):
                self.params[f"{p}.{ln}.g"] = ad.parameter(np.ones(dm))
                self.params[f"{p}.{ln}.b"] = ad.parameter(np.zeros(dm))
        self._linear_init(rng, "alpha.fc1", dm, dm)
        self._linear_init(rng, "alpha.fc2", dm, 1)
        self._linear_init(rng, "hvec.fc1", dm, dm)
        self._linear_init(rng, "hvec.fc2", dm, d)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_parameters(self) -> None:
        for t in self.params.values():
            t.data[:] = 0.0

    def _linear(self, x: Tensor, name: str) -> Tensor:
        return ad.add(ad.matmul(x, self.params[f"{name}.w"]), self.params[f"{name}.b"])

    def forward(self, features: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        """Encoder + heads on a (B, n, token_dim) feature batch.

        Returns (alpha_raw (B, n, 1), h (B, n, d)) as graph tensors.
        """
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 2:
            features = features[None]
        if features.shape[-1] != self.token_dim:
            raise BiasNetError(
                f"feature dim {features.shape[-1]} != token_dim {self.token_dim}"
            )
        bsz, n, _ = features.shape
        dm, heads = self.hidden_dim, self.n_heads
        dh = dm // heads
        rate = self.dropout

        x = self._linear(ad.constant(features), "input")
        for i in range(self.n_layers):
            p = f"enc{i}"
            q = ad.matmul(x, self.params[f"{p}.wq.w"])
            k = ad.matmul(x, self.params[f"{p}.wk.w"])
            v = ad.matmul(x, self.params[f"{p}.wv.w"])
            q = ad.add(q, self.params[f"{p}.wq.b"])
            k = ad.add(k, self.params[f"{p}.wk.b"])
            v = ad.add(v, self.params[f"{p}.wv.b"])

            def split(t: Tensor) -> Tensor:
                return ad.transpose(ad.reshape(t, (bsz, n, heads, dh)), (0, 2, 1, 3))

            ctx = ad.attention(split(q), split(k), split(v), rate, rng, train)
            ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (bsz, n, dm))
            attn_out = ad.dropout(self._linear(ctx, f"{p}.wo"), rate, rng, train)
            x = ad.layer_norm(ad.add(x, attn_out),
                              self.params[f"{p}.ln1.g"], self.params[f"{p}.ln1.b"])
            ff = self._linear(ad.gelu(self._linear(x, f"{p}.ff1")), f"{p}.ff2")
            ff = ad.dropout(ff, rate, rng, train)
            x = ad.layer_norm(ad.add(x, ff),
                              self.params[f"{p}.ln2.g"], self.params[f"{p}.ln2.b"])

        alpha_raw = self._linear(ad.gelu(self._linear(x, "alpha.fc1")), "alpha.fc2")
        h = self._linear(ad.gelu(self._linear(x, "hvec.fc1")), "hvec.fc2")
        return alpha_raw, h

    # -- persistence --------------------------------------------------------

    def sidecar(self, n: int | None = None, extra: dict | None = None) -> dict:
        meta = {
            "token_dim": self.token_dim,
            "d": self.dim,
            "n": n,
            "velocity_conditioning": self.velocity_conditioning,
            "md_mode": self.md_mode,
            "hidden_dim": self.hidden_dim,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "ff_dim": self.ff_dim,
            "dropout": self.dropout,
        }
        if extra:
            meta.update(extra)
        return meta

    def save(self, path: str | Path, n: int | None = None, extra: dict | None = None) -> None:
        path = Path(path)
        checkpoint.save_tensors(path, {k: t.data for k, t in self.params.items()})
        path.with_suffix(".json").write_text(
            json.dumps(self.sidecar(n=n, extra=extra), sort_keys=True, indent=2) + "\n"
        )

    @classmethod
    def load(cls, path: str | Path) -> tuple["BiasNetwork", dict]:
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        net = cls(
            dim=meta["d"],
            hidden_dim=meta["hidden_dim"],
            n_layers=meta["n_layers"],
            n_heads=meta["n_heads"],
            ff_dim=meta["ff_dim"],
            dropout=meta["dropout"],
            velocity_conditioning=meta["velocity_conditioning"],
            md_mode=meta["md_mode"],
        )
        tensors = checkpoint.load_tensors(path)
        if set(tensors) != set(net.params):
            raise checkpoint.CheckpointError(
                f"{path}: tensor names do not match the architecture in the sidecar"
            )
        for name, arr in tensors.items():
            if arr.shape != net.params[name].shape:
                raise checkpoint.CheckpointError(
                    f"{path}: shape {arr.shape} for '{name}' != expected {net.params[name].shape}"
                )
            net.params[name].data = arr.copy()
        return net, meta


# ---------------------------------------------------------------------------
# cone-constrained assembly
# ---------------------------------------------------------------------------

def assemble_bias(alpha_raw: Tensor, h: Tensor, s_hat: np.ndarray,
                  mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """b = softplus(alpha_raw) * s_hat + (I - s_hat s_hat^T) h, zeroed where the
    target direction is undefined.  Returns (bias (B,n,d), alpha (B,n,1))."""
    s = ad.constant(s_hat)
    m = ad.constant(mask)
    alpha = ad.softplus(alpha_raw)
    parallel = ad.mul(ad.broadcast_to(alpha, h.shape), s)
    dot = ad.tsum(ad.mul(h, s), axis=-1, keepdims=True)
    orth = ad.sub(h, ad.mul(ad.broadcast_to(dot, h.shape), s))
    bias = ad.mul(ad.add(parallel, orth), ad.broadcast_to(m, h.shape))
    return bias, ad.mul(alpha, m)


def bias_graph(net: BiasNetwork, positions: np.ndarray, velocities: np.ndarray,
               target_positions: np.ndarray, train: bool = False,
               rng: np.random.Generator | None = None,
               align_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor, Tensor, np.ndarray]:
    """Differentiable bias evaluation on a batch of states.

    positions/velocities/target_positions: (B, n, d).  In MD mode each state is
    Kabsch-aligned to its target frame before featurization and the predicted
    force is rotated back.  Returns (bias (B,n,d), alpha (B,n,1), h (B,n,d),
    s_hat (B,n,d)); s_hat is expressed in the original frame.
    """
    positions = np.asarray(positions, dtype=np.float64)
    velocities = np.asarray(velocities, dtype=np.float64)
    target_positions = np.asarray(target_positions, dtype=np.float64)
    rotations = None
    if net.md_mode:
        bsz = positions.shape[0]
        rotations = np.empty((bsz, net.dim, net.dim))
        pos_a = np.empty_like(positions)
        vel_a = np.empty_like(velocities)
        for i in range(bsz):
            rot, _, aligned = kabsch_align(positions[i], target_positions[i], align_mask)
            rotations[i] = rot
            pos_a[i] = aligned
            vel_a[i] = velocities[i] @ rot
        feat_pos, feat_vel = pos_a, vel_a
    else:
        feat_pos, feat_vel = positions, velocities

    features = build_features_arrays(feat_pos, feat_vel, target_positions,
                                     net.velocity_conditioning)
    s_hat, mask = target_directions(feat_pos, target_positions)
    alpha_raw, h = net.forward(features, train=train, rng=rng)
    bias, alpha = assemble_bias(alpha_raw, h, s_hat, mask)
    if rotations is not None:
        # rotate force (and reported direction) back to the original frame
        bias = ad.matmul(bias, ad.constant(np.swapaxes(rotations, -1, -2)))
        s_hat = np.einsum("bnd,bed->bne", s_hat, rotations)
    if not np.all(np.isfinite(bias.data)):
        bad = np.argwhere(~np.isfinite(bias.data).all(axis=-1))
        raise BiasNetError(f"non-finite bias output for (batch, particle) {bad[0].tolist()}")
    return bias, alpha, h, s_hat


def compute_bias(net: BiasNetwork, state: "SystemState", target: TargetSpec,
                 train: bool = False, rng: np.random.Generator | None = None,
                 align_mask: np.ndarray | None = None) -> BiasOutput:
    """Evaluate the assembled bias force for one state (no gradients kept)."""
    bias, alpha, h, s_hat = bias_graph(
        net, state.positions[None], state.velocities[None], target.positions[None],
        train=train, rng=rng, align_mask=align_mask,
    )
    return BiasOutput(alpha=alpha.data[0, :, 0], h=h.data[0], s_hat=s_hat[0],
                      bias=bias.data[0])


# ---------------------------------------------------------------------------
# Kabsch alignment
# ---------------------------------------------------------------------------

def kabsch_align(positions: np.ndarray, reference: np.ndarray,
                 mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Optimal rigid superposition of ``positions`` onto ``reference``.

    Returns (rotation (d,d) with det +1, translation (d,), aligned (n,d)) such
    that ``aligned = positions @ rotation + translation`` minimizes the masked
    squared deviation from the reference.
    """
    positions = np.asarray(positions, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if positions.shape != reference.shape or positions.ndim != 2:
        raise BiasNetError(f"kabsch: shapes {positions.shape} vs {reference.shape}")
    n, d = positions.shape
    if mask is None:
        idx = np.arange(n)
    else:
        mask = np.asarray(mask)
        idx = np.flatnonzero(mask) if mask.dtype == bool else np.asarray(mask, dtype=int)
    if len(idx) < d:
        raise DegenerateCloudError(f"kabsch: need at least {d} masked particles, got {len(idx)}")

    mu = positions[idx].mean(axis=0)
    mu_ref = reference[idx].mean(axis=0)
    x = positions[idx] - mu
    y = reference[idx] - mu_ref
    cov = x.T @ y
    u, s, vt = np.linalg.svd(cov)
    scale = max(float(s[0]), np.max(np.abs(x)) * np.max(np.abs(y)) * len(idx), 1e-30)
    if d >= 2 and s[d - 2] <= 1e-12 * scale:
        raise DegenerateCloudError("kabsch: rank-deficient covariance (degenerate point cloud)")
    sign = np.sign(np.linalg.det(u @ vt))
    flip = np.ones(d)
    flip[-1] = sign
    rotation = (u * flip) @ vt
    translation = mu_ref - mu @ rotation
    return rotation, translation, positions @ rotation + translation
