"""Built-in consistency suites: gradient checks against central finite
differences, discrete Girsanov identities on random rollouts, the cone
constraint on the assembled bias, and oracles for the metric suite.  Used by
the CLI selfcheck command as a fast install gate."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, central_difference, relative_error
from .biasnet import BiasNetwork, TargetSpec, bias_graph, target_directions
from .dynamics import DynamicsParams, SystemState, rollout_many
from .energy import DoubleWell
from .metrics import MetricsConfig, brute_force_wasserstein, rbf_mmd, wasserstein
from .objective import f_hat

GRAD_TOL = 1e-4
GIRSANOV_TOL = 1e-8


def _fd_check(build, x0: np.ndarray, seeds: int, rng: np.random.Generator,
              low: float = -2.0, high: float = 2.0) -> float:
    """Max relative error between backprop and central differences for a
    scalar-valued op composition over random inputs."""
    worst = 0.0
    for _ in range(seeds):
        x = rng.uniform(low, high, x0.shape)
        leaf = ad.parameter(x)
        loss = build(leaf)
        (grad,) = ad.gradients(loss, [leaf])
        fd = central_difference(lambda arr: build(ad.constant(arr)).item(), x.copy())
        worst = max(worst, relative_error(grad, fd))
    return worst


def _primitive_cases(rng: np.random.Generator):
    other = rng.uniform(-2.0, 2.0, (3, 4))
    mat = rng.uniform(-2.0, 2.0, (4, 3))
    probe = rng.uniform(-1.0, 1.0, (3, 4))
    gain = ad.constant(rng.uniform(0.5, 1.5, 4))
    bias = ad.constant(rng.uniform(-0.5, 0.5, 4))

    def weighted(t: Tensor) -> Tensor:
        # scalarize with a fixed probe so every output entry is exercised
        return ad.tsum(ad.mul(t, ad.constant(probe)))

    return {
        "add": lambda x: weighted(ad.add(x, ad.constant(other))),
        "sub": lambda x: weighted(ad.sub(x, ad.constant(other))),
        "mul": lambda x: weighted(ad.mul(x, ad.constant(other))),
        "matmul": lambda x: ad.tsum(ad.matmul(x, ad.constant(mat))),
        "transpose": lambda x: weighted(ad.transpose(ad.transpose(x))),
        "reshape": lambda x: weighted(ad.reshape(ad.reshape(x, (12,)), (3, 4))),
        "concat": lambda x: ad.tsum(ad.square(ad.concat([x, ad.constant(other)], axis=0))),
        "slice": lambda x: ad.tsum(ad.square(x[1:, :2])),
        "sum": lambda x: ad.tsum(ad.square(ad.tsum(x, axis=0))),
        "mean": lambda x: ad.tsum(ad.square(ad.tmean(x, axis=1))),
        "broadcast": lambda x: ad.tsum(ad.square(ad.broadcast_to(ad.tsum(x, axis=0, keepdims=True), (3, 4)))),
        "exp": lambda x: weighted(ad.exp(x)),
        "square": lambda x: weighted(ad.square(x)),
        "softplus": lambda x: weighted(ad.softplus(x)),
        "gelu": lambda x: weighted(ad.gelu(x)),
        "softmax": lambda x: weighted(ad.softmax(x, axis=-1)),
        "layer_norm": lambda x: weighted(ad.layer_norm(x, gain, bias)),
    }


def gradcheck_suite(seeds: int = 100, seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    results = []
    cases = _primitive_cases(rng)
    x0 = np.zeros((3, 4))
    for name, build in cases.items():
        err = _fd_check(build, x0, seeds, rng)
        results.append((f"gradcheck/{name}", err < GRAD_TOL, f"max rel err {err:.3g}"))
    # positive-domain primitives
    for name, build in {
        "log": lambda x: ad.tsum(ad.square(ad.log(x))),
        "sqrt": lambda x: ad.tsum(ad.square(ad.sqrt(x))),
    }.items():
        err = _fd_check(build, x0, seeds, rng, low=0.5, high=2.0)
        results.append((f"gradcheck/{name}", err < GRAD_TOL, f"max rel err {err:.3g}"))

    # attention block on a random 2-token input
    q = rng.uniform(-1, 1, (1, 1, 2, 4))
    v = rng.uniform(-1, 1, (1, 1, 2, 4))

    def attn(x: Tensor) -> Tensor:
        return ad.tsum(ad.square(ad.attention(ad.constant(q), x, ad.constant(v))))

    err = _fd_check(attn, np.zeros((1, 1, 2, 4)), max(10, seeds // 10), rng, low=-1.0, high=1.0)
    results.append(("gradcheck/attention", err < GRAD_TOL, f"max rel err {err:.3g}"))

    # full bias network, sampled parameter entries
    err = network_gradcheck(seed=seed)
    results.append(("gradcheck/bias_network", err < GRAD_TOL, f"max rel err {err:.3g}"))
    return results


def network_gradcheck(seed: int = 0, n_params: int = 12, h: float = 1e-4) -> float:
    """Finite-difference check of d(loss)/d(theta) through the full bias
    pipeline on a small network, sampling parameter entries."""
    rng = np.random.default_rng(seed)
    net = BiasNetwork(dim=2, hidden_dim=8, n_layers=1, n_heads=2, ff_dim=16,
                      dropout=0.0, seed=seed)
    R = rng.normal(0.0, 1.0, (2, 3, 2))
    V = rng.normal(0.0, 1.0, (2, 3, 2))
    tgt = rng.normal(0.0, 1.0, (2, 3, 2))

    def loss_value() -> float:
        bias, _, _, _ = bias_graph(net, R, V, tgt)
        return ad.tsum(ad.square(bias)).item()

    bias, _, _, _ = bias_graph(net, R, V, tgt)
    loss = ad.tsum(ad.square(bias))
    names = sorted(net.params)
    grads = dict(zip(names, ad.gradients(loss, [net.params[k] for k in names])))

    worst = 0.0
    for _ in range(n_params):
        name = names[rng.integers(len(names))]
        flat = net.params[name].data.reshape(-1)
        i = int(rng.integers(flat.size))
        old = flat[i]
        flat[i] = old + h
        fp = loss_value()
        flat[i] = old - h
        fm = loss_value()
        flat[i] = old
        fd = (fp - fm) / (2.0 * h)
        analytic = grads[name].reshape(-1)[i]
        denom = max(abs(fd), abs(analytic), 1e-6)
        worst = max(worst, abs(fd - analytic) / denom)
    return float(worst)


def girsanov_suite(n_paths: int = 200, seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    potential = DoubleWell()
    worst_rnd = 0.0
    worst_identity = 0.0
    for case in range(n_paths):
        mode = "overdamped" if case % 2 == 0 else "underdamped"
        n, d, K = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(2, 6))
        params = DynamicsParams(mode=mode, gamma=float(rng.uniform(0.5, 2.0)),
                                tau_start=float(rng.uniform(0.3, 1.5)),
                                tau_end=float(rng.uniform(0.3, 1.5)),
                                dt=0.01, n_steps=K)
        scale = rng.uniform(0.2, 1.5)

        def control(R, V, targets):
            return scale * np.tanh(R + 0.5 * V)

        state0 = SystemState(rng.normal(0, 1, (n, d)), np.zeros((n, d)))
        target = TargetSpec(rng.normal(0, 1, (n, d)), sigma=0.5)
        traj = rollout_many(control, [state0], [target], params, potential,
                            base_seed=seed * 100 + case)[0]
        girsanov = float(np.sum(traj.behavior_bias * traj.noise)
                         + 0.5 * np.sum(traj.behavior_bias ** 2) * params.dt)
        worst_rnd = max(worst_rnd, abs((traj.log_pb - traj.log_p0) - girsanov))

        # path-functional identity with an independent current control
        other = rng.uniform(0.3, 1.2)
        b_cur = other * np.tanh(traj.positions[:-1] + 0.3)
        lhs = f_hat(traj, b_cur) + traj.reward
        rhs = _log_ratio_vs_current(traj, b_cur) + traj.reward
        worst_identity = max(worst_identity, abs(lhs - rhs))
    return [
        ("girsanov/radon_nikodym", worst_rnd < GIRSANOV_TOL, f"max abs err {worst_rnd:.3g}"),
        ("girsanov/path_functional", worst_identity < GIRSANOV_TOL, f"max abs err {worst_identity:.3g}"),
    ]


def _log_ratio_vs_current(traj, b_cur: np.ndarray) -> float:
    """log p0(path) - log p^{b_cur}(path) from independent Gaussian transition
    densities (normalization constants cancel in the difference)."""
    total = 0.0
    for k in range(traj.n_steps):
        sig = traj.sigma[k][:, None]
        var = sig ** 2 * traj.dt
        obs = sig * (traj.behavior_bias[k] * traj.dt + traj.noise[k])
        resid_cur = obs - sig * b_cur[k] * traj.dt
        total += float(-0.5 * np.sum(obs ** 2 / var) + 0.5 * np.sum(resid_cur ** 2 / var))
    return total


def positivity_suite(n_draws: int = 10000, seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    net = BiasNetwork(dim=3, hidden_dim=16, n_layers=1, n_heads=2, ff_dim=32,
                      dropout=0.0, seed=seed)
    violations = 0
    worst_proj = 0.0
    batch = 500
    done = 0
    while done < n_draws:
        m = min(batch, n_draws - done)
        done += m
        for t in net.params.values():
            t.data += rng.normal(0, 0.02, t.shape)
        R = rng.normal(0, 2, (m, 4, 3))
        V = rng.normal(0, 2, (m, 4, 3))
        tgt = rng.normal(0, 2, (m, 4, 3))
        bias, alpha, h, _ = bias_graph(net, R, V, tgt)
        s_hat, defined = target_directions(R, tgt)
        dots = np.sum(bias.data * s_hat, axis=-1)
        violations += int(np.sum(dots < -1e-12))
        # orthogonal component residual along s_hat
        orth = bias.data - alpha.data * s_hat
        proj = np.abs(np.sum(orth * s_hat, axis=-1))
        worst_proj = max(worst_proj, float(np.max(proj * defined[..., 0])))
    return [
        ("positivity/cone", violations == 0, f"{violations} violations in {n_draws} draws"),
        ("positivity/projection", worst_proj < 1e-12, f"max residual {worst_proj:.3g}"),
    ]


def metric_oracle_suite(n_cases: int = 200, seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    worst_gap = 0.0
    ordering_ok = True
    for _ in range(n_cases):
        m = int(rng.integers(2, 8))
        d = int(rng.integers(1, 4))
        x = rng.normal(0, 1, (m, d))
        y = rng.normal(0.5, 1, (m, d))
        for p in (1, 2):
            gap = abs(wasserstein(x, y, p) - brute_force_wasserstein(x, y, p))
            worst_gap = max(worst_gap, gap)
        if wasserstein(x, y, 1) > wasserstein(x, y, 2) + 1e-12:
            ordering_ok = False
    cfg = MetricsConfig()
    x = rng.normal(0, 1, (40, 3))
    self_zero = abs(rbf_mmd(x, x, cfg)) < 1e-12
    y = rng.normal(1, 1, (40, 3))
    symmetric = abs(rbf_mmd(x, y, cfg) - rbf_mmd(y, x, cfg)) < 1e-12
    return [
        ("metrics/hungarian_oracle", worst_gap < 1e-10, f"max gap {worst_gap:.3g}"),
        ("metrics/w1_le_w2", ordering_ok, "W1 <= W2 on random clouds"),
        ("metrics/mmd_self_zero", self_zero, "MMD(X, X) = 0"),
        ("metrics/mmd_symmetry", symmetric, "MMD(X, Y) = MMD(Y, X)"),
    ]


def run_all(fast: bool = False, seed: int = 0) -> list[tuple[str, bool, str]]:
    seeds = 25 if fast else 100
    draws = 2000 if fast else 10000
    paths = 50 if fast else 200
    cases = 50 if fast else 200
    results = []
    results += gradcheck_suite(seeds=seeds, seed=seed)
    results += girsanov_suite(n_paths=paths, seed=seed)
    results += positivity_suite(n_draws=draws, seed=seed)
    results += metric_oracle_suite(n_cases=cases, seed=seed)
    return results
