import numpy as np
import pytest

from esbm.energy import (DoubleWell, EnergyError, MullerBrown, RbfManifold,
                         fit_rbf_manifold, load_potential, manifold_energy,
                         read_point_cloud, toy_potential)


def two_moons(n=500, noise=0.08, seed=0):
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0, np.pi, n)
    half = rng.random(n) < 0.5
    x = np.where(half, np.cos(theta), 1.0 - np.cos(theta))
    y = np.where(half, np.sin(theta), 0.5 - np.sin(theta))
    pts = np.stack([x, y], axis=1) + rng.normal(0, noise, (n, 2))
    return pts


def finite_difference(potential, x, h=1e-6):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (potential.value_grad(xp[None])[0][0]
                - potential.value_grad(xm[None])[0][0]) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# toy potentials
# ---------------------------------------------------------------------------

def test_double_well_stationary_points():
    u, grad = toy_potential("double_well", np.array([[1.0, 0.0], [-1.0, 0.0]]))
    assert np.allclose(u, 0.0, atol=1e-15)
    u0, g0 = toy_potential("double_well", np.array([[0.0, 0.0]]))
    assert u0[0] == 1.0
    assert np.allclose(g0, 0.0, atol=1e-15)


def test_muller_brown_global_minimum():
    # independent evaluation of the published four-term formula
    A = [-200.0, -100.0, -170.0, 15.0]
    a = [-1.0, -1.0, -6.5, 0.7]
    b = [0.0, 0.0, 11.0, 0.6]
    c = [-10.0, -10.0, -6.5, 0.7]
    x0 = [1.0, 0.0, -0.5, -1.0]
    y0 = [0.0, 0.5, 1.5, 1.0]
    px, py = -0.5582, 1.4417
    expected = sum(
        A[k] * np.exp(a[k] * (px - x0[k]) ** 2 + b[k] * (px - x0[k]) * (py - y0[k])
                      + c[k] * (py - y0[k]) ** 2)
        for k in range(4)
    )
    u, _ = toy_potential("muller_brown", np.array([[px, py]]))
    assert u[0] == pytest.approx(expected, abs=1e-9)
    assert u[0] == pytest.approx(-146.70, abs=0.05)


def test_toy_potential_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    dw, mb = DoubleWell(), MullerBrown()
    for _ in range(25):
        x = rng.uniform(-1.5, 1.5, 3)
        _, g = dw.value_grad(x[None])
        assert np.max(np.abs(g[0] - finite_difference(dw, x))) < 1e-5 * max(1, np.abs(g).max())
        y = rng.uniform(-1.2, 1.2, 2)
        _, gm = mb.value_grad(y[None])
        denom = max(1.0, float(np.abs(gm).max()))
        assert np.max(np.abs(gm[0] - finite_difference(mb, y))) / denom < 1e-5


def test_toy_potential_dimension_errors():
    with pytest.raises(EnergyError):
        toy_potential("muller_brown", np.zeros((1, 3)))
    with pytest.raises(EnergyError):
        toy_potential("nonsense", np.zeros((1, 2)))


# ---------------------------------------------------------------------------
# RBF manifold fit
# ---------------------------------------------------------------------------

def test_two_point_bandwidth_hand_value():
    data = np.array([[0.0], [2.0]])
    manifold = fit_rbf_manifold(data, n_centroids=1, kappa=1.0, seed=0)
    assert np.allclose(manifold.centroids, [[1.0]], atol=1e-12)
    # mean squared distance 1 -> lambda = 0.5 * (kappa * 1)^-2
    assert manifold.lambdas[0] == pytest.approx(0.5, abs=1e-12)


def test_repeated_point_fit_is_exact():
    data = np.tile([[0.7, -0.3]], (10, 1))
    manifold = fit_rbf_manifold(data, n_centroids=1, kappa=1.0, seed=0)
    h = manifold.h(np.array([[0.7, -0.3]]))
    assert np.allclose(h, 1.0, atol=1e-6)
    assert manifold.fit_residual < 1e-10


def test_two_moons_fit_residual():
    data = two_moons()
    manifold = fit_rbf_manifold(data, n_centroids=100, kappa=6.0, seed=0)
    assert manifold.fit_residual <= 1e-3


def test_fit_deterministic_under_seed():
    data = two_moons(n=200, seed=3)
    m1 = fit_rbf_manifold(data, n_centroids=20, kappa=1.5, seed=7)
    m2 = fit_rbf_manifold(data, n_centroids=20, kappa=1.5, seed=7)
    assert np.array_equal(m1.centroids, m2.centroids)
    assert np.array_equal(m1.omega, m2.omega)


def test_fit_requires_enough_points():
    with pytest.raises(EnergyError):
        fit_rbf_manifold(np.zeros((3, 2)), n_centroids=5, kappa=1.0)


# ---------------------------------------------------------------------------
# manifold energy
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def moons_manifold():
    return fit_rbf_manifold(two_moons(), n_centroids=100, kappa=6.0, seed=0), two_moons()


def test_energy_low_on_manifold_high_far_away(moons_manifold):
    manifold, data = moons_manifold
    u_on, _ = manifold_energy(manifold, data[:50])
    assert np.mean(np.abs(u_on)) < 0.1  # near sum_j log(1 + eps) ~ 0
    far = data[:10] + 50.0
    u_far, _ = manifold_energy(manifold, far)
    ceiling = manifold.dim * manifold.alpha_exp * np.log(1.0 / manifold.eps)
    assert np.all(u_far > 0.9 * ceiling)
    assert np.all(u_far > np.max(u_on))


def test_energy_displaced_point_above_on_manifold(moons_manifold):
    manifold, data = moons_manifold
    cluster_radius = np.sqrt(1.0 / np.mean(manifold.lambdas)) if np.mean(manifold.lambdas) > 0 else 1.0
    point = data[17]
    u_on, _ = manifold_energy(manifold, point[None])
    off = point + 5.0 * np.array([0.6, 0.8])
    u_off, _ = manifold_energy(manifold, off[None])
    assert u_off[0] > u_on[0]


def test_manifold_gradient_matches_finite_differences(moons_manifold):
    manifold, data = moons_manifold
    rng = np.random.default_rng(2)
    for _ in range(100):
        x = rng.uniform(-1.5, 2.5, 2)
        _, g = manifold.value_grad(x[None])
        fd = finite_difference(manifold, x)
        gap = np.max(np.abs(g[0] - fd))
        denom = max(float(np.abs(fd).max()), float(np.abs(g).max()))
        assert gap < 1e-8 or gap / denom < 1e-5


def test_negative_gradient_points_toward_data(moons_manifold):
    # probes must actually leave the manifold: on the h ~ 1 plateau the
    # gradient is fit noise and its direction is meaningless
    manifold, data = moons_manifold
    rng = np.random.default_rng(3)
    hits = 0
    trials = 0
    while trials < 1000:
        base = data[rng.integers(len(data))]
        direction = rng.normal(0, 1, 2)
        direction /= np.linalg.norm(direction)
        x = base + direction * rng.uniform(0.4, 2.0)
        d2 = np.sum((data - x) ** 2, axis=1)
        if np.sqrt(d2.min()) < 0.3:
            continue
        trials += 1
        _, g = manifold.value_grad(x[None])
        nearest = data[np.argmin(d2)]
        if np.dot(-g[0], nearest - x) > 0:
            hits += 1
    assert hits / trials >= 0.95


def test_h_is_finite_everywhere(moons_manifold):
    manifold, _ = moons_manifold
    rng = np.random.default_rng(4)
    pts = rng.uniform(-100, 100, (200, 2))
    h = manifold.h(pts)
    u, g = manifold.value_grad(pts)
    assert np.all(np.isfinite(h)) and np.all(np.isfinite(u)) and np.all(np.isfinite(g))


def test_h_positive_and_bounded_near_data(moons_manifold):
    # nonnegative weights make h a positive bump mixture, bounded by Nc*max(w)
    manifold, data = moons_manifold
    rng = np.random.default_rng(5)
    pts = data[rng.integers(len(data), size=100)] + rng.normal(0, 1.0, (100, 2))
    h = manifold.h(pts)
    assert np.all(h > 0)
    bound = manifold.centroids.shape[0] * np.max(np.abs(manifold.omega))
    assert np.all(h <= bound)
    assert np.all(manifold.omega >= 0)


def test_manifold_checkpoint_round_trip(tmp_path, moons_manifold):
    manifold, data = moons_manifold
    path = tmp_path / "manifold.bin"
    manifold.save(path)
    loaded = RbfManifold.load(path)
    u1, g1 = manifold.value_grad(data[:20])
    u2, g2 = loaded.value_grad(data[:20])
    assert np.array_equal(u1, u2) and np.array_equal(g1, g2)
    # usable through the generic resolver too
    resolved = load_potential(str(path))
    assert np.array_equal(resolved.value_grad(data[:5])[0], u1[:5])


def test_point_cloud_reader(tmp_path):
    path = tmp_path / "cloud.csv"
    path.write_text("a,b\n1.0,2.0\n3.5,-1.25\n")
    cloud = read_point_cloud(path)
    assert cloud.shape == (2, 2)
    assert cloud[1, 1] == -1.25
    bad = tmp_path / "empty.csv"
    bad.write_text("x,y\n")
    with pytest.raises(EnergyError):
        read_point_cloud(bad)
