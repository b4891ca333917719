import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msfem_topopt.config import ConfigError
from msfem_topopt.filters import (ProjectionParams, backprop_sensitivities, build_filter,
                                  build_neighbourhood_filter, build_pde_filter, heaviside_derivative,
                                  heaviside_project, nondiscreteness)


# -- projection ---------------------------------------------------------------


@pytest.mark.parametrize("beta", [1.0, 8.0, 64.0])
@pytest.mark.parametrize("eta", [0.3, 0.5, 0.7])
def test_heaviside_endpoints(beta, eta):
    prm = ProjectionParams(beta, eta)
    assert abs(heaviside_project(0.0, prm)) < 1e-15
    assert abs(heaviside_project(1.0, prm) - 1.0) < 1e-15


@pytest.mark.parametrize("beta", [1e-3, 1.0, 64.0, 500.0])
def test_heaviside_symmetry(beta):
    prm = ProjectionParams(beta, 0.5)
    assert heaviside_project(0.5, prm) == pytest.approx(0.5, abs=1e-15)
    x = np.linspace(0, 1, 21)
    assert np.allclose(heaviside_project(x, prm) + heaviside_project(1 - x, prm), 1.0, atol=1e-14)


@given(st.floats(0, 1), st.floats(0.01, 200), st.floats(0, 1), st.floats(0, 1))
@settings(max_examples=200, deadline=None)
def test_projection_bounds_and_eta_ordering(x, beta, e1, e2):
    lo, hi = sorted((e1, e2))
    a = heaviside_project(x, ProjectionParams(beta, lo))
    b = heaviside_project(x, ProjectionParams(beta, hi))
    assert -1e-12 <= b <= a + 1e-12 <= 1 + 2e-12


def test_projection_monotone_in_input():
    x = np.linspace(0, 1, 201)
    y = heaviside_project(x, ProjectionParams(16.0, 0.4))
    assert np.all(np.diff(y) > 0)


def test_projected_volume_decreases_with_eta(rng):
    x = rng.uniform(0, 1, 500)
    vols = [heaviside_project(x, ProjectionParams(16.0, e)).mean() for e in np.linspace(0.05, 0.95, 19)]
    assert np.all(np.diff(vols) < 0)


@pytest.mark.parametrize("beta", [1.0, 8.0, 64.0])
def test_heaviside_derivative_complex_step(beta, rng):
    prm = ProjectionParams(beta, 0.4)
    x = rng.uniform(0.01, 0.99, 50)
    cs = heaviside_project(x + 1e-30j, prm).imag / 1e-30
    assert np.allclose(heaviside_derivative(x, prm), cs, rtol=1e-12, atol=0)


def test_heaviside_derivative_central_difference(rng):
    prm = ProjectionParams(8.0, 0.4)
    h = 1e-7
    for x in rng.uniform(0.2, 0.6, 20):
        fd = (heaviside_project(x + h, prm) - heaviside_project(x - h, prm)) / (2 * h)
        assert abs(heaviside_derivative(x, prm) - fd) <= 1e-7 * abs(fd)


def test_heaviside_derivative_small_beta():
    prm = ProjectionParams(1e-6, 0.5)
    x, d = 0.3, 1e-4
    fd = (heaviside_project(x + d, prm) - heaviside_project(x - d, prm)) / (2 * d)
    assert heaviside_derivative(x, prm) == pytest.approx(fd, rel=1e-7)
    assert heaviside_derivative(x, prm) == pytest.approx(1.0, rel=1e-6)


def test_heaviside_derivative_peak_and_sign():
    prm = ProjectionParams(32.0, 0.6)
    x = np.linspace(0, 1, 1001)
    d = heaviside_derivative(x, prm)
    assert np.all(d >= 0) and np.all(d[100:-100] > 0)
    assert x[np.argmax(d)] == pytest.approx(0.6)


@pytest.mark.parametrize("beta,eta", [(0.0, 0.5), (-1.0, 0.5), (1.0, 1.5), (1.0, -0.1)])
def test_projection_params_validated(beta, eta):
    with pytest.raises(ValueError):
        ProjectionParams(beta, eta)


def test_nondiscreteness():
    assert nondiscreteness(np.zeros(10)) == 0.0
    assert nondiscreteness(np.ones(10)) == 0.0
    assert nondiscreteness(np.full(10, 0.5)) == 1.0
    assert nondiscreteness(np.r_[np.full(5, 0.25), np.full(5, 0.75)]) == pytest.approx(0.75)


# -- neighbourhood filter -------------------------------------------------------


def toroidal_oracle(x, n, rmin):
    """Direct double loop over the 3x3 block of tile copies."""
    X = x.reshape(n, n)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            num = den = 0.0
            for k in range(-n, 2 * n):
                for l in range(-n, 2 * n):
                    w = max(0.0, rmin - np.hypot(i - k, j - l))
                    num += w * X[k % n, l % n]
                    den += w
            out[i, j] = num / den
    return out.ravel()


@pytest.mark.parametrize("n,rmin", [(5, 2.0), (6, 3.5), (4, 5.5)])
def test_neighbourhood_matches_toroidal_oracle(n, rmin, rng):
    f = build_neighbourhood_filter(n, rmin)
    spike = np.zeros(n * n)
    spike[7] = 1.0
    assert np.allclose(f.apply(spike), toroidal_oracle(spike, n, rmin), atol=1e-14)
    x = rng.uniform(0, 1, n * n)
    assert np.allclose(f.apply(x), toroidal_oracle(x, n, rmin), atol=1e-14)


def test_neighbourhood_uniform_and_rows(rng):
    f = build_neighbourhood_filter(8, 3.0)
    assert np.allclose(f.apply(np.full(64, 0.37)), 0.37, atol=1e-15)
    assert np.allclose(np.asarray(f.W.sum(axis=1)).ravel(), 1.0, atol=1e-15)


def test_neighbourhood_translation_equivariant(rng):
    n = 7
    f = build_neighbourhood_filter(n, 2.5)
    x = rng.uniform(0, 1, (n, n))
    y = f.apply(x.ravel()).reshape(n, n)
    shifted = f.apply(np.roll(x, (2, 3), axis=(0, 1)).ravel()).reshape(n, n)
    assert np.allclose(shifted, np.roll(y, (2, 3), axis=(0, 1)), atol=1e-14)


def test_neighbourhood_radius_limit():
    with pytest.raises(ConfigError):
        build_neighbourhood_filter(4, 6.5)


def test_neighbourhood_adjoint_is_dense_transpose(rng):
    f = build_neighbourhood_filter(6, 2.5)
    W = f.matrix()
    d = np.ones(36)
    assert np.allclose(f.adjoint(d), W.T @ d, atol=1e-14)
    assert np.allclose(f.adjoint(d), W.sum(axis=0), atol=1e-14)


# -- PDE filter -----------------------------------------------------------------


FILTERS = [
    ("neighbourhood", lambda: build_neighbourhood_filter(8, 3.0)),
    ("pde-single", lambda: build_pde_filter("single", 8, 3.0)),
    ("pde-layers", lambda: build_pde_filter("layers", 6, 3.0, 3)),
    ("pde-slices", lambda: build_pde_filter("slices", 6, 3.0, 4)),
]


@pytest.mark.parametrize("name,make", FILTERS, ids=[f[0] for f in FILTERS])
def test_filter_linear_adjoint_bounds(name, make, rng):
    f = make()
    n = f.size
    x, y = rng.uniform(0, 1, (2, n))
    a, b = 0.3, -1.7
    assert np.allclose(f.apply(a * x + b * y), a * f.apply(x) + b * f.apply(y), atol=1e-12)
    assert abs(f.apply(x) @ y - x @ f.adjoint(y)) < 1e-12 * n
    z = f.apply(x)
    assert z.min() >= -1e-12 and z.max() <= 1 + 1e-12
    assert np.allclose(f.apply(np.full(n, 0.42)), 0.42, atol=1e-12)


def test_pde_filter_row_sums():
    f = build_pde_filter("layers", 5, 2.0, 3)
    W = f.matrix()
    assert np.allclose(W.sum(axis=1), 1.0, atol=1e-12)


def test_three_layer_edges_connected(rng):
    n, k = 6, 3
    f = build_pde_filter("layers", n, 3.0, k)
    nodal = f.nodal(rng.uniform(0, 1, k * n * n))
    edges = []
    for b in range(k):
        for iy in (0, n):
            edges.append(nodal[[f.node(b, ix, iy) for ix in range(n + 1)]])
    for e in edges[1:]:
        assert np.allclose(e, edges[0], atol=1e-14)
    for b in range(k):
        left = nodal[[f.node(b, 0, iy) for iy in range(n + 1)]]
        right = nodal[[f.node(b, n, iy) for iy in range(n + 1)]]
        assert np.allclose(left, right, atol=1e-14)


def test_slice_filter_periodic_left_right_only(rng):
    n, k = 6, 3
    f = build_pde_filter("slices", n, 3.0, k)
    inner = f.inner
    nodal = inner.nodal(rng.uniform(0, 1, inner.size))
    H = n * k
    left = nodal[[inner.node(0, 0, iy) for iy in range(H + 1)]]
    right = nodal[[inner.node(0, n, iy) for iy in range(H + 1)]]
    assert np.allclose(left, right, atol=1e-14)
    top = nodal[[inner.node(0, ix, H) for ix in range(n + 1)]]
    bottom = nodal[[inner.node(0, ix, 0) for ix in range(n + 1)]]
    assert not np.allclose(top, bottom)


def test_slice_tile_order_top_first():
    n, k = 4, 3
    f = build_pde_filter("slices", n, 1.0, k)
    x = np.zeros(k * n * n)
    x[: n * n] = 1.0  # tile 0 solid
    inner_in = np.zeros(f.inner.size)
    inner_in[f.perm] = x
    grid = inner_in.reshape(n, n * k)  # (ix, global iy)
    assert grid[:, -n:].all() and not grid[:, :-n].any()


def test_pde_and_neighbourhood_agree_on_smooth_random_input(rng):
    n, rmin = 20, 4.0
    a = build_neighbourhood_filter(n, rmin)
    b = build_pde_filter("single", n, rmin)
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    x = np.zeros((n, n))
    for kx in range(3):
        for ky in range(3):
            ph = rng.uniform(0, 2 * np.pi)
            x += rng.standard_normal() * np.cos(2 * np.pi * (kx * i + ky * j) / n + ph)
    x = x.ravel()
    assert np.corrcoef(a.apply(x), b.apply(x))[0, 1] > 0.99
    # white noise at a small radius
    a2, b2 = build_neighbourhood_filter(n, 2.0), build_pde_filter("single", n, 2.0)
    w = rng.uniform(0, 1, n * n)
    assert np.corrcoef(a2.apply(w), b2.apply(w))[0, 1] > 0.99


def test_build_filter_dispatch():
    assert build_filter("single", 6, 1, "neighbourhood", 2.0).kind == "neighbourhood"
    assert build_filter("layers", 6, 2, "pde", 2.0).kind == "pde"
    with pytest.raises(ConfigError):
        build_filter("layers", 6, 2, "neighbourhood", 2.0)
    with pytest.raises(ConfigError):
        build_pde_filter("rings", 6, 2.0)


# -- chain rule -------------------------------------------------------------------


@pytest.mark.parametrize("name,make", FILTERS, ids=[f[0] for f in FILTERS])
def test_backprop_end_to_end_fd(name, make, rng):
    f = make()
    n = f.size
    prm = ProjectionParams(8.0, 0.45)
    c = rng.standard_normal(n)

    def obj(x):
        return c @ heaviside_project(f.apply(x), prm) ** 2

    x = rng.uniform(0.2, 0.8, n)
    xf = f.apply(x)
    d_dphys = 2 * c * heaviside_project(xf, prm)
    grad = backprop_sensitivities(d_dphys, f, xf, prm)
    h = 1e-6
    for i in rng.choice(n, 10, replace=False):
        e = np.zeros(n)
        e[i] = h
        fd = (obj(x + e) - obj(x - e)) / (2 * h)
        assert abs(grad[i] - fd) <= 1e-5 * max(abs(fd), 1e-8)


def test_saturated_projection_kills_sensitivity():
    f = build_neighbourhood_filter(5, 1.0)  # identity filter
    assert np.allclose(f.matrix(), np.eye(25))
    xf = np.r_[np.zeros(12), np.ones(13)]
    g = backprop_sensitivities(np.ones(25), f, xf, ProjectionParams(200.0, 0.5))
    assert np.abs(g).max() < 1e-30
