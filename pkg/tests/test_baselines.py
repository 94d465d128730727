import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import kron4, rank_one_kronecker, wls_intercept
from sepsurf.baselines import (
    bsa,
    bsa_step,
    bsa_step_spatial,
    load_covariance,
    presmooth_predict,
    raw_pairs,
    save_covariance,
    smooth4d_covariance,
)
from sepsurf.data import Grid2, MaskedGrid, center, grid_dataset
from sepsurf.errors import EmptySurface, ZeroDenominator
from sepsurf.separable import mean_from_samples
from sepsurf.simstudy import Scenario, sample_surfaces, scenario_covariance
from sepsurf.smoothing import smooth2d, ScatterCloud


def random_spd(rng, d):
    M = rng.normal(size=(d, d))
    return M @ M.T + 0.1 * np.eye(d)


def sparse_centered(grid, n, p, seed):
    cov = scenario_covariance(Scenario("brownian", grid))
    ds = sample_surfaces(cov, grid, n, p, seed=seed)
    samples = grid_dataset(ds, grid)
    return center(samples, mean_from_samples(samples, grid, 0.4))


def test_bsa_step_quadruple_loop():
    rng = np.random.default_rng(0)
    C = rng.normal(size=(3, 2, 3, 2))
    B = rng.normal(size=(2, 2))
    out = bsa_step(C, B)
    ref = np.zeros((3, 3))
    for i in range(3):
        for k in range(3):
            ref[i, k] = sum(B[j, l] * C[i, j, k, l] for j in range(2) for l in range(2))
    ref /= sum(B[j, l] ** 2 for j in range(2) for l in range(2))
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_bsa_step_fixed_point_and_average():
    rng = np.random.default_rng(1)
    A0, B0 = random_spd(rng, 4), random_spd(rng, 3)
    C = kron4(A0, B0)
    np.testing.assert_allclose(bsa_step(C, B0), A0, atol=1e-12)
    np.testing.assert_allclose(bsa_step_spatial(C, A0), B0, atol=1e-12)
    D = rng.normal(size=(4, 3, 4, 3))
    np.testing.assert_allclose(bsa_step(D, np.ones((3, 3))), D.mean(axis=(1, 3)), atol=1e-12)


@given(st.floats(0.01, 100.0) | st.floats(-100.0, -0.01), st.integers(0, 2**16))
@settings(max_examples=50, deadline=None)
def test_bsa_step_homogeneity(lam, seed):
    rng = np.random.default_rng(seed)
    C = rng.normal(size=(3, 4, 3, 4))
    B = rng.normal(size=(4, 4))
    np.testing.assert_allclose(bsa_step(C, lam * B), bsa_step(C, B) / lam, rtol=1e-12, atol=1e-12)


def test_bsa_step_zero_denominator():
    with pytest.raises(ZeroDenominator):
        bsa_step(np.ones((2, 2, 2, 2)), np.zeros((2, 2)))


def test_bsa_exact_on_separable():
    rng = np.random.default_rng(2)
    A0, B0 = random_spd(rng, 5), random_spd(rng, 4)
    C = kron4(A0, B0)
    res = bsa(C)
    assert res.converged and res.n_iter <= 2
    np.testing.assert_allclose(kron4(res.A, res.B), C, atol=1e-8 * np.abs(C).max())
    assert np.trace(res.A) == pytest.approx(1.0)


def test_bsa_dominant_term_matches_svd():
    rng = np.random.default_rng(3)
    d1, d2 = 4, 3
    Q1, _ = np.linalg.qr(rng.normal(size=(d1 * d1, 2)))
    Q2, _ = np.linalg.qr(rng.normal(size=(d2 * d2, 2)))
    # symmetric, Frobenius-orthogonal factor pairs
    A1, A2 = (0.5 * (q.reshape(d1, d1) + q.reshape(d1, d1).T) for q in Q1.T)
    B1, B2 = (0.5 * (q.reshape(d2, d2) + q.reshape(d2, d2).T) for q in Q2.T)
    C = 3.0 * kron4(A1, B1) + 1.0 * kron4(A2, B2)
    res = bsa(C, tol=1e-12, max_iter=500)
    Ao, Bo, sv = rank_one_kronecker(C)
    np.testing.assert_allclose(kron4(res.A, res.B), kron4(Ao, Bo), atol=1e-8)
    resid = np.linalg.norm(C - kron4(res.A, res.B))
    assert resid == pytest.approx(np.sqrt(np.sum(sv[1:] ** 2)), rel=1e-8)


def test_bsa_local_minimum():
    rng = np.random.default_rng(4)
    C = kron4(random_spd(rng, 4), random_spd(rng, 3)) + 0.3 * rng.normal(size=(4, 3, 4, 3))
    C = 0.5 * (C + C.transpose(2, 3, 0, 1))
    res = bsa(C, tol=1e-12, max_iter=1000)
    best = np.linalg.norm(C - kron4(res.A, res.B))
    for _ in range(100):
        Ap = res.A + 1e-3 * rng.normal(size=res.A.shape)
        Bp = res.B + 1e-3 * rng.normal(size=res.B.shape)
        assert best <= np.linalg.norm(C - kron4(Ap, Bp)) + 1e-12


def test_bsa_zero_tensor():
    with pytest.raises(ZeroDenominator):
        bsa(np.zeros((2, 3, 2, 3)))


def test_bsa_non_convergence_flag():
    rng = np.random.default_rng(5)
    C = rng.normal(size=(3, 3, 3, 3))
    C = C + C.transpose(2, 3, 0, 1)
    with pytest.warns(RuntimeWarning):
        res = bsa(C, tol=0.0, max_iter=3)
    assert not res.converged and res.n_iter == 3


def test_raw_pairs_excludes_diagonal():
    values = np.array([[[1.0, 2.0], [0.0, 3.0]]])
    mask = np.array([[[True, True], [False, True]]])
    pts = raw_pairs(MaskedGrid(values, mask), Grid2(2, 2))
    assert pts.shape == (6, 5)
    assert sorted(pts[:, 4]) == [2.0, 2.0, 3.0, 3.0, 6.0, 6.0]
    assert raw_pairs(MaskedGrid(values, mask), Grid2(2, 2), include_diagonal=True).shape == (9, 5)


def test_4d_constant_raw_covariances():
    grid = Grid2(4, 4)
    n = 6
    mask = np.random.default_rng(0).uniform(size=(n, 4, 4)) < 0.6
    values = np.where(mask, 1.0, 0.0)
    C = smooth4d_covariance(MaskedGrid(values, mask), grid, (0.5, 0.5, 0.5, 0.5))
    np.testing.assert_allclose(C, 1.0, atol=1e-10)


def test_4d_single_pair_window():
    grid = Grid2(4, 4)
    values = np.zeros((1, 4, 4))
    mask = np.zeros((1, 4, 4), bool)
    cells = [(0, 0), (0, 3), (3, 0), (3, 3)]
    for k, (i, j) in enumerate(cells):
        values[0, i, j] = k + 1.0
        mask[0, i, j] = True
    C = smooth4d_covariance(MaskedGrid(values, mask), grid, (0.2, 0.2, 0.2, 0.2))
    # only the pair (cell 0, cell 3) reaches the window at (0, 0, 3, 3)
    assert C[0, 0, 3, 3] == pytest.approx(1.0 * 4.0, abs=1e-12)


def test_4d_matches_wls_oracle():
    grid = Grid2(5, 5)
    centered = sparse_centered(grid, 20, 0.3, seed=6)
    h = (0.45, 0.45, 0.45, 0.45)
    C = smooth4d_covariance(centered, grid, h)
    pts = raw_pairs(centered, grid)
    coords = [pts[:, k] for k in range(4)]
    rng = np.random.default_rng(0)
    for _ in range(60):
        idx = rng.integers(0, 5, size=4)
        centers = (grid.t[idx[0]], grid.s[idx[1]], grid.t[idx[2]], grid.s[idx[3]])
        ref = wls_intercept(centers, coords, pts[:, 4], np.ones(len(pts)), h)
        assert C[tuple(idx)] == pytest.approx(ref, abs=1e-8)


def test_4d_symmetry():
    grid = Grid2(5, 5)
    C = smooth4d_covariance(sparse_centered(grid, 20, 0.3, seed=7), grid, (0.3,) * 4)
    np.testing.assert_allclose(C, C.transpose(2, 3, 0, 1), atol=1e-8)


def test_4d_vs_separable_on_dense_separable_truth():
    grid = Grid2(6, 6)
    A0 = scenario_covariance(Scenario("brownian", Grid2(6, 6)))[0]
    cov = (A0, A0)
    ds = sample_surfaces(cov, grid, 400, 1.0, noise_sigma2=0.0, seed=8)
    samples = grid_dataset(ds, grid)
    centered = center(samples, mean_from_samples(samples, grid, 0.4))
    h = 0.35
    C = smooth4d_covariance(centered, grid, (h,) * 4)
    Xc = centered.values
    emp = np.einsum("nij,nkl->ijkl", Xc, Xc) / Xc.shape[0]
    tt, uu = np.meshgrid(grid.t, grid.t, indexing="ij")

    def smooth_marg(M):
        return smooth2d(ScatterCloud(tt, uu, M), (h, h), grid.t, grid.t)

    ref = kron4(smooth_marg(emp.mean(axis=(1, 3))), smooth_marg(emp.mean(axis=(0, 2))))
    ref *= np.sum(emp) / np.sum(kron4(emp.mean(axis=(1, 3)), emp.mean(axis=(0, 2))))
    assert np.linalg.norm(C - ref) / np.linalg.norm(ref) < 0.05


def test_presmooth_single_observation():
    grid = Grid2(5, 5)
    out = presmooth_predict([0.3], [0.6], [2.5], grid, (0.1, 0.1))
    np.testing.assert_allclose(out, 2.5)


def test_presmooth_line_band():
    grid = Grid2(10, 10)
    s = np.linspace(0.02, 0.98, 25)
    t = np.full_like(s, 0.55)
    out = presmooth_predict(t, s, np.sin(3 * s), grid, (0.08, 0.08))
    assert np.all(np.isfinite(out))


def test_presmooth_dense_product_surface():
    grid = Grid2(20, 20)
    tt, ss = np.meshgrid(grid.t, grid.s, indexing="ij")
    out = presmooth_predict(tt.ravel(), ss.ravel(), (tt * ss).ravel(), grid, (2 / 20, 2 / 20))
    np.testing.assert_allclose(out[2:-2, 2:-2], (tt * ss)[2:-2, 2:-2], atol=1e-3)


def test_presmooth_empty():
    with pytest.raises(EmptySurface):
        presmooth_predict([], [], [], Grid2(3, 3), (0.1, 0.1))


def test_covariance_file_round_trip(tmp_path):
    C = np.random.default_rng(0).normal(size=(2, 3, 2, 3))
    save_covariance(C, tmp_path / "c.json")
    np.testing.assert_array_equal(load_covariance(tmp_path / "c.json"), C)
