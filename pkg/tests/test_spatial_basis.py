import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consign.errors import KTooLarge
from consign.spatial_basis import BasisCache, SpatialBasis, compute_basis, scale_box


def sort_interpolate_quantile(values, q):
    """Independent type-7 quantile: position 1 + q (n - 1) among the order statistics."""
    xs = sorted(values)
    h = q * (len(xs) - 1)
    lo = math.floor(h)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (h - lo) * (xs[hi] - xs[lo])


def test_quantile_oracle_reference_values():
    assert sort_interpolate_quantile([1, 2, 3, 4, 5], 0.1) == pytest.approx(1.4, abs=1e-12)
    assert sort_interpolate_quantile([1, 2, 3, 4, 5], 0.9) == pytest.approx(4.6, abs=1e-12)


def test_quantile_bounds_along_known_direction():
    # samples c_n * e_0 with c = 1..5: centred coefficients are c - 3
    samples = np.zeros((5, 6))
    samples[:, 0] = [3, 1, 5, 2, 4]
    b = compute_basis(samples, K=1, alpha=0.2)
    assert np.allclose(b.basis[0], np.eye(6)[0])
    assert b.coeff_lo[0] == pytest.approx(1.4 - 3, abs=1e-12)
    assert b.coeff_hi[0] == pytest.approx(4.6 - 3, abs=1e-12)


def test_identical_samples_degenerate():
    s = np.random.default_rng(0).random(12)
    b = compute_basis(np.stack([s, s]), K=2, alpha=0.1)
    assert b.degenerate
    assert np.array_equal(b.mu, s)
    assert np.all(b.sing_vals == 0)
    assert np.all(b.coeff_lo == 0) and np.all(b.coeff_hi == 0)
    assert np.allclose(b.basis @ b.basis.T, np.eye(2), atol=1e-12)


def test_antipodal_pair_matches_dense_svd():
    v = np.random.default_rng(1).normal(size=20)
    b = compute_basis(np.stack([v, -v]), K=1, alpha=0.1)
    assert np.allclose(b.mu, 0)
    # dense oracle on the explicit d x 2 matrix
    U, svals, _ = np.linalg.svd(np.stack([v, -v]).T, full_matrices=False)
    assert b.sing_vals[0] == pytest.approx(svals[0], abs=1e-10)
    assert b.sing_vals[0] == pytest.approx(np.linalg.norm(v) * math.sqrt(2), abs=1e-10)
    u = U[:, 0] * np.sign(U[np.argmax(np.abs(U[:, 0])), 0])
    assert np.allclose(b.basis[0], u, atol=1e-10)


def test_k_too_large():
    with pytest.raises(KTooLarge):
        compute_basis(np.random.default_rng(0).random((4, 10)), K=5, alpha=0.1)
    with pytest.raises(KTooLarge):
        compute_basis(np.random.default_rng(0).random((4, 3)), K=4, alpha=0.1)


def test_quantile_alpha_override():
    X = np.random.default_rng(2).normal(size=(30, 8))
    a = compute_basis(X, 2, alpha=0.1)
    b = compute_basis(X, 2, alpha=0.1, quantile_alpha=0.5)
    assert b.alpha_used == 0.5
    assert np.all(b.coeff_hi - b.coeff_lo < a.coeff_hi - a.coeff_lo)


matrices = st.tuples(st.integers(2, 16), st.integers(2, 64), st.integers(0, 2**31 - 1))


@settings(max_examples=60, deadline=None)
@given(matrices, st.floats(0.02, 0.5))
def test_basis_invariants(shape, alpha):
    N, D, seed = shape
    X = np.random.default_rng(seed).normal(size=(N, D))
    K = min(N, D)
    b = compute_basis(X, K, alpha)
    assert np.abs(b.basis @ b.basis.T - np.eye(K)).max() <= 1e-8
    assert np.all(np.diff(b.sing_vals) <= 1e-12)
    assert np.all(b.coeff_lo <= b.coeff_hi)
    peak = b.basis[np.arange(K), np.argmax(np.abs(b.basis), axis=1)]
    assert np.all(peak > 0)
    # Bessel: projected energy never exceeds the residual energy
    Z = X - b.mu
    proj = ((Z @ b.basis.T) ** 2).sum(axis=1)
    assert np.all(proj <= (Z**2).sum(axis=1) + 1e-9)
    # quantile bounds hold at least ceil((1 - alpha) N) - 2 coefficients
    coeffs = Z @ b.basis.T
    inside = ((coeffs >= b.coeff_lo - 1e-12) & (coeffs <= b.coeff_hi + 1e-12)).sum(axis=0)
    assert np.all(inside >= math.ceil((1 - alpha) * N) - 2)
    # quantiles agree with the independent oracle
    for k in range(K):
        assert b.coeff_lo[k] == pytest.approx(sort_interpolate_quantile(coeffs[:, k], alpha / 2), abs=1e-9)
        assert b.coeff_hi[k] == pytest.approx(sort_interpolate_quantile(coeffs[:, k], 1 - alpha / 2), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(matrices)
def test_full_rank_reconstruction(shape):
    N, D, seed = shape
    X = np.random.default_rng(seed).normal(size=(N, D))
    Z = (X - X.mean(axis=0)).T  # D x N, one sample per column
    rank = np.linalg.matrix_rank(Z)
    b = compute_basis(X, min(N, D), 0.1)
    U = b.basis[:rank].T
    Vt = (U.T @ Z) / b.sing_vals[:rank, None]
    recon = U @ np.diag(b.sing_vals[:rank]) @ Vt
    assert np.linalg.norm(Z - recon) / np.linalg.norm(Z) <= 1e-8


def test_scale_box_examples():
    b = SpatialBasis(np.zeros(2), np.eye(2)[:1], np.array([1.0]), np.array([-1.0]), np.array([1.0]), 0.1)
    box = scale_box(b, 0.0)
    assert box.lo.tolist() == [0.0] and box.hi.tolist() == [0.0]
    box = scale_box(b, 1.0)
    assert box.lo.tolist() == [-1.0] and box.hi.tolist() == [1.0]
    b3 = SpatialBasis(np.zeros(2), np.eye(2)[:1], np.array([3.0]), np.array([0.0]), np.array([2.0]), 0.1)
    box = scale_box(b3, 2.0)
    assert box.lo.tolist() == [-5.0] and box.hi.tolist() == [7.0]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 5), st.floats(0, 5))
def test_box_nesting_and_fixed_center(seed, l1, l2):
    rng = np.random.default_rng(seed)
    K = 3
    lo = rng.normal(size=K)
    b = SpatialBasis(np.zeros(4), np.eye(4)[:K], rng.random(K) * 5, lo, lo + rng.random(K), 0.1)
    small, big = scale_box(b, min(l1, l2)), scale_box(b, max(l1, l2))
    assert np.all(big.lo <= small.lo + 1e-12) and np.all(small.hi <= big.hi + 1e-12)
    assert np.allclose(small.center, 0.5 * (b.coeff_lo + b.coeff_hi))
    assert np.allclose(big.center, small.center)
    assert np.all(small.lo <= small.hi)


def test_basis_cache_round_trip(tmp_path):
    X = np.random.default_rng(4).normal(size=(10, 30))
    cache = BasisCache(tmp_path / "cache")
    b = cache.get_or_compute("img", X, 3, 0.1)
    again = BasisCache(tmp_path / "cache").get("img", 3, 0.1)
    for f in BasisCache.FIELDS:
        assert np.array_equal(getattr(b, f), getattr(again, f))
    assert cache.get("img", 2, 0.1) is None
