"""Truncated SVD contract tests, checked against the Jacobi Gram oracle."""

import numpy as np
import pytest

from kvspill.errors import ParameterError
from kvspill.linalg import orthonormality_defect, reconstruction_residual, svd_top_r

from oracles import gram_residual, gram_top_r


def test_identity_top_2_spans_two_axes():
    v = svd_top_r(np.eye(3), 2)
    assert v.shape == (3, 2)
    assert orthonormality_defect(v) < 1e-6
    # all singular values are 1, so any 2-axis subspace is optimal and the
    # residual is exactly 1
    assert np.isclose(reconstruction_residual(np.eye(3), v), 1.0)


def test_rank_one_outer_product_recovers_direction():
    u = np.array([2.0, -1.0, 0.5, 3.0])
    vdir = np.array([1.0, 2.0, 2.0]) / 3.0
    m = np.outer(u, vdir)
    v = svd_top_r(m, 1)
    assert np.allclose(np.abs(v[:, 0]), np.abs(vdir), atol=1e-10)


def test_fixed_seed_residual_matches_gram_eigensolver_oracle():
    rng = np.random.default_rng(42)
    m = rng.standard_normal((6, 4))
    v = svd_top_r(m, 2)
    assert np.isclose(reconstruction_residual(m, v), gram_residual(m, 2), atol=1e-9)
    # the subspace itself must agree with the oracle's (projector comparison)
    oracle = gram_top_r(m, 2)
    assert np.allclose(v @ v.T, oracle @ oracle.T, atol=1e-8)


@pytest.mark.parametrize("r", [0, 5, -1])
def test_rank_out_of_range_rejected(r):
    with pytest.raises(ParameterError):
        svd_top_r(np.random.default_rng(0).standard_normal((4, 4)), r)


def test_non_finite_rejected():
    m = np.ones((3, 3))
    m[1, 1] = np.nan
    with pytest.raises(ParameterError):
        svd_top_r(m, 1)


def test_columns_orthonormal_within_tolerance():
    rng = np.random.default_rng(7)
    for trial in range(5):
        m = rng.standard_normal((12, 9)) * rng.uniform(0.1, 10)
        v = svd_top_r(m, 4)
        assert orthonormality_defect(v) < 1e-6


def test_residual_non_increasing_in_rank():
    rng = np.random.default_rng(11)
    m = rng.standard_normal((10, 7))
    residuals = [reconstruction_residual(m, svd_top_r(m, r)) for r in range(1, 8)]
    assert all(b <= a + 1e-12 for a, b in zip(residuals, residuals[1:]))
    assert residuals[-1] < 1e-9  # full rank reconstructs exactly
