"""Oracle tests for the dense linear-algebra helpers.

matrix_exponential is checked against a plain Taylor series (a different
algorithm entirely) and against 2x2 cases with textbook closed forms;
propagate_affine against the scalar/diagonal affine-ODE solution written out
by hand.
"""

import math

import numpy as np
import pytest

from learning_control.linalg import matrix_exponential, phi1, propagate_affine


def taylor_expm(mat, terms=80):
    """Straightforward series oracle; fine for the norms used in these tests."""
    out = np.eye(mat.shape[0])
    term = np.eye(mat.shape[0])
    for k in range(1, terms):
        term = term @ mat / k
        out = out + term
    return out


class TestMatrixExponential:
    def test_zero_matrix(self):
        np.testing.assert_allclose(
            matrix_exponential(np.zeros((3, 3))), np.eye(3), rtol=1e-15, atol=1e-15
        )

    def test_empty_matrix(self):
        assert matrix_exponential(np.zeros((0, 0))).shape == (0, 0)

    def test_diagonal(self):
        d = np.diag([0.3, -1.2, 2.0])
        expected = np.diag(np.exp([0.3, -1.2, 2.0]))
        np.testing.assert_allclose(matrix_exponential(d), expected, rtol=1e-14, atol=1e-15)

    def test_rotation_generator(self):
        """exp of [[0,-t],[t,0]] is the rotation by angle t."""
        theta = 0.731
        gen = np.array([[0.0, -theta], [theta, 0.0]])
        expected = np.array(
            [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
        )
        np.testing.assert_allclose(matrix_exponential(gen), expected, rtol=1e-14, atol=1e-15)

    def test_matches_taylor_series_small_norm(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            mat = rng.standard_normal((4, 4)) * 0.6
            np.testing.assert_allclose(
                matrix_exponential(mat), taylor_expm(mat), rtol=1e-12, atol=1e-13
            )

    def test_scaling_and_squaring_branch(self):
        """A norm far past the Pade threshold still agrees with exp(A/2^k)^(2^k)."""
        rng = np.random.default_rng(1)
        mat = rng.standard_normal((3, 3)) * 8.0
        half = taylor_expm(mat / 16.0)
        oracle = half
        for _ in range(4):
            oracle = oracle @ oracle
        got = matrix_exponential(mat)
        np.testing.assert_allclose(got, oracle, rtol=1e-10, atol=1e-10)

    def test_commuting_product_identity(self):
        a = np.diag([0.5, -0.3]) + np.array([[0.0, 0.2], [0.2, 0.0]])
        np.testing.assert_allclose(
            matrix_exponential(2.0 * a),
            matrix_exponential(a) @ matrix_exponential(a),
            rtol=1e-12,
        )

    def test_rejects_nonsquare(self):
        with pytest.raises(ValueError, match="square"):
            matrix_exponential(np.zeros((2, 3)))

    def test_rejects_nonfinite(self):
        bad = np.array([[0.0, np.inf], [0.0, 0.0]])
        with pytest.raises(ValueError, match="non-finite"):
            matrix_exponential(bad)


class TestPropagateAffine:
    def test_scalar_case_against_hand_solution(self):
        """dx/ds = -r x + b  =>  x(t) = x0 e^{-rt} + (b/r)(1 - e^{-rt})."""
        r, b, t, x0 = 1.7, 0.4, 0.9, 2.0
        phi, off = propagate_affine(np.array([[r]]), np.array([b]), t)
        expected = x0 * math.exp(-r * t) + (b / r) * (1.0 - math.exp(-r * t))
        assert phi.shape == (1, 1) and off.shape == (1,)
        np.testing.assert_allclose(phi[0, 0] * x0 + off[0], expected, rtol=1e-13)

    def test_diagonal_case(self):
        rates = np.array([0.5, 2.0, 0.1])
        drive = np.array([1.0, -0.3, 0.7])
        t = 1.3
        phi, off = propagate_affine(np.diag(rates), drive, t)
        np.testing.assert_allclose(np.diag(phi), np.exp(-rates * t), rtol=1e-13)
        expected_off = drive / rates * (1.0 - np.exp(-rates * t))
        np.testing.assert_allclose(off, expected_off, rtol=1e-12)

    def test_singular_rate_is_pure_drift(self):
        """rate = 0 has no inverse; the augmented form must still be exact."""
        phi, off = propagate_affine(np.zeros((2, 2)), np.array([0.3, -1.1]), 2.5)
        np.testing.assert_allclose(phi, np.eye(2), rtol=0, atol=1e-15)
        np.testing.assert_allclose(off, np.array([0.75, -2.75]), rtol=1e-14)

    def test_semigroup_property(self):
        """Propagating 0.7 then 0.5 equals propagating 1.2 in one go."""
        rng = np.random.default_rng(3)
        rate = rng.standard_normal((3, 3))
        rate = rate @ rate.T + 0.1 * np.eye(3)  # positive definite, stable
        drive = rng.standard_normal(3)
        p1, o1 = propagate_affine(rate, drive, 0.7)
        p2, o2 = propagate_affine(rate, drive, 0.5)
        pf, of = propagate_affine(rate, drive, 1.2)
        np.testing.assert_allclose(p2 @ p1, pf, rtol=1e-12, atol=1e-13)
        np.testing.assert_allclose(p2 @ o1 + o2, of, rtol=1e-11, atol=1e-13)

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            propagate_affine(np.zeros((2, 2)), np.zeros(3), 1.0)


class TestPhi1:
    def test_at_zero(self):
        assert phi1(0.0) == 1.0

    def test_large_argument(self):
        np.testing.assert_allclose(phi1(1.0), math.e - 1.0, rtol=1e-15)
        np.testing.assert_allclose(phi1(-2.0), (math.exp(-2.0) - 1.0) / -2.0, rtol=1e-15)

    def test_series_branch_accuracy(self):
        # inside the series cutoff the polynomial is exact to machine precision
        for z in (1e-7, -3e-7, 9e-7):
            series = 1.0 + z / 2.0 + z * z / 6.0
            np.testing.assert_allclose(phi1(z), series, rtol=1e-14)

    def test_series_agrees_with_expm1_oracle_near_cutoff(self):
        """Just below the series cutoff the polynomial matches expm1 exactly,
        so there is no jump when the evaluation strategy switches."""
        for z in (0.99e-6, -0.99e-6, 1.01e-6, -1.01e-6):
            np.testing.assert_allclose(phi1(z), math.expm1(z) / z, rtol=1e-14)
