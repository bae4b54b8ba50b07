"""Minimax fitting: exchange correctness against independent oracles."""

import math

import numpy as np
import pytest
from scipy import optimize, special

from polyformer import remez
from polyformer.errors import ConvergenceError, DomainError
from polyformer.polynomials import CompositePolynomial, approx_error


def gelu(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + special.erf(x / math.sqrt(2.0)))


def lp_grid_minimax(f, domain, degree, grid_points=2001):
    """Independent dense-grid minimax oracle via linear programming.

    Minimizes t subject to |p(x_i) - f(x_i)| <= t over the grid, with p
    in the Chebyshev basis. Returns the optimal t.
    """
    xs = np.linspace(domain[0], domain[1], grid_points)
    t = (2.0 * xs - (domain[0] + domain[1])) / (domain[1] - domain[0])
    V = np.polynomial.chebyshev.chebvander(t, degree)
    fx = np.asarray(f(xs), dtype=np.float64)
    n = degree + 1
    # variables: [c_0..c_degree, t]; A_ub @ v <= b_ub
    ones = np.ones((grid_points, 1))
    A = np.block([[V, -ones], [-V, -ones]])
    b = np.concatenate([fx, -fx])
    c = np.zeros(n + 1)
    c[-1] = 1.0
    res = optimize.linprog(c, A_ub=A, b_ub=b, bounds=[(None, None)] * (n + 1), method="highs")
    assert res.status == 0, res.message
    return float(res.x[-1])


class TestRemezFit:
    def test_exact_linear(self):
        r = remez.remez_fit(lambda x: np.asarray(x, float), (-3, 5), 1)
        np.testing.assert_allclose(r.poly.coeffs, [0.0, 1.0], atol=1e-12)
        assert r.minimax_error < 1e-13
        assert r.check_equioscillation()

    def test_abs_degree_two_recovers_one_eighth(self):
        r = remez.remez_fit(np.abs, (-1, 1), 2)
        assert r.minimax_error == pytest.approx(0.125, abs=1e-6)
        np.testing.assert_allclose(r.poly.coeffs, [0.125, 0.0, 1.0], atol=1e-6)
        oracle = lp_grid_minimax(np.abs, (-1, 1), 2, grid_points=10001)
        assert r.minimax_error <= (1.0 + 1e-3) * oracle
        assert r.minimax_error == pytest.approx(oracle, abs=1e-4)

    def test_matches_lp_oracle_on_smooth_functions(self):
        for f, domain, degree in [
            (np.exp, (-1.0, 1.0), 5),
            (np.sin, (0.0, 3.0), 7),
            (gelu, (-6.0, 6.0), 9),
        ]:
            r = remez.remez_fit(f, domain, degree)
            oracle = lp_grid_minimax(f, domain, degree)
            assert r.minimax_error <= (1.0 + 1e-3) * oracle
            assert r.check_equioscillation()

    def test_gelu_equioscillation_and_golden_error(self):
        r = remez.remez_fit(gelu, (-20, 20), 15)
        assert r.check_equioscillation()
        assert len(r.extrema) >= 17
        # golden from first verified run against the grid oracle
        assert r.minimax_error == pytest.approx(1.780617e-01, rel=1e-4)

    def test_monotone_improvement_with_degree(self):
        errs = [remez.remez_fit(gelu, (-8, 8), d).minimax_error for d in (3, 5, 7, 9, 11)]
        assert all(e2 <= e1 * (1 + 1e-9) for e1, e2 in zip(errs, errs[1:]))

    def test_nan_target_rejected(self):
        with np.errstate(invalid="ignore"), pytest.raises(DomainError):
            remez.remez_fit(lambda x: np.sqrt(np.asarray(x, float)), (-1.0, 1.0), 3)

    def test_non_convergence_carries_residual(self):
        with pytest.raises(ConvergenceError) as exc:
            remez.remez_fit(np.abs, (-1, 1), 10, tol=1e-16, max_iterations=2)
        assert exc.value.residual > 0

    def test_approx_error_consistent_with_minimax(self):
        r = remez.remez_fit(gelu, (-20, 20), 15)
        rep = approx_error(r.poly, gelu, (-20, 20), 10001)
        assert rep["linf"] == pytest.approx(r.minimax_error, rel=1e-3)
        assert rep["l1"] <= rep["linf"]


class TestInverseSqrt:
    def test_rejects_nonpositive_domain(self):
        with pytest.raises(DomainError):
            remez.fit_inverse_sqrt((0.0, 10.0), 7, 2)

    def test_golden_seed7_steps2(self):
        comp = remez.fit_inverse_sqrt((1, 300), 7, 2)
        xs = np.linspace(1, 300, 10001)
        rel = np.max(np.abs((comp(xs) - 1 / np.sqrt(xs)) * np.sqrt(xs)))
        # golden from first verified run against the direct oracle
        assert rel == pytest.approx(2.2186e-02, rel=1e-3)

    def test_monotone_improvement_with_steps(self):
        comp = remez.fit_inverse_sqrt((1, 300), 15, 4)
        xs = np.linspace(1, 300, 10001)
        truth = 1 / np.sqrt(xs)
        errs = []
        for steps in range(5):
            sub = CompositePolynomial(stages=comp.stages[: 1 + steps], domain=comp.domain)
            errs.append(np.max(np.abs((sub(xs) - truth) / truth)))
        floor_hit = False
        for e1, e2 in zip(errs, errs[1:]):
            if e1 < 1e-13:
                floor_hit = True
            if not floor_hit:
                assert e2 < e1

    def test_pointwise_signed_contraction(self):
        # One Newton step maps signed relative error e to -(3/2)e^2 - e^3/2,
        # so e_next <= (3/2) e^2 holds pointwise (exactly, up to rounding).
        comp = remez.fit_inverse_sqrt((1, 300), 7, 3)
        xs = np.linspace(1, 300, 10001)
        truth = 1 / np.sqrt(xs)
        for steps in range(3):
            cur = CompositePolynomial(stages=comp.stages[: 1 + steps], domain=comp.domain)
            nxt = CompositePolynomial(stages=comp.stages[: 2 + steps], domain=comp.domain)
            e_k = (cur(xs) - truth) / truth
            e_n = (nxt(xs) - truth) / truth
            assert np.max(e_n - 1.5 * e_k ** 2) <= 1e-12


class TestReluComposition:
    def test_zero_at_origin_exactly(self):
        comp = remez.compose_relu_approx([7, 7, 7], (-20, 20))
        assert comp(0.0) == 0.0

    def test_near_identity_at_bound(self):
        comp = remez.compose_relu_approx([7, 7, 7], (-20, 20))
        assert comp(20.0) == pytest.approx(20.0, abs=0.5)

    def test_golden_linf_outside_exclusion(self):
        comp = remez.compose_relu_approx([7, 7, 7], (-20, 20))
        xs = np.linspace(-20, 20, 40001)
        mask = np.abs(xs) >= 0.05
        err = np.max(np.abs(comp(xs) - np.maximum(xs, 0.0))[mask])
        # golden from first verified run against the direct oracle
        assert err == pytest.approx(4.272e-02, rel=1e-2)

    def test_assembly_identity(self):
        comp = remez.compose_relu_approx([7, 7], (-5, 5))
        xs = np.linspace(-5, 5, 501)
        np.testing.assert_allclose(comp(xs) - comp(-xs), xs, atol=1e-12)

    def test_even_degree_rejected(self):
        with pytest.raises(ValueError):
            remez.compose_relu_approx([6], (-1, 1))

    def test_asymmetric_domain_rejected(self):
        with pytest.raises(ValueError):
            remez.compose_relu_approx([7], (-1, 2))

    def test_deeper_composition_is_sharper(self):
        xs = np.linspace(-10, 10, 10001)
        mask = np.abs(xs) >= 0.5
        relu = np.maximum(xs, 0.0)
        e2 = np.max(np.abs(remez.compose_relu_approx([7, 7], (-10, 10))(xs) - relu)[mask])
        e3 = np.max(np.abs(remez.compose_relu_approx([7, 7, 7], (-10, 10))(xs) - relu)[mask])
        assert e3 < e2
