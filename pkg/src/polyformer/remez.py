"""Minimax polynomial fitting via the Remez exchange algorithm.

Fits run on the interval rescaled to [-1, 1] in the monomial basis (the
rescale keeps the alternation system conditioned), then coefficients are
composed with the affine rescale so the stored polynomial lives in
original units. Reference points start at Chebyshev nodes; the exchange
scans a dense grid for error extrema and refines each with golden-section
search.

Also built here: the composite fits that only the exchange core makes
possible, a reciprocal-square-root seed refined by Newton steps and the
odd sign-composition ReLU approximation assembled as x*(1+s)/2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConvergenceError, DomainError
from .polynomials import CompositePolynomial, CompositeStage, Polynomial

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class RemezResult:
    """A converged minimax fit with its equioscillation evidence."""

    poly: Polynomial
    minimax_error: float
    extrema: list[tuple[float, float]]  # (x, signed error) pairs
    iterations: int

    def check_equioscillation(self, rel_tol: float = 1e-6) -> bool:
        """True when extrema alternate in sign with equal magnitude.

        Needs at least degree+2 extrema; magnitudes must agree with the
        largest one within ``rel_tol`` relative (absolute floor 1e-14 for
        exactly-representable fits).
        """
        if len(self.extrema) < self.poly.degree + 2:
            return False
        errs = np.array([e for _, e in self.extrema])
        signs = np.sign(errs)
        if np.any(signs[1:] * signs[:-1] >= 0) and np.max(np.abs(errs)) > 1e-14:
            return False
        mags = np.abs(errs)
        top = mags.max()
        if top <= 1e-14:
            return True
        return bool(np.all(np.abs(mags - top) <= rel_tol * top + 1e-15))


def _chebyshev_nodes(n: int, lo: float, hi: float) -> np.ndarray:
    """n Chebyshev points on [lo, hi], ordered left to right."""
    j = np.arange(n)
    t = -np.cos(math.pi * j / (n - 1)) if n > 1 else np.zeros(1)
    return lo + (hi - lo) * (t + 1.0) / 2.0


def _golden_max(fn: Callable[[float], float], lo: float, hi: float, iters: int = 48) -> float:
    """Locate the maximizer of fn on [lo, hi] by golden-section search."""
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(iters):
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = fn(d)
    return (a + b) / 2.0


def _solve_alternation(V: np.ndarray, fs: np.ndarray, ws: np.ndarray) -> tuple[np.ndarray, float]:
    """Solve p(x_i) + (-1)^i * E * w(x_i) = f(x_i) for coeffs and E."""
    n = V.shape[0]
    A = np.concatenate([V, (((-1.0) ** np.arange(n)) * ws)[:, None]], axis=1)
    sol = np.linalg.solve(A, fs)
    return sol[:-1], float(sol[-1])


def _remez_core(
    f: Callable[[np.ndarray], np.ndarray],
    lo: float,
    hi: float,
    vander: Callable[[np.ndarray], np.ndarray],
    n_basis: int,
    tol: float,
    max_iterations: int = 80,
    grid_points: int = 10001,
    weight: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[np.ndarray, float, list[tuple[float, float]], int]:
    """Remez exchange on [lo, hi] for the basis whose columns vander builds.

    The alternation system is solved in whatever basis ``vander`` spans
    (Chebyshev for full fits, so the solve stays conditioned even at
    degree 31); callers convert the returned coefficients to monomial
    storage. ``weight`` rescales the error (|p-f|/weight is equalized);
    None means plain absolute error. Returns (coeffs, level, extrema,
    iterations) where extrema are (x, weighted signed error).
    """
    n_ref = n_basis + 1
    grid = np.linspace(lo, hi, grid_points)
    fg = np.asarray(f(grid), dtype=np.float64)
    if not np.all(np.isfinite(fg)):
        bad = float(grid[~np.isfinite(fg)][0])
        raise DomainError(bad, (lo, hi), site="remez target function")
    wg = np.ones_like(grid) if weight is None else np.asarray(weight(grid), dtype=np.float64)

    refs = _chebyshev_nodes(n_ref, lo, hi)
    coeffs = np.zeros(n_basis)
    level = 0.0
    best = (np.inf, coeffs, level, [])
    # Exactly-representable targets leave only rounding noise; treat any
    # residual below this floor as converged. The gap floor covers fits
    # whose true minimax level sits near rounding noise, where a purely
    # relative gap test could never be met.
    f_scale = max(1.0, float(np.max(np.abs(fg / wg))))
    abs_floor = 1e-14 * f_scale
    gap_floor = 5e-14 * f_scale

    for iteration in range(1, max_iterations + 1):
        fr = np.asarray(f(refs), dtype=np.float64)
        wr = np.ones_like(refs) if weight is None else np.asarray(weight(refs), dtype=np.float64)
        coeffs, level = _solve_alternation(vander(refs), fr, wr)

        def p(x):
            x = np.asarray(x, dtype=np.float64)
            return vander(x) @ coeffs

        err_grid = (p(grid) - fg) / wg
        max_err = float(np.max(np.abs(err_grid)))

        # Candidate extrema: strongest point of each constant-sign run
        # (exact zeros inherit the previous sign so they never split runs).
        signs = np.sign(err_grid)
        last = 0.0
        for i in range(grid_points):
            if signs[i] == 0.0:
                signs[i] = last
            else:
                last = signs[i]
        cands: list[int] = []
        start = 0
        for i in range(1, grid_points + 1):
            if i == grid_points or signs[i] != signs[start]:
                seg = slice(start, i)
                k = start + int(np.argmax(np.abs(err_grid[seg])))
                cands.append(k)
                start = i

        if max_err <= abs_floor:
            err_refs = (vander(refs) @ coeffs - fr) / wr
            extrema = [(float(x), float(e)) for x, e in zip(refs, err_refs)]
            return coeffs, max_err, extrema, iteration

        if len(cands) < n_ref:
            raise ConvergenceError(
                f"degenerate error curve: {len(cands)} extrema for reference of {n_ref}",
                max_err,
            )

        # Keep a window of n_ref consecutive candidates containing the
        # global max, maximizing the smallest retained magnitude.
        mags = np.abs(err_grid[cands])
        top = int(np.argmax(mags))
        w_lo = max(0, top - n_ref + 1)
        w_hi = min(top, len(cands) - n_ref)
        best_w, best_min = w_lo, -1.0
        for w0 in range(w_lo, w_hi + 1):
            wmin = float(mags[w0:w0 + n_ref].min())
            if wmin > best_min:
                best_min, best_w = wmin, w0
        chosen = cands[best_w:best_w + n_ref]

        # Golden-section refinement within each candidate's grid bracket.
        refined = []
        for k in chosen:
            xl = grid[max(0, k - 1)]
            xr = grid[min(grid_points - 1, k + 1)]
            s = signs[k] if signs[k] != 0 else 1.0

            def weighted(x, s=s):
                wx = 1.0 if weight is None else float(weight(np.asarray([x]))[0])
                return s * (float(p(np.asarray([x]))[0]) - float(f(np.asarray([x]))[0])) / wx

            refined.append(_golden_max(weighted, xl, xr))
        refs_new = np.array(sorted(refined))

        fr = np.asarray(f(refs_new), dtype=np.float64)
        wr = np.ones_like(refs_new) if weight is None else np.asarray(weight(refs_new), dtype=np.float64)
        err_ref = (vander(refs_new) @ coeffs - fr) / wr
        max_ref = float(np.max(np.abs(err_ref)))
        observed = max(max_err, max_ref)

        if observed < best[0]:
            extrema = [(float(x), float(e)) for x, e in zip(refs_new, err_ref)]
            best = (observed, coeffs.copy(), level, extrema)

        if observed - abs(level) <= tol * max(abs(level), 1e-15) + gap_floor or observed <= abs_floor:
            extrema = [(float(x), float(e)) for x, e in zip(refs_new, err_ref)]
            return coeffs, observed, extrema, iteration
        refs = refs_new

    raise ConvergenceError(
        f"Remez exchange did not converge within {max_iterations} iterations", best[0]
    )


def _rescale_to_unit(domain: tuple[float, float]) -> tuple[float, float]:
    """Affine map x -> t with t = t1*x + t0 sending [a,b] to [-1,1]."""
    a, b = domain
    t1 = 2.0 / (b - a)
    t0 = -(a + b) / (b - a)
    return t0, t1


def _compose_affine(coeffs_t: np.ndarray, t0: float, t1: float) -> list[float]:
    """Coefficients of p(t0 + t1*x) given p's monomial coefficients in t."""
    sub = np.polynomial.Polynomial([t0, t1])
    composed = np.polynomial.Polynomial(np.asarray(coeffs_t))(sub)
    return [float(c) for c in composed.coef]


def _cheb_vander(degree: int) -> Callable[[np.ndarray], np.ndarray]:
    def vander(x: np.ndarray) -> np.ndarray:
        return np.polynomial.chebyshev.chebvander(np.asarray(x, dtype=np.float64), degree)

    return vander


def remez_fit(f: Callable, domain: tuple[float, float], degree: int,
              tol: float = 1e-8, max_iterations: int = 80,
              grid_points: int = 10001) -> RemezResult:
    """Best uniform (minimax) polynomial approximation of f on a domain.

    Raises ConvergenceError (carrying the last residual) if the exchange
    stalls, and DomainError if f produces non-finite values on the domain.
    """
    if degree < 0:
        raise ValueError("degree must be >= 0")
    a, b = float(domain[0]), float(domain[1])
    if not a < b:
        raise ValueError(f"invalid domain [{a}, {b}]")

    def g(t):
        t = np.asarray(t, dtype=np.float64)
        return np.asarray(f(a + (b - a) * (t + 1.0) / 2.0), dtype=np.float64)

    coeffs_c, level, extrema_t, iters = _remez_core(
        g, -1.0, 1.0, _cheb_vander(degree), degree + 1, tol,
        max_iterations=max_iterations, grid_points=grid_points,
    )
    t0, t1 = _rescale_to_unit((a, b))
    coeffs_x = _compose_affine(np.polynomial.chebyshev.cheb2poly(coeffs_c), t0, t1)
    extrema = [(a + (b - a) * (tx + 1.0) / 2.0, e) for tx, e in extrema_t]
    return RemezResult(
        poly=Polynomial(coeffs=coeffs_x, domain=(a, b)),
        minimax_error=level,
        extrema=extrema,
        iterations=iters,
    )


def fit_inverse_sqrt(domain: tuple[float, float], seed_degree: int = 7,
                     newton_steps: int = 2, tol: float = 1e-9) -> CompositePolynomial:
    """Composite approximation of 1/sqrt(x) on a strictly positive domain.

    A relative-error minimax seed is refined by Newton steps
    y <- y*(3 - x*y^2)/2; each step roughly squares the relative error.
    """
    a, b = float(domain[0]), float(domain[1])
    if a <= 0:
        raise DomainError(a, (0.0, math.inf), site="fit_inverse_sqrt lower bound")
    if not a < b:
        raise ValueError(f"invalid domain [{a}, {b}]")
    if newton_steps < 0:
        raise ValueError("newton_steps must be >= 0")

    def g(t):
        t = np.asarray(t, dtype=np.float64)
        x = a + (b - a) * (t + 1.0) / 2.0
        return 1.0 / np.sqrt(x)

    coeffs_c, _, _, _ = _remez_core(
        g, -1.0, 1.0, _cheb_vander(seed_degree), seed_degree + 1, tol, weight=g,
    )
    t0, t1 = _rescale_to_unit((a, b))
    seed = Polynomial(
        coeffs=_compose_affine(np.polynomial.chebyshev.cheb2poly(coeffs_c), t0, t1),
        domain=(a, b),
    )
    stages = [CompositeStage(kind="poly", poly=seed)]
    stages.extend(CompositeStage(kind="newton_inv_sqrt") for _ in range(newton_steps))
    return CompositePolynomial(stages=stages, domain=(a, b))


def _fit_odd_sign_stage(lo: float, hi: float, degree: int,
                        tol: float = 1e-8) -> tuple[Polynomial, float]:
    """Odd minimax approximation of the constant 1 on [lo, hi].

    Mirrored through the origin this approximates sign(x) on
    [-hi, -lo] u [lo, hi]. Returns the polynomial (domain [-hi, hi]) and
    its uniform error on the positive band.

    Odd polynomials are parameterized as x * q(x^2) with q expressed in
    Chebyshev form over [lo^2, hi^2]; that keeps the alternation solve
    conditioned even on the narrow bands the later stages see.
    """
    if degree % 2 == 0:
        raise ValueError(f"sign stages need odd degrees, got {degree}")
    q_degree = (degree - 1) // 2
    s0, s1 = _rescale_to_unit((lo * lo, hi * hi))

    def one(x):
        return np.ones_like(np.asarray(x, dtype=np.float64))

    def vander(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        s = s0 + s1 * x * x
        return x[:, None] * np.polynomial.chebyshev.chebvander(s, q_degree)

    coeffs, level, _, _ = _remez_core(one, lo, hi, vander, q_degree + 1, tol)
    # q in the squared variable v = x^2: Chebyshev over s -> monomial in v.
    q_v = np.polynomial.Polynomial(np.polynomial.chebyshev.cheb2poly(coeffs))(
        np.polynomial.Polynomial([s0, s1])
    ).coef
    full = [0.0] * (degree + 1)
    for k, c in enumerate(q_v):
        full[2 * k + 1] = float(c)
    return Polynomial(coeffs=full, domain=(-hi, hi)), abs(level)


def compose_relu_approx(sign_degrees: Sequence[int], domain: tuple[float, float],
                        delta: float = 0.02, tol: float = 1e-8) -> CompositePolynomial:
    """ReLU approximation from composed odd sign polynomials.

    The input is pre-scaled by 1/B (folded into the first stage), the
    composed stages drive values in [delta, 1] towards 1 (and by oddness
    [-1, -delta] towards -1), and the final stage assembles
    ReLU(x) ~ x*(1 + s(x/B))/2. Exactly 0 at x = 0 by oddness.
    """
    lo_d, hi_d = float(domain[0]), float(domain[1])
    if not (lo_d == -hi_d and hi_d > 0):
        raise ValueError(f"domain must be symmetric [-B, B], got [{lo_d}, {hi_d}]")
    if not sign_degrees:
        raise ValueError("need at least one sign stage")
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    bound = hi_d

    stages: list[CompositeStage] = []
    band_lo, band_hi = delta, 1.0
    for i, degree in enumerate(sign_degrees):
        poly, err = _fit_odd_sign_stage(band_lo, band_hi, int(degree), tol)
        if i == 0:
            # Fold the 1/B pre-scale into the first stage's coefficients.
            scaled = [c / bound ** k for k, c in enumerate(poly.coeffs)]
            poly = Polynomial(coeffs=scaled, domain=(-bound, bound))
        stages.append(CompositeStage(kind="poly", poly=poly))
        band_lo, band_hi = max(1.0 - err, 1e-12), 1.0 + err
    stages.append(CompositeStage(kind="relu_assembly"))
    return CompositePolynomial(stages=stages, domain=(-bound, bound))
