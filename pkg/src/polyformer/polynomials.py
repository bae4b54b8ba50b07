"""Polynomial and composite-polynomial values with validity domains.

A ``Polynomial`` is a monomial-basis coefficient list over a closed
interval. A ``CompositePolynomial`` chains stages so the whole object
still evaluates with additions and multiplications only: plain polynomial
stages, reciprocal-square-root Newton refinement steps, and the final
ReLU assembly x*(1+s)/2 that combines the running sign estimate with the
original input.

Plaintext evaluation (``__call__``) uses Horner's scheme. Tensor
evaluation (``eval_tensor``) builds a shallow power tree instead, so the
traced computation graph has multiplicative depth ~log2(degree) rather
than degree.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .errors import DomainError


@dataclass
class Polynomial:
    """Monomial-basis polynomial valid on a closed interval."""

    coeffs: list[float]
    domain: tuple[float, float]

    def __post_init__(self):
        self.coeffs = [float(c) for c in self.coeffs]
        if not self.coeffs:
            raise ValueError("polynomial needs at least one coefficient")
        a, b = float(self.domain[0]), float(self.domain[1])
        if not a < b:
            raise ValueError(f"invalid domain [{a}, {b}]")
        self.domain = (a, b)
        if not (math.isfinite(self(a)) and math.isfinite(self(b))):
            raise ValueError("polynomial not finite at domain endpoints")

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def __call__(self, x):
        """Horner evaluation on a scalar or ndarray (no domain check)."""
        x = np.asarray(x, dtype=np.float64)
        acc = np.full_like(x, self.coeffs[-1])
        for c in reversed(self.coeffs[:-1]):
            acc = acc * x + c
        return acc if acc.ndim else float(acc)

    def _check_domain(self, x: T.Tensor, domain_mode: str, site: str | None,
                      oob_counter: dict | None) -> T.Tensor:
        a, b = self.domain
        below = x.data < a
        above = x.data > b
        n_oob = int(below.sum() + above.sum())
        if n_oob:
            if domain_mode == "strict":
                bad = float(x.data[below | above].flat[0])
                raise DomainError(bad, self.domain, site=site)
            if oob_counter is not None:
                oob_counter[site or "<anon>"] = oob_counter.get(site or "<anon>", 0) + n_oob
            return T.clamp(x, a, b)
        return x

    def eval_tensor(self, x: T.Tensor, domain_mode: str = "strict",
                    site: str | None = None, oob_counter: dict | None = None) -> T.Tensor:
        """Differentiable evaluation via a balanced power tree."""
        x = self._check_domain(T.tensor(x), domain_mode, site, oob_counter)
        return _poly_power_tree(x, self.coeffs, self.domain)

    def to_json(self) -> dict:
        return {"basis": "monomial", "coeffs": list(self.coeffs), "domain": list(self.domain)}

    @classmethod
    def from_json(cls, obj: dict) -> "Polynomial":
        if obj.get("basis", "monomial") != "monomial":
            raise ValueError(f"unsupported basis {obj.get('basis')!r}")
        return cls(coeffs=list(obj["coeffs"]), domain=tuple(obj["domain"]))


def _poly_power_tree(x: T.Tensor, coeffs: list[float],
                     domain: tuple[float, float] | None = None) -> T.Tensor:
    """Evaluate sum(c_k * x^k) with powers built by balanced splitting.

    When a domain is given, evaluation runs in the rescaled variable
    u = x / max|domain| with coefficients folded accordingly, so all
    intermediate powers stay O(1) and per-op noise is not amplified by
    steep coefficient magnitudes (domains far from unit scale would
    otherwise make high powers vanish against injected noise).

    Depth of x^k is ceil(log2 k); the per-term constant scales add one
    more level, matching the depth accounting for encrypted evaluation.
    """
    degree = len(coeffs) - 1
    if domain is not None:
        s = max(abs(domain[0]), abs(domain[1]))
        if s > 0.0 and s != 1.0:
            coeffs = [c * s ** k for k, c in enumerate(coeffs)]
            x = T.scale(x, 1.0 / s)
    if degree == 0:
        return T.add(T.scale(x, 0.0), T.tensor(np.full(x.shape, coeffs[0])))
    powers: dict[int, T.Tensor] = {1: x}

    def build(k: int) -> T.Tensor:
        got = powers.get(k)
        if got is None:
            half = k // 2
            got = T.mul(build(k - half), build(half))
            powers[k] = got
        return got

    acc: T.Tensor | None = None
    for k in range(degree, 0, -1):
        c = coeffs[k]
        if c == 0.0:
            continue
        term = T.scale(build(k), c)
        acc = term if acc is None else T.add(acc, term)
    if acc is None:
        acc = T.scale(x, 0.0)
    if coeffs[0] != 0.0:
        acc = T.add(acc, T.tensor(np.full(x.shape, coeffs[0])))
    return acc


@dataclass
class CompositeStage:
    """One stage of a composite evaluation.

    kind "poly": apply ``poly`` to the running value (to the original
    input for the first stage). kind "newton_inv_sqrt": one refinement
    y <- y*(3 - x*y^2)/2 against the original input x. kind
    "relu_assembly": x*(1+s)/2 with s the running sign estimate.
    """

    kind: str
    poly: Polynomial | None = None

    def to_json(self) -> dict:
        obj = {"kind": self.kind}
        if self.poly is not None:
            obj["poly"] = self.poly.to_json()
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "CompositeStage":
        poly = Polynomial.from_json(obj["poly"]) if "poly" in obj else None
        return cls(kind=obj["kind"], poly=poly)


@dataclass
class CompositePolynomial:
    """Chain of polynomial stages valid on an interval of original inputs."""

    stages: list[CompositeStage]
    domain: tuple[float, float]

    def __post_init__(self):
        a, b = float(self.domain[0]), float(self.domain[1])
        if not a < b:
            raise ValueError(f"invalid domain [{a}, {b}]")
        self.domain = (a, b)
        for st in self.stages:
            if st.kind not in ("poly", "newton_inv_sqrt", "relu_assembly"):
                raise ValueError(f"unknown stage kind {st.kind!r}")
            if st.kind == "poly" and st.poly is None:
                raise ValueError("poly stage missing polynomial")

    @property
    def degree(self) -> int:
        """Degree of the fully expanded polynomial."""
        deg = 0
        for st in self.stages:
            if st.kind == "poly":
                deg = st.poly.degree * max(deg, 1)
            elif st.kind == "newton_inv_sqrt":
                deg = 3 * deg + 1
            elif st.kind == "relu_assembly":
                deg = deg + 1
        return deg

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        y = None
        for st in self.stages:
            if st.kind == "poly":
                y = st.poly(x if y is None else y)
            elif st.kind == "newton_inv_sqrt":
                y = y * (3.0 - x * y * y) * 0.5
            elif st.kind == "relu_assembly":
                y = x * (1.0 + y) * 0.5
        return y if np.asarray(y).ndim else float(y)

    def eval_tensor(self, x: T.Tensor, domain_mode: str = "strict",
                    site: str | None = None, oob_counter: dict | None = None) -> T.Tensor:
        x = T.tensor(x)
        a, b = self.domain
        below, above = x.data < a, x.data > b
        n_oob = int(below.sum() + above.sum())
        if n_oob:
            if domain_mode == "strict":
                raise DomainError(float(x.data[below | above].flat[0]), self.domain, site=site)
            if oob_counter is not None:
                oob_counter[site or "<anon>"] = oob_counter.get(site or "<anon>", 0) + n_oob
            x = T.clamp(x, a, b)
        y: T.Tensor | None = None
        for st in self.stages:
            if st.kind == "poly":
                y = _poly_power_tree(x if y is None else y, st.poly.coeffs, st.poly.domain)
            elif st.kind == "newton_inv_sqrt":
                y_sq = T.mul(y, y)
                prod = T.mul(x, y_sq)
                bracket = T.sub(T.tensor(np.full(prod.shape, 3.0)), prod)
                y = T.scale(T.mul(y, bracket), 0.5)
            elif st.kind == "relu_assembly":
                lifted = T.add(y, T.tensor(np.full(y.shape, 1.0)))
                y = T.scale(T.mul(x, lifted), 0.5)
        return y

    def to_json(self) -> dict:
        return {
            "kind": "composite",
            "domain": list(self.domain),
            "stages": [st.to_json() for st in self.stages],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CompositePolynomial":
        return cls(
            stages=[CompositeStage.from_json(s) for s in obj["stages"]],
            domain=tuple(obj["domain"]),
        )


def poly_from_json(obj: dict | str):
    """Load a Polynomial or CompositePolynomial from its JSON form."""
    if isinstance(obj, str):
        obj = json.loads(obj)
    if obj.get("kind") == "composite":
        return CompositePolynomial.from_json(obj)
    return Polynomial.from_json(obj)


def eval_poly(p, x):
    """Plaintext evaluation of a (composite) polynomial.

    Scalars and ndarrays use Horner / the stage recurrences; Tensors go
    through the differentiable power-tree path.
    """
    if isinstance(x, T.Tensor):
        return p.eval_tensor(x)
    return p(x)


def approx_error(p, f: Callable, domain: tuple[float, float],
                 grid_points: int = 10001) -> dict:
    """Uniform-grid approximation error report.

    Returns mean absolute error (l1), max absolute error (linf), and the
    per-point error curve for plot export.
    """
    if grid_points < 2:
        raise ValueError("grid_points must be >= 2")
    xs = np.linspace(domain[0], domain[1], grid_points)
    pv = np.asarray(p(xs), dtype=np.float64)
    fv = np.asarray(f(xs), dtype=np.float64)
    err = np.abs(pv - fv)
    return {
        "l1": float(err.mean()),
        "linf": float(err.max()),
        "curve": list(zip(xs.tolist(), (pv - fv).tolist())),
    }


def write_error_curve(path, curve: Iterable[tuple[float, float]]) -> None:
    """Export an error curve as CSV rows (x, error)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "error"])
        for x, e in curve:
            writer.writerow([repr(x), repr(e)])
