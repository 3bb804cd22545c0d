"""Closed-form value functionals used as oracles and certifier candidates.

Trigonometric profiles carry exact derivatives of every order, so operator
limits and derivative identities can be checked against analytic targets
instead of against second discretizations of the same scheme.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import HamiltonianSpec
from .torus import (
    Grid,
    GridMeasure,
    divergence_values,
    gradient_values,
    laplacian_values,
    pairing_values,
)

__all__ = [
    "TrigProfile",
    "SyntheticValue",
    "StationaryManufactured",
    "AntiMonotoneCandidate",
    "translation_matrix",
]


@dataclass(frozen=True, eq=False)
class TrigProfile:
    """const + Σ a_k cos(2πk x) + Σ b_k sin(2πk x) on a 1-d grid.

    ``deriv(order)`` returns the exact analytic derivative sampled on the
    grid (not a finite difference).
    """

    grid: Grid
    const: float = 0.0
    cos: tuple = ()  # ((k, coeff), ...)
    sin: tuple = ()

    def __post_init__(self):
        if self.grid.d != 1:
            raise ValueError("trig profiles are one-dimensional")
        object.__setattr__(self, "cos", tuple((int(k), float(c)) for k, c in self.cos))
        object.__setattr__(self, "sin", tuple((int(k), float(c)) for k, c in self.sin))

    def at(self, x: np.ndarray, order: int = 0) -> np.ndarray:
        """Evaluate the order-th analytic derivative at arbitrary points."""
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape, self.const if order == 0 else 0.0)
        for k, c in self.cos:
            w = 2 * np.pi * k
            base = [np.cos, lambda s: -np.sin(s), lambda s: -np.cos(s), np.sin][order % 4]
            out += c * w**order * base(w * x)
        for k, c in self.sin:
            w = 2 * np.pi * k
            base = [np.sin, np.cos, lambda s: -np.sin(s), lambda s: -np.cos(s)][order % 4]
            out += c * w**order * base(w * x)
        return out

    def deriv(self, order: int = 0) -> np.ndarray:
        return self.at(self.grid.positions(), order)

    @property
    def values(self) -> np.ndarray:
        return self.deriv(0)


def translation_matrix(grid: Grid, profile: np.ndarray) -> np.ndarray:
    """Matrix M[x, y] = profile(x - y) from circular shifts of a grid function."""
    npts = grid.npoints
    out = np.empty((npts, npts))
    shaped = grid.reshape(profile)
    if grid.d == 1:
        for y in range(npts):
            out[:, y] = np.roll(shaped, y)
    else:
        n = grid.n
        for y in range(npts):
            iy, jy = divmod(y, n)
            out[:, y] = np.roll(np.roll(shaped, iy, axis=0), jy, axis=1).ravel()
    return out


def _density(m) -> np.ndarray:
    return m.density if isinstance(m, GridMeasure) else np.asarray(m, dtype=float)


@dataclass(frozen=True, eq=False)
class SyntheticValue:
    """U(x, m) = c(x) + g(x)·⟨p, m⟩ + quad_weight·⟨q, m⟩² with exact derivatives.

    Implements the evaluator interface (``grid``, ``evaluate(t, m)``); the
    value is time-independent.
    """

    grid: Grid
    c: TrigProfile | None = None
    g: TrigProfile | None = None
    p: TrigProfile | None = None
    q: TrigProfile | None = None
    quad_weight: float = 1.0

    def __post_init__(self):
        if (self.g is None) != (self.p is None):
            raise ValueError("the linear term needs both g(x) and p(y)")

    def evaluate(self, t: float, m) -> np.ndarray:
        density = _density(m)
        out = np.zeros(self.grid.npoints)
        if self.c is not None:
            out = out + self.c.values
        if self.g is not None:
            out = out + self.g.values * pairing_values(self.grid, self.p.values, density)
        if self.q is not None:
            avg = pairing_values(self.grid, self.q.values, density)
            out = out + self.quad_weight * avg**2
        return out

    def flat_kernel(self, m, normalized: bool = True) -> np.ndarray:
        """Exact measure derivative D[x, y]; recentered against m by default."""
        density = _density(m)
        npts = self.grid.npoints
        kernel = np.zeros((npts, npts))
        if self.g is not None:
            kernel += np.outer(self.g.values, self.p.values)
        if self.q is not None:
            avg = pairing_values(self.grid, self.q.values, density)
            kernel += 2 * self.quad_weight * avg * self.q.values[None, :]
        if normalized:
            kernel = kernel - (
                self.grid.cell_volume * kernel @ density
            )[:, None]
        return kernel

    def flat_kernel_dy(self, m, order: int) -> np.ndarray:
        """Exact y-derivatives of the (unnormalized) measure derivative."""
        density = _density(m)
        npts = self.grid.npoints
        kernel = np.zeros((npts, npts))
        if self.g is not None:
            kernel += np.outer(self.g.values, self.p.deriv(order))
        if self.q is not None:
            avg = pairing_values(self.grid, self.q.values, density)
            kernel += 2 * self.quad_weight * avg * self.q.deriv(order)[None, :]
        return kernel

    def second_kernel(self) -> np.ndarray:
        """Exact second measure derivative E[y, z] (x-independent here)."""
        npts = self.grid.npoints
        if self.q is None:
            return np.zeros((npts, npts))
        return 2 * self.quad_weight * np.outer(self.q.values, self.q.values)


# ---------------------------------------------------------------------------
# manufactured stationary solutions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StationaryManufactured:
    """Stationary evaluator U(x, m) = base(x) + (rho * m)(x) with f built
    from the stationary operator, so U solves the discrete equation exactly.

    ``rho`` must be even with unit discrete integral; the measure derivative
    of U is the translation kernel rho(x - y).
    """

    grid: Grid
    ham: HamiltonianSpec | None
    r: float
    sigma: float
    rho: np.ndarray
    base: np.ndarray = None
    weight: float = 1.0

    def __post_init__(self):
        base = (
            np.zeros(self.grid.npoints)
            if self.base is None
            else np.asarray(self.base, dtype=float)
        )
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "rho", np.asarray(self.rho, dtype=float))

    def _convolve(self, density: np.ndarray) -> np.ndarray:
        g = self.grid
        axes = tuple(range(-g.d, 0))
        out = np.fft.ifftn(
            np.fft.fftn(g.reshape(self.rho))
            * np.fft.fftn(g.reshape(density), axes=axes),
            axes=axes,
        ).real * g.cell_volume
        return out.ravel()

    def u_values(self, m) -> np.ndarray:
        return self.base + self.weight * self._convolve(_density(m))

    def flat_kernel(self, m=None, normalized: bool = False) -> np.ndarray:
        kernel = self.weight * translation_matrix(self.grid, self.rho)
        if normalized:
            density = _density(m)
            kernel = kernel - (self.grid.cell_volume * kernel @ density)[:, None]
        return kernel

    def f_values(self, m) -> np.ndarray:
        """Coupling chosen so that u_values solves the stationary
        operator identity r U - σΔU + H(∇U) - ⟨δU/δm, div(D_pH(∇U)m) + σΔm⟩ = f."""
        density = _density(m)
        u = self.u_values(density)
        grad_u = gradient_values(self.grid, u)
        out = self.r * u - self.sigma * laplacian_values(self.grid, u)
        if self.ham is not None:
            out = out + self.ham.value(grad_u)
            flux = self.ham.grad_p(grad_u) * density
            w = divergence_values(self.grid, flux)
        else:
            w = np.zeros(self.grid.npoints)
        w = w + self.sigma * laplacian_values(self.grid, density)
        # pairing in the second kernel slot is a convolution since rho is even
        out = out - self.weight * self._convolve(w)
        return out


@dataclass(frozen=True, eq=False)
class AntiMonotoneCandidate(StationaryManufactured):
    """U(x, m) = -(rho * m)(x) together with f = 0: fails the monotone
    inequality and serves as the certifier's negative control."""

    def f_values(self, m) -> np.ndarray:
        return np.zeros(self.grid.npoints)
