"""Hamiltonians, coupling functions and validators for the standing hypotheses.

Hamiltonians come in two closed-form families (quadratic and soft-quadratic,
both with explicit momentum derivatives); couplings are built around an even
nonnegative mollifier so monotonicity can be certified by sampling and, for
the linear case, cross-checked against the Fourier diagonalization.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .torus import (
    Grid,
    GridMeasure,
    SignedGridMeasure,
    TorusError,
    pairing_values,
)

__all__ = [
    "HamiltonianSpec",
    "CouplingSpec",
    "ScenarioParams",
    "PSI_SHAPES",
    "check_hamiltonian",
    "check_monotone_coupling",
    "check_strict_monotone",
    "check_strong_monotone",
    "mollify_coupling",
]


class ModelError(ValueError):
    """Invalid Hamiltonian or coupling specification."""


# ---------------------------------------------------------------------------
# Hamiltonians
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HamiltonianSpec:
    """Closed-form Hamiltonian H(x, p) with its momentum derivatives.

    quadratic:       H = a(x) |p|^2 / 2 + b(x)·p + c(x)
    soft-quadratic:  H = a(x) (sqrt(1 + |p|^2) - 1)   (bounded Hessian)

    ``a`` must be positive everywhere; ``b`` has one component per axis.
    """

    grid: Grid
    kind: str = "quadratic"
    a: np.ndarray | None = None
    b: np.ndarray | None = None  # shape (d, npoints)
    c: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("quadratic", "soft-quadratic"):
            raise ModelError(f"unknown Hamiltonian kind {self.kind!r}")
        npts = self.grid.npoints
        a = np.ones(npts) if self.a is None else np.asarray(self.a, dtype=float)
        if a.shape != (npts,):
            raise ModelError("a must be a grid function")
        if a.min() <= 0:
            raise ModelError(f"a must be positive, min is {a.min():g}")
        object.__setattr__(self, "a", a)
        if self.kind == "quadratic":
            b = (
                np.zeros((self.grid.d, npts))
                if self.b is None
                else np.asarray(self.b, dtype=float).reshape(self.grid.d, npts)
            )
            c = np.zeros(npts) if self.c is None else np.asarray(self.c, dtype=float)
            object.__setattr__(self, "b", b)
            object.__setattr__(self, "c", c)
        elif self.b is not None or self.c is not None:
            raise ModelError("soft-quadratic Hamiltonians take only a(x)")

    def value(self, p: np.ndarray) -> np.ndarray:
        """H(x, p) for a momentum field p of shape (d, npoints)."""
        p = np.atleast_2d(p)
        sq = (p**2).sum(axis=0)
        if self.kind == "quadratic":
            return self.a * sq / 2 + (self.b * p).sum(axis=0) + self.c
        return self.a * (np.sqrt(1.0 + sq) - 1.0)

    def grad_p(self, p: np.ndarray) -> np.ndarray:
        """D_p H(x, p) for momenta shaped (d, ..., npoints)."""
        p = np.atleast_2d(p)
        if self.kind == "quadratic":
            b = self.b.reshape((self.grid.d,) + (1,) * (p.ndim - 2) + (-1,))
            return self.a * p + b
        sq = (p**2).sum(axis=0)
        return self.a * p / np.sqrt(1.0 + sq)

    def hess_pp_eigenvalues(self, p: np.ndarray) -> np.ndarray:
        """Eigenvalues of D²_pp H(x, p), shape (d, npoints)."""
        p = np.atleast_2d(p)
        d = self.grid.d
        if self.kind == "quadratic":
            return np.broadcast_to(self.a, (d, self.grid.npoints)).copy()
        sq = (p**2).sum(axis=0)
        radial = self.a / (1.0 + sq) ** 1.5
        if d == 1:
            return radial[None, :]
        tangential = self.a / np.sqrt(1.0 + sq)
        return np.stack([radial, tangential])

    def drift_bound(self, p: np.ndarray) -> float:
        """max over grid and axes of |D_p H| — the CFL-relevant speed."""
        return float(np.max(np.abs(self.grad_p(p))))


def check_hamiltonian(
    ham: HamiltonianSpec, sample_count: int = 200, p_box: float = 5.0, seed: int = 0
) -> dict:
    """Sample D²_pp bounds and midpoint convexity of H(x, ·) on a momentum box."""
    if sample_count < 1:
        raise ModelError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    d, npts = ham.grid.d, ham.grid.npoints
    c_lower, c_upper = np.inf, -np.inf
    violations = 0
    for _ in range(sample_count):
        p = rng.uniform(-p_box, p_box, size=(d, npts))
        eigs = ham.hess_pp_eigenvalues(p)
        c_lower = min(c_lower, float(eigs.min()))
        c_upper = max(c_upper, float(eigs.max()))
        q = rng.uniform(-p_box, p_box, size=(d, npts))
        gap = ham.value(p) + ham.value(q) - 2 * ham.value((p + q) / 2)
        violations += int(np.any(gap < -1e-12))
    return {
        "C_lower": c_lower,
        "C_upper": c_upper,
        "convex": violations == 0,
        "midpoint_violations": violations,
        "sample_count": sample_count,
    }


# ---------------------------------------------------------------------------
# couplings
# ---------------------------------------------------------------------------


def _quadrature(width: float, nodes: int = 21):
    t, w = hermegauss(nodes)  # weights for exp(-t^2/2)/sqrt(2 pi)
    return width * t, w / np.sqrt(2 * np.pi)


@dataclass(frozen=True, eq=False)
class PsiShape:
    """Scalar profile y -> psi(y) with its derivative, used inside couplings."""

    fn: Callable[[np.ndarray], np.ndarray]
    d_fn: Callable[[np.ndarray], np.ndarray]
    label: str
    mollify_width: float = 0.0

    def __call__(self, y: np.ndarray) -> np.ndarray:
        if self.mollify_width == 0.0:
            return self.fn(y)
        shifts, weights = _quadrature(self.mollify_width)
        y = np.asarray(y)
        return np.tensordot(weights, self.fn(y[None, ...] + shifts.reshape((-1,) + (1,) * y.ndim)), axes=1)

    def deriv(self, y: np.ndarray) -> np.ndarray:
        if self.mollify_width == 0.0:
            return self.d_fn(y)
        shifts, weights = _quadrature(self.mollify_width)
        y = np.asarray(y)
        return np.tensordot(weights, self.d_fn(y[None, ...] + shifts.reshape((-1,) + (1,) * y.ndim)), axes=1)


def _holder_psi(beta: float):
    def fn(y):
        z = np.asarray(y) - 1.0
        return np.sign(z) * np.abs(z) ** beta

    def d_fn(y):
        z = np.abs(np.asarray(y) - 1.0)
        return beta * np.maximum(z, 1e-12) ** (beta - 1.0)

    return fn, d_fn


PSI_SHAPES: dict[str, tuple[Callable, Callable]] = {
    "identity": (lambda y: np.asarray(y, dtype=float), lambda y: np.ones_like(np.asarray(y, dtype=float))),
    "cubic": (lambda y: y + y**3 / 3.0, lambda y: 1.0 + y**2),
    "softplus": (
        lambda y: np.logaddexp(0.0, y),
        lambda y: 1.0 / (1.0 + np.exp(-np.asarray(y, dtype=float))),
    ),
    "holder-2/3": _holder_psi(2.0 / 3.0),
}


@dataclass(frozen=True, eq=False)
class CouplingSpec:
    """Coupling f(x, m) = offset(x) + weight * (m-dependent part).

    kinds:
      zero:                    no m-dependence
      linear-convolution:      (rho * m)(x)
      local-through-mollifier: h^d Σ_z psi((rho*m)(z)) rho(x-z), psi' >= 0

    ``rho`` is an even nonnegative mollifier with unit discrete integral; a
    negative ``weight`` flips monotonicity (useful for counterexamples).
    """

    grid: Grid
    kind: str = "zero"
    rho: np.ndarray | None = None
    psi: PsiShape | None = None
    offset: np.ndarray | None = None
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in ("zero", "linear-convolution", "local-through-mollifier"):
            raise ModelError(f"unknown coupling kind {self.kind!r}")
        npts = self.grid.npoints
        if self.offset is not None:
            off = np.asarray(self.offset, dtype=float)
            if off.shape != (npts,):
                raise ModelError("offset must be a grid function")
            object.__setattr__(self, "offset", off)
        if self.kind == "zero":
            if self.rho is not None or self.psi is not None:
                raise ModelError("zero coupling takes no mollifier or profile")
            return
        if self.rho is None:
            raise ModelError(f"{self.kind} coupling requires a mollifier rho")
        rho = np.asarray(self.rho, dtype=float)
        if rho.shape != (npts,):
            raise ModelError("rho must be a grid function")
        if rho.min() < -1e-12:
            raise ModelError("rho must be nonnegative")
        total = self.grid.cell_volume * rho.sum()
        if abs(total - 1.0) > 1e-10:
            raise ModelError(f"rho must integrate to 1, got {total!r}")
        flipped = self._reverse(rho)
        if not np.allclose(rho, flipped, atol=1e-12):
            raise ModelError("rho must be even")
        object.__setattr__(self, "rho", rho)
        if self.kind == "local-through-mollifier":
            if self.psi is None:
                raise ModelError("local-through-mollifier requires a psi profile")
        elif self.psi is not None:
            raise ModelError("psi profile only applies to local-through-mollifier")

    def _reverse(self, values: np.ndarray) -> np.ndarray:
        v = self.grid.reshape(values)
        for axis in range(self.grid.d):
            v = np.flip(v, axis=axis)
            v = np.roll(v, 1, axis=axis)  # keep the origin fixed under x -> -x
        return v.ravel()

    def convolve(self, density: np.ndarray) -> np.ndarray:
        """(rho * g)(x) = h^d Σ_y rho(x - y) g(y) via the FFT.

        Accepts a single flat field or a batch with the field in the last
        ``d`` axes (e.g. a full time trajectory).
        """
        g = self.grid
        density = np.asarray(density)
        batched = density.shape[-1] == g.npoints and density.ndim > 1
        shaped = density.reshape(density.shape[:-1] + g.shape) if batched else g.reshape(density)
        axes = tuple(range(-g.d, 0))
        out = np.fft.ifftn(
            np.fft.fftn(g.reshape(self.rho)) * np.fft.fftn(shaped, axes=axes),
            axes=axes,
        ).real * g.cell_volume
        return out.reshape(density.shape)

    def evaluate(self, m: GridMeasure | np.ndarray) -> np.ndarray:
        """f(·, m); also maps a (batch, npoints) stack of densities row-wise."""
        density = m.density if isinstance(m, GridMeasure) else np.asarray(m)
        out = np.zeros(density.shape)
        if self.kind == "linear-convolution":
            out = self.weight * self.convolve(density)
        elif self.kind == "local-through-mollifier":
            inner = self.psi(self.convolve(density))
            out = self.weight * self.convolve(inner)
        if self.offset is not None:
            out = out + self.offset
        return out

    @property
    def has_flat_derivative(self) -> bool:
        return self.kind != "local-through-mollifier" or self.psi is not None

    def flat_derivative_kernel(self, m: GridMeasure | np.ndarray) -> np.ndarray:
        """Unnormalized kernel D[x, y] of the measure derivative of f at m.

        linear-convolution:      D(x, y) = weight * rho(x - y)
        local-through-mollifier: D(x, y) = weight * h^d Σ_z rho(x-z) psi'((rho*m)(z)) rho(z-y)
        zero:                    D = 0
        """
        g = self.grid
        npts = g.npoints
        if self.kind == "zero":
            return np.zeros((npts, npts))
        rho_mat = self._translation_matrix(self.rho)
        if self.kind == "linear-convolution":
            return self.weight * rho_mat
        density = m.density if isinstance(m, GridMeasure) else np.asarray(m)
        dpsi = self.psi.deriv(self.convolve(density))
        return self.weight * g.cell_volume * (rho_mat * dpsi[None, :]) @ rho_mat

    def _translation_matrix(self, profile: np.ndarray) -> np.ndarray:
        """Matrix M[x, y] = profile(x - y) built from circular shifts."""
        g = self.grid
        npts = g.npoints
        out = np.empty((npts, npts))
        shaped = g.reshape(profile)
        if g.d == 1:
            for y in range(npts):
                out[:, y] = np.roll(shaped, y)
        else:
            n = g.n
            for y in range(npts):
                iy, jy = divmod(y, n)
                out[:, y] = np.roll(np.roll(shaped, iy, axis=0), jy, axis=1).ravel()
        return out


def mollify_coupling(f: CouplingSpec, width: float) -> CouplingSpec:
    """Smooth the scalar profile by a Gaussian of the given width.

    Nonnegative mollification preserves psi' >= 0, hence monotonicity; for a
    profile affine in y the coupling is returned unchanged.
    """
    if width <= 0:
        raise ModelError(f"width must be positive, got {width}")
    if f.kind != "local-through-mollifier":
        return f
    base = f.psi
    smoothed = PsiShape(
        fn=base.fn,
        d_fn=base.d_fn,
        label=f"{base.label}~gauss({width:g})",
        mollify_width=float(np.hypot(base.mollify_width, width)),
    )
    return replace(f, psi=smoothed)


# ---------------------------------------------------------------------------
# scenario parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioParams:
    """Diffusion, discount, horizon and jump intensities for one scenario."""

    sigma: float = 0.5
    r: float = 0.0
    t_f: float = 1.0
    lam: float = 0.0
    lam_1: float = 0.0
    lam_2: float = 0.0
    alpha_strong: float | None = None

    def __post_init__(self):
        if self.sigma <= 0:
            raise ModelError("the solver requires sigma > 0 (idiosyncratic noise)")
        if self.t_f <= 0:
            raise ModelError("horizon t_f must be positive")
        for name in ("r", "lam", "lam_1", "lam_2"):
            if getattr(self, name) < 0:
                raise ModelError(f"{name} must be >= 0")
        if self.alpha_strong is not None and self.alpha_strong <= 0:
            raise ModelError("alpha_strong must be positive when asserted")


# ---------------------------------------------------------------------------
# monotonicity checks
# ---------------------------------------------------------------------------


def coupling_pairing(f: CouplingSpec, mu: GridMeasure, nu: GridMeasure) -> float:
    """⟨f(·,µ) - f(·,ν), µ - ν⟩."""
    diff = f.evaluate(mu) - f.evaluate(nu)
    return pairing_values(f.grid, diff, mu.density - nu.density)


def check_monotone_coupling(
    f: CouplingSpec, pairs: list[tuple[GridMeasure, GridMeasure]], tol: float = 1e-10
) -> dict:
    """Sample-based certificate of ⟨f(µ)-f(ν), µ-ν⟩ >= 0."""
    if not pairs:
        raise ModelError("need at least one measure pair")
    pairings = []
    for mu, nu in pairs:
        if abs(mu.mass - nu.mass) > 1e-10:
            raise ModelError("monotonicity pairings need equal masses")
        pairings.append(coupling_pairing(f, mu, nu))
    pairings = np.asarray(pairings)
    worst = int(np.argmin(pairings))
    return {
        "min_pairing": float(pairings.min()),
        "monotone": bool(pairings.min() >= -tol),
        "pairings": pairings,
        "worst_pair": worst,
        "sample_count": len(pairs),
    }


def check_strict_monotone(
    f: CouplingSpec,
    pairs: list[tuple[GridMeasure, GridMeasure]],
    pairing_tol: float = 1e-10,
    output_tol: float = 1e-8,
) -> dict:
    """Zero pairing must force identical outputs (sampled)."""
    flagged = []
    min_pairing = np.inf
    for idx, (mu, nu) in enumerate(pairs):
        p = coupling_pairing(f, mu, nu)
        min_pairing = min(min_pairing, p)
        if abs(p) <= pairing_tol:
            gap = float(np.max(np.abs(f.evaluate(mu) - f.evaluate(nu))))
            if gap > output_tol:
                flagged.append({"pair": idx, "pairing": p, "output_gap": gap})
    return {
        "strict": not flagged,
        "violations": flagged,
        "min_pairing": float(min_pairing),
        "sample_count": len(pairs),
    }


def check_strong_monotone(
    f: CouplingSpec,
    alpha: float,
    base_measures: list[GridMeasure],
    directions: list[SignedGridMeasure],
) -> dict:
    """Verify ⟨ν|δf/δm(·,µ,·)|ν⟩ >= alpha ||⟨δf/δm(·,µ), ν⟩||₂² on samples.

    ``ν`` is tested against the first (x) argument of the kernel in the inner
    norm.  Reports the largest admissible alpha over the samples.
    """
    if alpha <= 0:
        raise ModelError("alpha must be positive")
    if not f.has_flat_derivative:
        raise ModelError("coupling has no measure derivative available")
    g = f.grid
    vol = g.cell_volume
    worst_ratio = np.inf
    holds = True
    records = []
    for mu in base_measures:
        kernel = f.flat_derivative_kernel(mu)
        for nu in directions:
            v = nu.density
            quad = vol * vol * float(v @ kernel @ v)
            image = vol * (kernel.T @ v)  # y -> ⟨D(·,y), ν⟩
            sq = vol * float(image @ image)
            records.append((quad, sq))
            if sq > 1e-14:
                worst_ratio = min(worst_ratio, quad / sq)
            if quad + 1e-12 < alpha * sq:
                holds = False
    return {
        "holds": holds,
        "alpha": alpha,
        "largest_admissible_alpha": float(worst_ratio),
        "samples": len(records),
    }
