"""Value function construction, measure derivatives and equation residuals.

The oracle realizes m -> U(t, ·, m) through equilibrium solves with horizon
t, memoizing on quantized inputs so repeated and perturbed evaluations are
cheap and bitwise reproducible.  Measure derivatives are simplex difference
quotients toward single-cell columns, recentered to integrate to zero
against the base measure.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .mfg import NonConvergenceError, SolverSettings, solve_mfg_fixed_point
from .model import CouplingSpec, HamiltonianSpec, ScenarioParams
from .torus import (
    Grid,
    GridMeasure,
    divergence_values,
    gradient_values,
    laplacian_values,
    w1_distance,
)

__all__ = [
    "ValueOracle",
    "FlatDerivative",
    "OracleError",
    "flat_derivative",
    "intrinsic_derivative",
    "master_residual",
    "stationary_master_residual",
    "value_monotonicity_check",
    "fit_regularity",
    "stability_regression",
]

_MEMO_QUANT = 1e-9
_CACHE_MAGIC = "mfglab-memo"


class OracleError(RuntimeError):
    """Value evaluation failed; carries the offending (t, m) context."""


def _spec_digest(grid, ham, coupling_f, coupling_u0, params, settings, n_t_ref) -> str:
    sha = hashlib.sha256()

    def feed(*parts):
        for part in parts:
            if isinstance(part, np.ndarray):
                sha.update(np.ascontiguousarray(part).tobytes())
            else:
                sha.update(repr(part).encode())

    feed("grid", grid.d, grid.n)
    feed("ham", ham.kind, ham.a, ham.b, ham.c)
    for tag, c in (("f", coupling_f), ("u0", coupling_u0)):
        feed(tag, c.kind, c.weight)
        feed(c.rho if c.rho is not None else "-")
        feed(c.offset if c.offset is not None else "-")
        if c.psi is not None:
            feed(c.psi.label, c.psi.mollify_width)
    feed("params", params.sigma, params.r, params.t_f, params.lam,
         params.lam_1, params.lam_2, params.alpha_strong)
    feed("solver", settings.theta, settings.tol, settings.max_iter,
         settings.cfl_safety, settings.n_t_min, n_t_ref, _MEMO_QUANT)
    return sha.hexdigest()


class ValueOracle:
    """m -> U(t, ·, m) backed by on-demand equilibrium solves.

    Evaluation snaps t to the reference time grid (multiples of ``dt_ref``),
    so time differences are taken with consistent spacing.  Results are
    memoized on (snapped t, density quantized at 1e-9 per cell) and can be
    persisted to an append-only binary cache keyed by a content hash of the
    full configuration; cache hits reload byte-identically.
    """

    def __init__(
        self,
        grid: Grid,
        ham: HamiltonianSpec,
        coupling_f: CouplingSpec,
        coupling_u0: CouplingSpec,
        params: ScenarioParams,
        settings: SolverSettings | None = None,
        n_t_ref: int | None = None,
        cache_path: str | None = None,
    ):
        self.grid = grid
        self.ham = ham
        self.coupling_f = coupling_f
        self.coupling_u0 = coupling_u0
        self.params = params
        base = settings or SolverSettings(tol=1e-10, max_iter=300)
        if not base.raise_on_failure:
            from dataclasses import replace

            base = replace(base, raise_on_failure=True)
        self.settings = base
        if n_t_ref is None:
            n_t_ref = max(base.n_t_min, 2 * grid.n)
        self.n_t_ref = int(n_t_ref)
        self.dt_ref = params.t_f / self.n_t_ref
        self._memo: dict[bytes, np.ndarray] = {}
        self.stats = {"solves": 0, "memo_hits": 0, "cache_loads": 0}
        self.content_hash = _spec_digest(
            grid, ham, coupling_f, coupling_u0, params, base, self.n_t_ref
        )
        self._cache_path = cache_path
        if cache_path:
            self._load_cache(cache_path)

    # -- time grid ----------------------------------------------------------

    def snap_time(self, t: float) -> float:
        if not 0 <= t <= self.params.t_f + 1e-12:
            raise OracleError(f"t={t!r} outside [0, {self.params.t_f}]")
        k = int(round(t / self.dt_ref))
        return min(k, self.n_t_ref) * self.dt_ref

    # -- memo and cache plumbing ---------------------------------------------

    def _key(self, t: float, density: np.ndarray) -> bytes:
        k = int(round(t / self.dt_ref))
        quant = np.round(density / _MEMO_QUANT).astype(np.int64)
        return struct.pack("<q", k) + quant.tobytes()

    def _load_cache(self, path: str) -> None:
        if not os.path.exists(path):
            with open(path, "wb") as fh:
                header = json.dumps(
                    {"magic": _CACHE_MAGIC, "version": 1, "hash": self.content_hash}
                )
                fh.write(header.encode() + b"\n")
            return
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode())
            if header.get("magic") != _CACHE_MAGIC or header.get("hash") != self.content_hash:
                # stale cache for another configuration: ignore it
                self._cache_path = None
                return
            while True:
                lens = fh.read(16)
                if len(lens) < 16:
                    break
                klen, vlen = struct.unpack("<qq", lens)
                key = fh.read(klen)
                val = fh.read(vlen)
                if len(key) < klen or len(val) < vlen:
                    break  # truncated tail record (interrupted append)
                self._memo[key] = np.frombuffer(val, dtype=np.float64).copy()
                self.stats["cache_loads"] += 1

    def _append_cache(self, key: bytes, values: np.ndarray) -> None:
        if not self._cache_path:
            return
        payload = np.ascontiguousarray(values, dtype=np.float64).tobytes()
        with open(self._cache_path, "ab") as fh:
            fh.write(struct.pack("<qq", len(key), len(payload)))
            fh.write(key)
            fh.write(payload)

    # -- evaluation -----------------------------------------------------------

    def solve(self, t: float, m: GridMeasure):
        """Full trajectory solve with horizon t (not memoized)."""
        n_t = max(1, int(round(t / self.dt_ref)))
        try:
            return solve_mfg_fixed_point(
                self.grid, self.ham, self.coupling_f, self.coupling_u0,
                m, self.params, self.settings, t_f=t, n_t=n_t,
            )
        except NonConvergenceError as exc:
            raise OracleError(
                f"no equilibrium at horizon t={t:g} "
                f"(residual {exc.solution.final_residual:.3e}); the value "
                "function is undefined without a selection rule"
            ) from exc

    def evaluate(self, t: float, m: GridMeasure) -> np.ndarray:
        """U(t, ·, m): the start value of the horizon-t equilibrium."""
        t = self.snap_time(t)
        if t == 0.0:
            return self.coupling_u0.evaluate(m.density)
        key = self._key(t, m.density)
        hit = self._memo.get(key)
        if hit is not None:
            self.stats["memo_hits"] += 1
            return hit.copy()
        values = self.solve(t, m).u[0]
        self.stats["solves"] += 1
        self._memo[key] = values.copy()
        self._append_cache(key, values)
        return values.copy()


@dataclass(frozen=True, eq=False)
class FlatDerivative:
    """Difference-quotient measure derivative D[x, y] at a base measure.

    Normalized so that ⟨D(x, ·), m⟩ = 0 for every x (to the stated
    tolerance); ``eps`` is the simplex step actually used.
    """

    grid: Grid
    t: float
    base: GridMeasure
    matrix: np.ndarray
    eps: float

    def normalization_defect(self) -> float:
        inner = self.grid.cell_volume * self.matrix @ self.base.density
        return float(np.max(np.abs(inner)))


def flat_derivative(
    oracle, t: float, m: GridMeasure, eps: float, columns=None
) -> FlatDerivative:
    """Simplex difference quotient toward single-cell columns.

    D(x, y) = [U(t, x, (1-eps) m + eps δ_y) - U(t, x, m)] / eps, recentered
    so every row integrates to zero against m.  ``columns`` restricts the
    perturbation set (defaults to every cell).
    """
    if not 0 < eps < 0.5:
        raise OracleError(f"eps must be in (0, 0.5), got {eps}")
    grid = oracle.grid
    base_vals = oracle.evaluate(t, m)
    cols = range(grid.npoints) if columns is None else columns
    matrix = np.zeros((grid.npoints, grid.npoints))
    failures = []
    for y in cols:
        density = (1 - eps) * m.density.copy()
        density[y] += eps / grid.cell_volume
        try:
            pert_vals = oracle.evaluate(t, GridMeasure(grid, density, m.mass))
        except OracleError as exc:
            failures.append((y, str(exc)))
            continue
        matrix[:, y] = (pert_vals - base_vals) / eps
    if failures:
        summary = "; ".join(f"column {y}: {msg}" for y, msg in failures[:3])
        raise OracleError(
            f"{len(failures)} perturbed solves failed ({summary} ...)"
        )
    matrix -= (grid.cell_volume * matrix @ m.density)[:, None]
    return FlatDerivative(grid=grid, t=t, base=m, matrix=matrix, eps=eps)


def intrinsic_derivative(fd: FlatDerivative) -> np.ndarray:
    """Grid gradient of the flat derivative in its second (y) argument.

    Returns shape (d, npoints_x, npoints_y).
    """
    grid = fd.grid
    npts = grid.npoints
    out = np.empty((grid.d, npts, npts))
    shaped = fd.matrix.reshape((npts,) + grid.shape)
    for axis in range(grid.d):
        out[axis] = (
            (np.roll(shaped, -1, axis=axis + 1) - np.roll(shaped, 1, axis=axis + 1))
            / (2 * grid.h)
        ).reshape(npts, npts)
    return out


def master_residual(oracle, t: float, m: GridMeasure, eps: float) -> np.ndarray:
    """Pointwise residual of the evolution equation for the value function.

    Assembles ∂_t U - σΔU + H(x, ∇U) - ⟨δU/δm, div(D_pH(∇U) m)⟩
    - σ⟨δU/δm, Δm⟩ - f(x, m) from oracle evaluations and grid calculus.
    The same-named operators are applied to the density first and then
    paired, so the noisy derivative matrix is never differentiated.
    """
    grid = oracle.grid
    params = oracle.params
    dt = oracle.dt_ref
    t = oracle.snap_time(t)
    if not dt - 1e-12 <= t <= params.t_f - dt + 1e-12:
        raise OracleError(f"t={t:g} leaves no room for the centered time step")
    u = oracle.evaluate(t, m)
    du_dt = (oracle.evaluate(t + dt, m) - oracle.evaluate(t - dt, m)) / (2 * dt)
    grad_u = gradient_values(grid, u)
    lap_u = laplacian_values(grid, u)
    fd = flat_derivative(oracle, t, m, eps)
    flux = oracle.ham.grad_p(grad_u) * m.density
    transport = divergence_values(grid, flux)
    lap_m = laplacian_values(grid, m.density)
    pair_transport = grid.cell_volume * fd.matrix @ transport
    pair_diffusion = grid.cell_volume * fd.matrix @ lap_m
    f_vals = oracle.coupling_f.evaluate(m.density)
    return (
        du_dt
        - params.sigma * lap_u
        + oracle.ham.value(grad_u)
        - pair_transport
        - params.sigma * pair_diffusion
        - f_vals
    )


def stationary_master_residual(evaluator, m: GridMeasure) -> np.ndarray:
    """Residual of the discounted stationary equation for a closed-form
    evaluator (``u_values``, ``f_values``, ``flat_kernel``, ``r``, ``sigma``,
    optional ``ham``)."""
    grid = evaluator.grid
    u = evaluator.u_values(m.density)
    grad_u = gradient_values(grid, u)
    out = evaluator.r * u - evaluator.sigma * laplacian_values(grid, u)
    if evaluator.ham is not None:
        out = out + evaluator.ham.value(grad_u)
        flux = evaluator.ham.grad_p(grad_u) * m.density
        transport = divergence_values(grid, flux)
    else:
        transport = np.zeros(grid.npoints)
    kernel = evaluator.flat_kernel(m)
    w = transport + evaluator.sigma * laplacian_values(grid, m.density)
    out = out - grid.cell_volume * kernel @ w
    return out - evaluator.f_values(m.density)


def value_monotonicity_check(oracle, t: float, pairs) -> dict:
    """min over pairs of ⟨U(t,·,µ) - U(t,·,ν), µ - ν⟩ (≥ -tol under
    monotone data)."""
    pairings = []
    for mu, nu in pairs:
        diff = oracle.evaluate(t, mu) - oracle.evaluate(t, nu)
        pairings.append(
            float(oracle.grid.cell_volume * diff @ (mu.density - nu.density))
        )
    pairings = np.asarray(pairings)
    return {
        "min_pairing": float(pairings.min()),
        "pairings": pairings,
        "argmin": int(np.argmin(pairings)),
        "t": t,
    }


# ---------------------------------------------------------------------------
# regularity fits
# ---------------------------------------------------------------------------


def _axis_coordinate(grid: Grid) -> np.ndarray:
    return grid.positions() if grid.d == 1 else grid.positions()[:, 0]


def fit_regularity(
    oracle,
    sample_count: int = 30,
    seed: int = 0,
    t: float | None = None,
    flat_tol: float = 1e-8,
) -> dict:
    """Log-log regression of value increments against transport distance and
    against time separation.

    Measure pairs are dyadic-amplitude smooth perturbations of random
    positive base densities, so the distance axis sweeps several scales;
    time pairs reuse one base measure.  Degenerate samples (all distances
    below 1e-8) are rejected.
    """
    if sample_count < 20:
        raise OracleError("need at least 20 samples for a stable fit")
    grid = oracle.grid
    params = oracle.params
    rng = np.random.default_rng(seed)
    t0 = oracle.snap_time(params.t_f / 2 if t is None else t)
    x = _axis_coordinate(grid)

    amplitudes = 2.0 ** -np.arange(5)
    dists, gaps = [], []
    while len(dists) < sample_count:
        raw = np.exp(
            0.4 * rng.standard_normal() * np.cos(2 * np.pi * x)
            + 0.4 * rng.standard_normal() * np.sin(2 * np.pi * x)
        )
        base = GridMeasure.from_unnormalized(grid, raw)
        u_base = oracle.evaluate(t0, base)
        shape = np.cos(
            2 * np.pi * int(rng.integers(1, 4)) * x + rng.uniform(0, 2 * np.pi)
        )
        shape -= shape.mean()  # exact mass-zero direction
        scale = 0.9 * base.density.min() / np.abs(shape).max()
        for amp in amplitudes:
            pert = GridMeasure(grid, base.density + amp * scale * shape)
            dists.append(w1_distance(base, pert))
            gaps.append(float(np.max(np.abs(oracle.evaluate(t0, pert) - u_base))))
    dists = np.asarray(dists)
    gaps = np.asarray(gaps)
    if np.all(dists < 1e-8):
        raise OracleError("degenerate samples: all transport distances < 1e-8")

    report = {"samples": len(dists), "t": t0}
    if np.all(gaps <= flat_tol):
        report.update({"flat": True, "holder_gamma_hat": None, "lip_const_hat": 0.0})
    else:
        keep = (gaps > flat_tol) & (dists > 1e-12)
        slope, intercept = np.polyfit(np.log(dists[keep]), np.log(gaps[keep]), 1)
        report.update(
            {
                "flat": False,
                "holder_gamma_hat": float(slope),
                "lip_const_hat": float(np.exp(intercept)),
            }
        )

    # time modulus at a fixed measure
    base = GridMeasure.from_unnormalized(grid, np.exp(0.3 * np.cos(2 * np.pi * x)))
    u_t0 = oracle.evaluate(t0, base)
    seps, tgaps = [], []
    max_sep = min(t0, params.t_f - t0)
    for frac in (1.0, 0.5, 0.25, 0.125):
        sep = oracle.snap_time(frac * max_sep)
        if sep <= 0:
            continue
        seps.append(sep)
        tgaps.append(float(np.max(np.abs(oracle.evaluate(t0 + sep, base) - u_t0))))
    seps, tgaps = np.asarray(seps), np.asarray(tgaps)
    keep = tgaps > flat_tol
    if keep.sum() >= 2:
        report["time_exponent_hat"] = float(
            np.polyfit(np.log(seps[keep]), np.log(tgaps[keep]), 1)[0]
        )
    else:
        report["time_exponent_hat"] = None
    return report


def stability_regression(evaluators, probes) -> dict:
    """Sup difference over a fixed probe set between consecutive evaluators.

    ``probes`` is a list of (t, GridMeasure); Cauchy decrease of the
    successive differences is the regression target.
    """
    if len(evaluators) < 2:
        raise OracleError("need at least two evaluators to compare")
    diffs = []
    for a, b in zip(evaluators[:-1], evaluators[1:]):
        worst = 0.0
        for t, m in probes:
            gap = float(np.max(np.abs(a.evaluate(t, m) - b.evaluate(t, m))))
            worst = max(worst, gap)
        diffs.append(worst)
    decreasing = all(d2 <= d1 + 1e-14 for d1, d2 in zip(diffs[:-1], diffs[1:]))
    return {"diffs": diffs, "cauchy_decreasing": decreasing}
