"""Shared builders for solver-level tests: grids, measures and model specs."""

import numpy as np
import pytest

from mfglab.model import (
    PSI_SHAPES,
    CouplingSpec,
    HamiltonianSpec,
    PsiShape,
    ScenarioParams,
)
from mfglab.torus import Grid, GridMeasure


def smooth_positive_measure(grid, rng, roughness=0.5):
    """Random strictly positive probability density (exp of a trig polynomial)."""
    x = grid.positions()
    if grid.d == 1:
        phase = 2 * np.pi * x
        raw = np.zeros(grid.npoints)
        for k in (1, 2, 3):
            raw += roughness / k * (
                rng.standard_normal() * np.cos(k * phase)
                + rng.standard_normal() * np.sin(k * phase)
            )
    else:
        raw = roughness * (
            rng.standard_normal() * np.cos(2 * np.pi * x[:, 0])
            + rng.standard_normal() * np.sin(2 * np.pi * x[:, 1])
        )
    return GridMeasure.from_unnormalized(grid, np.exp(raw))


def cosine_mollifier(grid, coeffs):
    """rho(x) = 1 + sum c_k cos(2 pi k x): even, nonnegative, unit integral."""
    x = grid.positions() if grid.d == 1 else grid.positions()[:, 0]
    rho = np.ones(grid.npoints)
    for k, c in coeffs:
        rho += c * np.cos(2 * np.pi * k * x)
    return rho


def psi_shape(name):
    return PsiShape(*PSI_SHAPES[name], label=name)


def monotone_setup(n=64, sigma=0.5, t_f=1.0, coupling_scale=1.0, u0_bump=0.5):
    """Canonical smooth monotone scenario: quadratic H, convolution couplings."""
    grid = Grid(1, n)
    x = grid.positions()
    ham = HamiltonianSpec(grid, "quadratic")
    rho = cosine_mollifier(grid, [(1, 0.6), (2, 0.2)])
    coupling_f = CouplingSpec(
        grid, "linear-convolution", rho=rho, weight=coupling_scale
    )
    coupling_u0 = CouplingSpec(
        grid,
        "linear-convolution",
        rho=rho,
        weight=coupling_scale,
        offset=u0_bump * np.cos(2 * np.pi * x),
    )
    params = ScenarioParams(sigma=sigma, t_f=t_f)
    return grid, ham, coupling_f, coupling_u0, params


def zero_setup(n=32, sigma=0.5, t_f=0.5):
    """Fully decoupled scenario: f = 0, terminal = 0, H(x, 0) = 0."""
    grid = Grid(1, n)
    ham = HamiltonianSpec(grid, "quadratic")
    zero = CouplingSpec(grid, "zero")
    params = ScenarioParams(sigma=sigma, t_f=t_f)
    return grid, ham, zero, zero, params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
