import numpy as np
import pytest

from mfglab.mfg import (
    SchemeViolationError,
    SolverSettings,
    monotonicity_propagation_check,
    solve_fp_forward,
    solve_hjb_backward,
    solve_mfg_fixed_point,
)
from mfglab.model import CouplingSpec, HamiltonianSpec, ScenarioParams
from mfglab.torus import Grid, GridMeasure, pairing_values

from conftest import cosine_mollifier, monotone_setup, smooth_positive_measure, zero_setup


def heat_exact(grid, density, sigma, t):
    """Continuum heat semigroup applied to the sampled density (spectral)."""
    coeffs = np.fft.fft(grid.reshape(density), axis=-1)
    k = np.fft.fftfreq(grid.n, d=grid.h)
    return np.fft.ifft(coeffs * np.exp(-sigma * (2 * np.pi * k) ** 2 * t)).real.ravel()


class TestHJB:
    def test_zero_data_zero_solution(self):
        grid, ham, zero, _, params = zero_setup()
        n_t = 20
        forcing = np.zeros((n_t + 1, grid.npoints))
        u = solve_hjb_backward(grid, ham, np.zeros(grid.npoints), forcing, 0.01, params.sigma)
        assert np.all(u == 0.0)

    def test_constant_terminal_steady(self):
        grid, ham, zero, _, params = zero_setup()
        forcing = np.zeros((11, grid.npoints))
        u = solve_hjb_backward(
            grid, ham, np.full(grid.npoints, 2.5), forcing, 0.02, params.sigma
        )
        assert np.allclose(u, 2.5, atol=1e-12)

    def test_time_independent_forcing_refines(self):
        # dense-time reference: halving dt twice must shrink the gap linearly
        grid = Grid(1, 32)
        ham = HamiltonianSpec(grid, "quadratic")
        x = grid.positions()
        v = 0.5 * np.cos(2 * np.pi * x)
        terminal = 0.2 * np.sin(2 * np.pi * x)
        sigma, t_f = 0.5, 0.5

        def solve(n_t):
            forcing = np.tile(v, (n_t + 1, 1))
            return solve_hjb_backward(grid, ham, terminal, forcing, t_f / n_t, sigma)[0]

        ref = solve(640)
        err_coarse = np.max(np.abs(solve(40) - ref))
        err_fine = np.max(np.abs(solve(80) - ref))
        assert err_coarse / err_fine >= 1.7  # first order in dt


class TestFP:
    def test_heat_flow_oracle(self):
        grid, ham, _, _, params = zero_setup(n=64)
        rng = np.random.default_rng(0)
        m0 = smooth_positive_measure(grid, rng)
        n_t, t_f = 256, 0.25
        u = np.zeros((n_t + 1, grid.npoints))
        m = solve_fp_forward(grid, ham, m0.density, u, t_f / n_t, params.sigma)
        exact = heat_exact(grid, m0.density, params.sigma, t_f)
        coarse_err = np.max(np.abs(m[-1] - exact))
        # first order in dt: halving dt should roughly halve the gap
        m2 = solve_fp_forward(grid, ham, m0.density, np.zeros((2 * n_t + 1, grid.npoints)),
                              t_f / (2 * n_t), params.sigma)
        fine_err = np.max(np.abs(m2[-1] - exact))
        assert coarse_err < 0.02
        assert coarse_err / fine_err >= 1.6

    def test_uniform_fixed_point(self):
        grid, ham, _, _, params = zero_setup()
        u = np.zeros((21, grid.npoints))
        m = solve_fp_forward(grid, ham, np.ones(grid.npoints), u, 0.01, params.sigma)
        assert np.allclose(m, 1.0, atol=1e-12)

    def test_mass_conserved_every_step(self):
        grid = Grid(1, 32)
        ham = HamiltonianSpec(grid, "quadratic")
        rng = np.random.default_rng(1)
        m0 = smooth_positive_measure(grid, rng)
        x = grid.positions()
        n_t = 64
        # an arbitrary smooth value trajectory to induce nonzero drift
        u = np.array([
            0.3 * np.sin(2 * np.pi * x + 0.5 * k / n_t) for k in range(n_t + 1)
        ])
        m = solve_fp_forward(grid, ham, m0.density, u, 0.3 / n_t, 0.5)
        masses = grid.cell_volume * m.sum(axis=1)
        assert np.max(np.abs(masses - 1.0)) <= 1e-12
        assert m.min() >= -1e-12


class TestFixedPoint:
    def test_zero_scenario_uniform_one_iteration(self):
        grid, ham, zero, zero_u0, params = zero_setup()
        sol = solve_mfg_fixed_point(
            grid, ham, zero, zero_u0, GridMeasure.uniform(grid), params
        )
        assert sol.converged
        assert sol.picard_iterations == 1
        assert np.all(sol.u == 0.0)
        assert np.allclose(sol.m, 1.0, atol=1e-12)

    def test_zero_scenario_heat_flow(self):
        grid, ham, zero, zero_u0, params = zero_setup()
        rng = np.random.default_rng(2)
        m0 = smooth_positive_measure(grid, rng)
        sol = solve_mfg_fixed_point(grid, ham, zero, zero_u0, m0, params)
        assert sol.converged and sol.picard_iterations <= 2
        assert np.all(sol.u == 0.0)
        oracle = solve_fp_forward(
            grid, ham, m0.density, np.zeros_like(sol.u), sol.dt, params.sigma
        )
        assert np.allclose(sol.m, oracle, atol=1e-14)

    def test_m_independent_coupling_two_iterations(self):
        grid = Grid(1, 32)
        ham = HamiltonianSpec(grid, "quadratic")
        x = grid.positions()
        f = CouplingSpec(grid, "zero", offset=0.4 * np.cos(2 * np.pi * x))
        u0 = CouplingSpec(grid, "zero", offset=0.2 * np.sin(2 * np.pi * x))
        params = ScenarioParams(sigma=0.5, t_f=0.5)
        rng = np.random.default_rng(3)
        sol = solve_mfg_fixed_point(
            grid, ham, f, u0, smooth_positive_measure(grid, rng), params
        )
        assert sol.converged
        assert sol.picard_iterations <= 2

    def test_terminal_constant_shift(self):
        grid, ham, f, u0, params = monotone_setup(n=32, t_f=0.5)
        rng = np.random.default_rng(4)
        m0 = smooth_positive_measure(grid, rng)
        sol = solve_mfg_fixed_point(grid, ham, f, u0, m0, params)
        shift = 1.7
        u0_shifted = CouplingSpec(
            grid, "linear-convolution", rho=u0.rho, weight=u0.weight,
            offset=u0.offset + shift,
        )
        sol2 = solve_mfg_fixed_point(grid, ham, f, u0_shifted, m0, params)
        assert np.max(np.abs(sol2.u - sol.u - shift)) <= 1e-10
        assert np.max(np.abs(sol2.m - sol.m)) <= 1e-10

    def test_two_start_independence(self):
        # Lasry-Lions regime: the fixed point ignores the initial guess
        grid, ham, f, u0, params = monotone_setup(n=64, t_f=1.0)
        rng = np.random.default_rng(5)
        m0 = smooth_positive_measure(grid, rng)
        settings = SolverSettings(tol=1e-10, max_iter=400)
        n_t = 768  # shared time grid, generous for the drift CFL bound
        sol_frozen = solve_mfg_fixed_point(
            grid, ham, f, u0, m0, params, settings, n_t=n_t
        )
        uniform_guess = np.ones((n_t + 1, grid.npoints))
        sol_uniform = solve_mfg_fixed_point(
            grid, ham, f, u0, m0, params, settings, m_init=uniform_guess, n_t=n_t
        )
        assert sol_frozen.n_t == sol_uniform.n_t
        assert sol_frozen.converged and sol_uniform.converged
        gap = np.max(np.abs(sol_frozen.m - sol_uniform.m))
        assert gap <= 10 * settings.tol
        assert np.max(np.abs(sol_frozen.u[0] - sol_uniform.u[0])) <= 1e-6

    def test_self_refinement_first_order(self):
        grid_c, ham, f, u0, params = monotone_setup(n=32, t_f=0.5)
        rng = np.random.default_rng(6)
        base = smooth_positive_measure(grid_c, rng)

        def start_value(n, n_t):
            grid = Grid(1, n)
            _, ham_n, f_n, u0_n, _ = monotone_setup(n=n, t_f=0.5)
            stride = n // grid_c.n
            density = np.repeat(base.density, stride)  # piecewise-constant refine
            m0 = GridMeasure.from_unnormalized(grid, density)
            sol = solve_mfg_fixed_point(
                grid, ham_n, f_n, u0_n, m0, params,
                SolverSettings(tol=1e-11, max_iter=400), n_t=n_t,
            )
            assert sol.converged
            return sol.u[0][:: n // grid_c.n]

        u_l0 = start_value(32, 32)
        u_l1 = start_value(64, 64)
        u_l2 = start_value(128, 128)
        err0 = np.max(np.abs(u_l0 - u_l1))
        err1 = np.max(np.abs(u_l1 - u_l2))
        assert err0 / err1 >= 1.5

    def test_nonconvergence_reported(self):
        # strongly anti-monotone coupling with no damping cycles
        grid = Grid(1, 32)
        ham = HamiltonianSpec(grid, "quadratic")
        rho = cosine_mollifier(grid, [(1, 0.9)])
        f = CouplingSpec(grid, "linear-convolution", rho=rho, weight=-4.0)
        u0 = CouplingSpec(grid, "linear-convolution", rho=rho, weight=-4.0)
        params = ScenarioParams(sigma=0.5, t_f=1.5)
        rng = np.random.default_rng(7)
        sol = solve_mfg_fixed_point(
            grid, ham, f, u0, smooth_positive_measure(grid, rng), params,
            SolverSettings(tol=1e-12, max_iter=8),
        )
        assert not sol.converged
        assert sol.final_residual > 1e-12
        assert sol.picard_iterations == 8


class TestMonotonicityPropagation:
    def test_identical_measures_zero(self):
        grid, ham, f, u0, params = monotone_setup(n=32, t_f=0.5)
        m = smooth_positive_measure(grid, np.random.default_rng(8))
        assert monotonicity_propagation_check(
            grid, ham, f, u0, m, m, params
        ) == pytest.approx(0.0, abs=1e-12)

    def test_monotone_pairs_nonnegative(self):
        grid, ham, f, u0, params = monotone_setup(n=32, t_f=0.5)
        rng = np.random.default_rng(9)
        for _ in range(5):
            mu1 = smooth_positive_measure(grid, rng)
            mu2 = smooth_positive_measure(grid, rng)
            val = monotonicity_propagation_check(grid, ham, f, u0, mu1, mu2, params)
            assert val >= -1e-8

    def test_terminal_only_coupling_nonnegative(self):
        grid, ham, _, u0, params = monotone_setup(n=32, t_f=0.5)
        zero_f = CouplingSpec(grid, "zero")
        rng = np.random.default_rng(10)
        mu1 = smooth_positive_measure(grid, rng)
        mu2 = smooth_positive_measure(grid, rng)
        val = monotonicity_propagation_check(grid, ham, zero_f, u0, mu1, mu2, params)
        assert val >= -1e-8

    def test_anti_monotone_negative_pairing(self):
        grid = Grid(1, 32)
        ham = HamiltonianSpec(grid, "quadratic")
        rho = cosine_mollifier(grid, [(1, 0.8)])
        f = CouplingSpec(grid, "linear-convolution", rho=rho, weight=-1.5)
        u0 = CouplingSpec(grid, "linear-convolution", rho=rho, weight=-1.5)
        params = ScenarioParams(sigma=0.5, t_f=0.6)
        rng = np.random.default_rng(11)
        worst = np.inf
        for _ in range(3):
            mu1 = smooth_positive_measure(grid, rng, roughness=0.8)
            mu2 = smooth_positive_measure(grid, rng, roughness=0.8)
            worst = min(
                worst,
                monotonicity_propagation_check(
                    grid, ham, f, u0, mu1, mu2, params,
                    SolverSettings(theta=0.6, tol=1e-8, max_iter=400),
                ),
            )
        assert worst <= -1e-3
