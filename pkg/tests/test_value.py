import numpy as np
import pytest

from mfglab.mfg import SolverSettings
from mfglab.model import CouplingSpec, HamiltonianSpec, ScenarioParams
from mfglab.synthetic import StationaryManufactured, SyntheticValue, TrigProfile
from mfglab.torus import Grid, GridMeasure, pairing_values
from mfglab.value import (
    OracleError,
    ValueOracle,
    fit_regularity,
    flat_derivative,
    intrinsic_derivative,
    master_residual,
    stationary_master_residual,
    stability_regression,
    value_monotonicity_check,
)

from conftest import cosine_mollifier, monotone_setup, psi_shape, smooth_positive_measure, zero_setup


def make_oracle(n=16, t_f=0.4, coupling_scale=1.0, tol=1e-10, **kwargs):
    grid, ham, f, u0, _ = monotone_setup(n=n, t_f=t_f, coupling_scale=coupling_scale)
    params = ScenarioParams(sigma=0.5, t_f=t_f)
    return ValueOracle(
        grid, ham, f, u0, params,
        settings=SolverSettings(tol=tol, max_iter=300), **kwargs,
    )


def zero_oracle(n=16, t_f=0.4, **kwargs):
    grid, ham, zero, zero_u0, params = zero_setup(n=n, t_f=t_f)
    return ValueOracle(
        grid, ham, zero, zero_u0, params,
        settings=SolverSettings(tol=1e-11, max_iter=200), **kwargs,
    )


class TestOracleEvaluate:
    def test_t_zero_is_terminal_coupling(self, rng):
        oracle = make_oracle()
        m = smooth_positive_measure(oracle.grid, rng)
        expected = oracle.coupling_u0.evaluate(m.density)
        assert np.array_equal(oracle.evaluate(0.0, m), expected)
        assert oracle.stats["solves"] == 0

    def test_zero_scenario_zero_everywhere(self, rng):
        oracle = zero_oracle()
        m = smooth_positive_measure(oracle.grid, rng)
        for t in (0.0, 0.2, 0.4):
            assert np.all(oracle.evaluate(t, m) == 0.0)

    def test_memo_bitwise_identical(self, rng):
        oracle = make_oracle()
        m = smooth_positive_measure(oracle.grid, rng)
        first = oracle.evaluate(0.3, m)
        second = oracle.evaluate(0.3, m)
        assert np.array_equal(first, second)
        assert oracle.stats["solves"] == 1
        assert oracle.stats["memo_hits"] == 1

    def test_time_snapping(self):
        oracle = make_oracle()
        assert oracle.snap_time(0.0) == 0.0
        snapped = oracle.snap_time(oracle.dt_ref * 3.49)
        assert snapped == pytest.approx(3 * oracle.dt_ref)
        with pytest.raises(OracleError):
            oracle.snap_time(oracle.params.t_f + 1.0)


class TestFlatDerivative:
    def test_linear_functional_exact(self, rng):
        grid = Grid(1, 16)
        p = TrigProfile(grid, const=0.3, cos=((1, 0.7),), sin=((2, 0.4),))
        synth = SyntheticValue(grid, g=TrigProfile(grid, const=1.0), p=p)
        m = smooth_positive_measure(grid, rng)
        for eps in (0.3, 0.05, 0.004):
            fd = flat_derivative(synth, 0.0, m, eps)
            expected = p.values - pairing_values(grid, p.values, m.density)
            assert np.max(np.abs(fd.matrix - expected[None, :])) < 1e-10
            assert fd.normalization_defect() < 1e-12

    def test_quadratic_functional_first_order_and_richardson(self, rng):
        grid = Grid(1, 16)
        q = TrigProfile(grid, const=1.0, cos=((1, 0.5),))
        synth = SyntheticValue(grid, q=q)
        m = smooth_positive_measure(grid, rng)
        exact = synth.flat_kernel(m)
        eps = 0.1
        d_eps = flat_derivative(synth, 0.0, m, eps).matrix
        d_half = flat_derivative(synth, 0.0, m, eps / 2).matrix
        err_eps = np.max(np.abs(d_eps - exact))
        err_half = np.max(np.abs(d_half - exact))
        assert err_eps == pytest.approx(2 * err_half, rel=1e-6)  # exactly O(eps)
        richardson = 2 * d_half - d_eps
        assert np.max(np.abs(richardson - exact)) < 1e-12

    def test_oracle_backed_matches_convolution_kernel(self, rng):
        # linear-convolution terminal coupling at t=0 has measure derivative
        # rho(x - y), recentered
        oracle = make_oracle()
        grid = oracle.grid
        m = smooth_positive_measure(grid, rng)
        fd = flat_derivative(oracle, 0.0, m, eps=1e-3)
        kernel = oracle.coupling_u0.flat_derivative_kernel(m)
        kernel = kernel - (grid.cell_volume * kernel @ m.density)[:, None]
        assert np.max(np.abs(fd.matrix - kernel)) < 1e-9


class TestIntrinsicDerivative:
    def test_linear_functional_gradient(self, rng):
        grid = Grid(1, 64)
        p = TrigProfile(grid, cos=((1, 0.8),))
        synth = SyntheticValue(grid, g=TrigProfile(grid, const=1.0), p=p)
        m = smooth_positive_measure(grid, rng)
        fd = flat_derivative(synth, 0.0, m, eps=0.01)
        dm = intrinsic_derivative(fd)
        exact = p.deriv(1)
        err = np.max(np.abs(dm[0] - exact[None, :]))
        assert err <= (2 * np.pi) ** 3 * 0.8 * grid.h**2 / 6 + 1e-9

    def test_constant_in_y_column_zero_field(self):
        grid = Grid(1, 16)
        fd_matrix = np.tile(np.linspace(0, 1, grid.npoints)[:, None], (1, grid.npoints))
        from mfglab.value import FlatDerivative

        fd = FlatDerivative(
            grid=grid, t=0.0, base=GridMeasure.uniform(grid),
            matrix=fd_matrix, eps=0.1,
        )
        assert np.max(np.abs(intrinsic_derivative(fd))) == 0.0

    def test_pushforward_perturbation_oracle(self, rng):
        # displacement form: [U((Id + eps phi)# m) - U(m)] / eps against
        # ⟨D_m U · phi, m⟩ for a smooth synthetic functional; the displaced
        # pairing is computed exactly from the closed-form profile
        grid = Grid(1, 64)
        p = TrigProfile(grid, cos=((1, 0.6),), sin=((2, 0.2),))
        synth = SyntheticValue(grid, g=TrigProfile(grid, const=1.0), p=p)
        m = smooth_positive_measure(grid, rng)
        phi = 0.5 + 0.3 * np.sin(2 * np.pi * grid.positions())
        eps = 1e-4

        cell_mass = grid.cell_volume * m.density
        displaced_pairing = float(cell_mass @ p.at(grid.positions() + eps * phi))
        base_pairing = float(cell_mass @ p.values)
        quotient = (displaced_pairing - base_pairing) / eps

        fd = flat_derivative(synth, 0.0, m, eps=0.01)
        dm = intrinsic_derivative(fd)[0]
        predicted = float(grid.cell_volume * (dm @ (phi * m.density))[0])
        exact = float(grid.cell_volume * (p.deriv(1) * phi) @ m.density)
        bound = 5 * eps + (2 * np.pi) ** 3 * grid.h**2  # O(eps) + O(h^2)
        assert abs(quotient - exact) < 5 * eps + 1e-10
        assert abs(predicted - exact) < bound
        assert abs(quotient - predicted) < bound


class TestMasterResidual:
    def test_zero_scenario_residual_zero(self, rng):
        oracle = zero_oracle()
        m = smooth_positive_measure(oracle.grid, rng)
        res = master_residual(oracle, 0.2, m, eps=0.05)
        assert np.max(np.abs(res)) <= 1e-10

    def test_time_bounds_enforced(self, rng):
        oracle = zero_oracle()
        m = smooth_positive_measure(oracle.grid, rng)
        with pytest.raises(OracleError):
            master_residual(oracle, 0.0, m, eps=0.05)

    def test_smooth_scenario_refinement(self, rng):
        # halving (h, dt, eps) should cut the residual by >= 1.5
        sups = []
        for n, eps in ((8, 0.16), (16, 0.08)):
            grid, ham, f, u0, _ = monotone_setup(n=n, t_f=0.4, coupling_scale=0.5)
            params = ScenarioParams(sigma=0.5, t_f=0.4)
            oracle = ValueOracle(
                grid, ham, f, u0, params,
                settings=SolverSettings(tol=1e-11, max_iter=300),
                n_t_ref=4 * n,
            )
            m = GridMeasure.from_unnormalized(
                grid, np.exp(0.3 * np.cos(2 * np.pi * grid.positions()))
            )
            res = master_residual(oracle, 0.2, m, eps=eps)
            sups.append(np.max(np.abs(res)))
        assert sups[0] / sups[1] >= 1.5


class TestStationaryResidual:
    def test_manufactured_solution_zero_residual(self, rng):
        grid = Grid(1, 32)
        ham = HamiltonianSpec(grid, "quadratic")
        rho = cosine_mollifier(grid, [(1, 0.5)])
        ev = StationaryManufactured(
            grid=grid, ham=ham, r=1.0, sigma=0.5, rho=rho,
            base=0.3 * np.sin(2 * np.pi * grid.positions()),
        )
        for _ in range(3):
            m = smooth_positive_measure(grid, rng)
            res = stationary_master_residual(ev, m)
            assert np.max(np.abs(res)) < 1e-12

    def test_zero_discounted_fixed_point(self):
        grid = Grid(1, 16)
        ev = StationaryManufactured(
            grid=grid, ham=HamiltonianSpec(grid, "quadratic"),
            r=1.0, sigma=0.5, rho=cosine_mollifier(grid, [(1, 0.5)]), weight=0.0,
        )
        res = stationary_master_residual(ev, GridMeasure.uniform(grid))
        assert np.max(np.abs(res)) == 0.0


class TestValueMonotonicity:
    def test_equal_measures(self, rng):
        oracle = make_oracle()
        m = smooth_positive_measure(oracle.grid, rng)
        rep = value_monotonicity_check(oracle, 0.2, [(m, m)])
        assert rep["min_pairing"] == 0.0

    def test_monotone_scenario_nonnegative(self, rng):
        oracle = make_oracle()
        pairs = [
            (smooth_positive_measure(oracle.grid, rng), smooth_positive_measure(oracle.grid, rng))
            for _ in range(5)
        ]
        rep = value_monotonicity_check(oracle, 0.4, pairs)
        assert rep["min_pairing"] >= -1e-8

    def test_anti_monotone_negative(self, rng):
        grid = Grid(1, 16)
        ham = HamiltonianSpec(grid, "quadratic")
        rho = cosine_mollifier(grid, [(1, 0.8)])
        f = CouplingSpec(grid, "linear-convolution", rho=rho, weight=-1.5)
        u0 = CouplingSpec(grid, "linear-convolution", rho=rho, weight=-1.5)
        params = ScenarioParams(sigma=0.5, t_f=0.5)
        oracle = ValueOracle(
            grid, ham, f, u0, params,
            settings=SolverSettings(theta=0.6, tol=1e-9, max_iter=400),
        )
        pairs = [
            (smooth_positive_measure(grid, rng, roughness=0.8),
             smooth_positive_measure(grid, rng, roughness=0.8))
            for _ in range(4)
        ]
        found = min(
            value_monotonicity_check(oracle, t, pairs)["min_pairing"]
            for t in (0.25, 0.5)
        )
        assert found < -1e-3


class TestFitRegularity:
    def test_flat_scenario_flagged(self, rng):
        # m-independent couplings: U constant in the measure argument
        grid = Grid(1, 16)
        ham = HamiltonianSpec(grid, "quadratic")
        x = grid.positions()
        f = CouplingSpec(grid, "zero", offset=0.3 * np.cos(2 * np.pi * x))
        u0 = CouplingSpec(grid, "zero", offset=0.2 * np.sin(2 * np.pi * x))
        oracle = ValueOracle(
            grid, ham, f, u0, ScenarioParams(sigma=0.5, t_f=0.4),
            settings=SolverSettings(tol=1e-11, max_iter=100),
        )
        rep = fit_regularity(oracle, sample_count=20, seed=0)
        assert rep["flat"]
        assert rep["lip_const_hat"] == 0.0

    def test_lipschitz_scenario_exponents(self):
        oracle = make_oracle(n=16, t_f=0.4)
        rep = fit_regularity(oracle, sample_count=25, seed=1)
        assert not rep["flat"]
        assert rep["holder_gamma_hat"] >= 0.9
        assert rep["time_exponent_hat"] >= 0.45

    def test_sample_count_floor(self):
        oracle = make_oracle()
        with pytest.raises(OracleError):
            fit_regularity(oracle, sample_count=5)


class TestStabilityRegression:
    def test_identical_evaluators_zero(self, rng):
        oracle = make_oracle()
        m = smooth_positive_measure(oracle.grid, rng)
        rep = stability_regression([oracle, oracle], [(0.2, m)])
        assert rep["diffs"] == [0.0]
        assert rep["cauchy_decreasing"]

    def test_mollified_widths_decrease(self, rng):
        from mfglab.model import mollify_coupling

        grid = Grid(1, 16)
        ham = HamiltonianSpec(grid, "quadratic")
        rho = cosine_mollifier(grid, [(1, 0.5)])
        base_f = CouplingSpec(
            grid, "local-through-mollifier", rho=rho, psi=psi_shape("cubic"),
        )
        u0 = CouplingSpec(grid, "linear-convolution", rho=rho)
        params = ScenarioParams(sigma=0.5, t_f=0.3)
        settings = SolverSettings(tol=1e-10, max_iter=200)

        def oracle_for(width):
            f = mollify_coupling(base_f, width) if width else base_f
            return ValueOracle(grid, ham, f, u0, params, settings=settings)

        probes = [
            (0.3, smooth_positive_measure(grid, rng)),
            (0.15, smooth_positive_measure(grid, rng)),
        ]
        evaluators = [oracle_for(w) for w in (0.2, 0.1, 0.05)]
        rep = stability_regression(evaluators, probes)
        assert rep["cauchy_decreasing"]
        assert rep["diffs"][0] > rep["diffs"][1] > 0

        # the limit sits within solver tolerance of the unmollified solve
        tight = stability_regression([evaluators[-1], oracle_for(None)], probes)
        assert tight["diffs"][0] <= 10 * rep["diffs"][1]


class TestPersistentCache:
    def test_roundtrip_byte_identical(self, tmp_path, rng):
        cache = str(tmp_path / "memo.bin")
        oracle = make_oracle(cache_path=cache)
        m = smooth_positive_measure(oracle.grid, rng)
        values = oracle.evaluate(0.3, m)
        assert oracle.stats["solves"] == 1

        reloaded = make_oracle(cache_path=cache)
        assert reloaded.stats["cache_loads"] >= 1
        again = reloaded.evaluate(0.3, m)
        assert reloaded.stats["solves"] == 0
        assert np.array_equal(values, again)
        assert values.tobytes() == again.tobytes()

    def test_stale_hash_ignored(self, tmp_path, rng):
        cache = str(tmp_path / "memo.bin")
        oracle = make_oracle(cache_path=cache)
        m = smooth_positive_measure(oracle.grid, rng)
        oracle.evaluate(0.3, m)
        other = make_oracle(coupling_scale=0.7, cache_path=cache)
        assert other.stats["cache_loads"] == 0
        other.evaluate(0.3, m)
        assert other.stats["solves"] == 1
