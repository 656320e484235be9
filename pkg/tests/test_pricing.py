import numpy as np
import pytest

from bs_oracle import bs_call
from itoarb import pricing
from itoarb.pricing import (
    CallSpec,
    TransformGrid,
    bss_consistency,
    duhamel_integral,
    heat_kernel,
    nonlinear_f,
    nonlinear_f_gradient,
    price_discounted,
    price_undiscounted,
    solve_perturbation,
    source_coefficient,
    u0,
    u0_and_prime,
    u0_by_quadrature,
    u0_prime,
)

SPEC = CallSpec(strike=100.0, maturity=1.0, sigma=0.2, rho=0.0)

# first-order correction at (tau=0.02, y=0) for the strike-free constant
# 2/sigma^2 = 50: frozen from the quadrature's own refinement ladder
# (0.5493261 at 48x161 through 0.5493265 at 512x1281)
U1_PROBE = 0.549326


def u0_second(tau, y):
    # y-curvature of the closed form; the Gaussian terms recombine
    return u0(tau, y) / 4.0 + np.exp(-(y**2) / (4 * tau)) / (2 * np.sqrt(np.pi * tau))


@pytest.fixture(scope="module")
def sol_rho_002():
    spec = CallSpec(100.0, 1.0, 0.2, 0.02)
    grid = TransformGrid.for_call(
        spec, n_tau=24, n_y=65, y_half=0.45, n_time_quad=32, n_space_quad=121
    )
    return solve_perturbation(spec, grid)


# ---------------------------------------------------------------- heat kernel


def test_heat_kernel_point_value_and_symmetry():
    assert heat_kernel(1.0, 0.0, 0.0, 0.0) == pytest.approx(1 / (2 * np.sqrt(np.pi)))
    rng = np.random.default_rng(0)
    y, z = rng.normal(size=2)
    assert heat_kernel(0.7, y, 0.2, z) == pytest.approx(heat_kernel(0.7, z, 0.2, y))


def test_heat_kernel_domain_error():
    with pytest.raises(ValueError, match="tau > s"):
        heat_kernel(0.1, 0.0, 0.1, 0.0)


def test_heat_kernel_normalization():
    tau = 0.02
    z = np.linspace(-10 * np.sqrt(2 * tau), 10 * np.sqrt(2 * tau), 4001)
    total = np.trapezoid(heat_kernel(tau, 0.0, 0.0, z), z)
    assert abs(total - 1.0) < 1e-8


def test_heat_kernel_semigroup():
    tau, s, z0 = 0.02, 0.008, 0.1
    z = np.arange(-0.75, 0.75, 5e-4)
    for y in (-0.1, 0.0, 0.2):
        composed = np.trapezoid(
            heat_kernel(tau, y, s, z) * heat_kernel(s, z, 0.0, z0), z
        )
        assert abs(composed - heat_kernel(tau, y, 0.0, z0)) < 1e-6


# ---------------------------------------------------------------- u0


def test_u0_initial_condition():
    y = np.linspace(-2, 2, 41)
    np.testing.assert_allclose(
        u0(0.0, y), np.maximum(np.exp(y / 2) - np.exp(-y / 2), 0.0)
    )


def test_u0_vanishes_far_otm():
    assert u0(0.05, -8.0) < 1e-12
    assert u0(0.05, -30.0) == pytest.approx(0.0, abs=1e-30)


def test_u0_closed_form_matches_quadrature():
    # the closed form must be validated against the defining integral
    for y in (-0.5, 0.0, 0.5):
        assert abs(float(u0(0.02, y)) - u0_by_quadrature(0.02, y)) < 1e-7


def test_u0_prime_matches_finite_differences():
    h = 1e-6
    for y in (-0.6, -0.1, 0.0, 0.4, 1.1):
        fd = (float(u0(0.02, y + h)) - float(u0(0.02, y - h))) / (2 * h)
        assert float(u0_prime(0.02, y)) == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_u0_solves_heat_equation():
    tau, y, h = 0.03, 0.15, 1e-5
    lhs = (float(u0(tau + h, y)) - float(u0(tau - h, y))) / (2 * h)
    rhs = (float(u0(tau, y + h)) - 2 * float(u0(tau, y)) + float(u0(tau, y - h))) / h**2
    assert lhs == pytest.approx(rhs, rel=1e-4)


# ---------------------------------------------------------------- source term


def test_source_values():
    coeff = source_coefficient(SPEC)
    assert coeff == pytest.approx(50.0)
    assert source_coefficient(SPEC, pricing.SOURCE_STRIKE_SCALED) == pytest.approx(5000.0)
    assert nonlinear_f(0.0, 0.0, coeff) == 0.0
    assert nonlinear_f(1.0, 0.0, coeff) == pytest.approx(coeff * np.sqrt(5) / 2)
    assert nonlinear_f_gradient(0.0, 0.0, coeff) == (0.0, 0.0)


def test_source_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    coeff = 50.0
    h = 1e-7
    for _ in range(20):
        v1, v2 = rng.normal(size=2)
        g1, g2 = nonlinear_f_gradient(v1, v2, coeff)
        fd1 = (nonlinear_f(v1 + h, v2, coeff) - nonlinear_f(v1 - h, v2, coeff)) / (2 * h)
        fd2 = (nonlinear_f(v1, v2 + h, coeff) - nonlinear_f(v1, v2 - h, coeff)) / (2 * h)
        assert g1 == pytest.approx(fd1, rel=1e-6)
        assert g2 == pytest.approx(fd2, rel=1e-6)


def test_source_positive_definite_form():
    rng = np.random.default_rng(2)
    v = rng.normal(size=(1000, 2))
    vals = nonlinear_f(v[:, 0], v[:, 1], 1.0)
    assert np.all(vals >= 0)
    assert np.all(vals[np.any(v != 0, axis=1)] > 0)


# ---------------------------------------------------------------- Duhamel


def test_duhamel_zero_source():
    out = duhamel_integral(lambda s, z: np.zeros_like(z), [0.01, 0.02], [0.0, 0.5])
    np.testing.assert_allclose(out, 0.0)


def test_duhamel_linear_stub_first_order():
    # for a source linear in (u0, u0') the kernel's semigroup property gives
    # the integral in closed form: tau * (a u0 + b u0')
    a, b = 0.7, 0.4
    tau = 0.02
    ys = np.array([-0.2, 0.0, 0.3])

    def src(s, z):
        v, vp = u0_and_prime(s, z)
        return a * v + b * vp

    got = duhamel_integral(src, [tau], ys, 96, 321)[0]
    expected = tau * (a * u0(tau, ys) + b * u0_prime(tau, ys))
    np.testing.assert_allclose(got, expected, rtol=1e-4)


def test_duhamel_linear_stub_second_order():
    # second application with constant partials (a, b): (tau^2/2) *
    # (a^2 u0 + 2ab u0' + b^2 u0'')
    a, b = 0.7, 0.4
    tau = 0.02
    ys = np.array([-0.2, 0.0, 0.3])

    def src(s, z):
        v, vp = u0_and_prime(s, z)
        first = s * (a * v + b * vp)
        first_prime = s * (a * vp + b * u0_second(s, z))
        return a * first + b * first_prime

    got = duhamel_integral(src, [tau], ys, 96, 321)[0]
    expected = 0.5 * tau**2 * (
        a**2 * u0(tau, ys) + 2 * a * b * u0_prime(tau, ys) + b**2 * u0_second(tau, ys)
    )
    np.testing.assert_allclose(got, expected, rtol=2e-4)


def test_u1_probe_value_and_doubling_stability():
    spec = CallSpec(100.0, 1.0, 0.2, 0.02)
    grid = TransformGrid.for_call(spec, n_tau=16, n_y=33, y_half=0.4)
    base = pricing.compute_u1(spec, grid, taus=[0.02], ys=[0.0],
                              n_time_quad=48, n_space_quad=161)[0, 0]
    fine = pricing.compute_u1(spec, grid, taus=[0.02], ys=[0.0],
                              n_time_quad=96, n_space_quad=321)[0, 0]
    assert base == pytest.approx(U1_PROBE, abs=2e-5)
    assert fine == pytest.approx(U1_PROBE, abs=2e-5)
    # stable to four significant digits under quadrature doubling
    assert abs(base - fine) / fine < 1e-4


def test_u1_is_rho_independent(sol_rho_002):
    spec_b = CallSpec(100.0, 1.0, 0.2, 0.11)
    grid = sol_rho_002.grid
    sol_b = solve_perturbation(spec_b, grid)
    np.testing.assert_array_equal(sol_rho_002.u1_grid, sol_b.u1_grid)
    np.testing.assert_array_equal(sol_rho_002.u2_grid, sol_b.u2_grid)


def test_u1_vanishes_at_small_tau(sol_rho_002):
    sol = sol_rho_002
    tau1 = sol.tau_axis[1]
    assert np.all(sol.u1_grid[0] == 0.0)
    assert np.max(sol.u1_grid[1]) < 100.0 * tau1  # no more than sup|f| * tau


def test_u1_nonnegative_u0_nonnegative(sol_rho_002):
    assert np.all(sol_rho_002.u0_grid >= 0.0)
    assert np.all(sol_rho_002.u1_grid >= 0.0)


def test_u2_zero_when_u1_zero():
    # degenerate first-order table: the second-order integrand vanishes
    spec = CallSpec(100.0, 1.0, 0.2, 0.02)
    grid = TransformGrid.for_call(
        spec, n_tau=16, n_y=33, y_half=0.3, n_time_quad=16, n_space_quad=61
    )
    tau_axis = np.concatenate([[0.0], grid.tau_nodes])
    y_ext = np.linspace(-2.5, 2.5, 401)
    zero_u1 = np.zeros((tau_axis.size, y_ext.size))
    u2 = pricing.compute_u2(spec, grid, zero_u1, tau_axis, y_ext)
    np.testing.assert_array_equal(u2, 0.0)


def test_u2_probe_doubling_stability():
    # the second-order correction is stable to three significant digits
    # under grid-and-quadrature doubling
    spec = CallSpec(100.0, 1.0, 0.2, 0.02)
    vals = []
    for n_tau, n_y, n_w, n_xi in ((16, 33, 24, 81), (32, 65, 48, 161)):
        grid = TransformGrid.for_call(
            spec, n_tau=n_tau, n_y=n_y, y_half=0.3,
            n_time_quad=n_w, n_space_quad=n_xi,
        )
        sol = solve_perturbation(spec, grid)
        vals.append(float(sol.correction_values(0.02, 0.0)[1]))
    # agreement to three significant digits
    assert abs(vals[0] - vals[1]) / abs(vals[1]) < 5e-3
    assert f"{vals[0]:.3g}" == f"{vals[1]:.3g}"


def test_quadrature_self_check():
    spec = CallSpec(100.0, 1.0, 0.2, 0.02)
    grid = TransformGrid.for_call(
        spec, n_tau=16, n_y=33, y_half=0.3, n_time_quad=24, n_space_quad=81
    )
    sol = solve_perturbation(spec, grid, quadrature_tolerance=1e-4)
    assert sol.diagnostics["quadrature_refinement_change"] < 1e-4
    # an absurdly tight bound must fail with the achieved tolerance reported
    with pytest.raises(RuntimeError, match="achieved relative change"):
        solve_perturbation(spec, grid, quadrature_tolerance=1e-16)


def test_correction_homogeneity_in_constant():
    # U1 is linear and U2 quadratic in the source constant; the comparison
    # tooling relies on this to rescale between candidate constants
    spec = CallSpec(100.0, 1.0, 0.2, 0.02)
    grid = TransformGrid.for_call(
        spec, n_tau=16, n_y=33, y_half=0.3, n_time_quad=16, n_space_quad=61
    )
    a = solve_perturbation(spec, grid, convention=pricing.SOURCE_STRIKE_FREE,
                           compute_corrections=True)
    b = solve_perturbation(spec, grid, convention=pricing.SOURCE_STRIKE_SCALED,
                           compute_corrections=True)
    k = spec.strike
    np.testing.assert_allclose(b.u1_grid, k * a.u1_grid, rtol=1e-12)
    np.testing.assert_allclose(b.u2_grid, k * k * a.u2_grid, rtol=1e-12)


# ---------------------------------------------------------------- prices


def test_price_classical_limit_exact():
    sol = solve_perturbation(SPEC)
    got = price_discounted(sol, 100.0, 0.0)
    assert got == pytest.approx(bs_call(100.0, 100.0, 0.2, 1.0), abs=1e-10)
    lattice_x = np.array([85.0, 95.0, 100.0, 110.0, 120.0])
    got = price_discounted(sol, lattice_x, np.zeros(5))
    np.testing.assert_allclose(got, bs_call(lattice_x, 100.0, 0.2, 1.0), rtol=1e-10)


def test_price_terminal_payoff_exact():
    sol = solve_perturbation(SPEC)
    x = np.array([50.0, 99.999, 100.0, 101.5, 180.0])
    got = price_discounted(sol, x, np.full(5, SPEC.maturity))
    np.testing.assert_array_equal(got, np.maximum(x - 100.0, 0.0))


def test_price_deep_otm_small():
    sol = solve_perturbation(SPEC)
    assert price_discounted(sol, 100 * np.exp(-0.79), 0.5) < 1e-3


def test_price_decreases_with_rho(sol_rho_002):
    # positive arbitrage measure lowers the call price (the source term has
    # a negative sign in the canonical variables)
    sol0 = solve_perturbation(SPEC)
    x = np.array([90.0, 100.0, 115.0])
    p0 = price_discounted(sol0, x, 0.0)
    p2 = price_discounted(sol_rho_002, x, 0.0)
    assert np.all(p2 < p0)


def test_price_guards():
    sol = solve_perturbation(SPEC)
    with pytest.raises(ValueError, match="coverage"):
        price_discounted(sol, 100 * np.exp(0.9), 0.0)
    with pytest.raises(ValueError, match="positive"):
        price_discounted(sol, -1.0, 0.0)
    with pytest.raises(ValueError, match="maturity"):
        price_discounted(sol, 100.0, 1.5)
    # a solution built on a short tau grid cannot price far from expiry
    short_grid = TransformGrid(
        np.linspace(1e-4, 0.01, 20), np.linspace(-0.4, 0.4, 33)
    )
    short = solve_perturbation(SPEC, short_grid)
    with pytest.raises(ValueError, match="tau grid"):
        price_discounted(short, 100.0, 0.0)


def test_price_undiscounted_zero_rate_identity():
    sol = solve_perturbation(SPEC)
    x = np.array([90.0, 100.0, 110.0])
    np.testing.assert_array_equal(
        price_undiscounted(sol, x, 0.25), price_discounted(sol, x, 0.25)
    )


def test_price_undiscounted_matches_rate_oracle():
    spec = CallSpec(100.0, 1.0, 0.2, 0.0, rate=0.05)
    sol = solve_perturbation(spec)
    s = np.array([95.0, 100.0, 105.0, 112.0])
    got = price_undiscounted(sol, s, 0.0)
    # strike on the discounted value = growing strike K e^{rT} in cash terms
    expected = bs_call(s, 100.0 * np.exp(0.05), 0.2, 1.0, rate=0.05)
    np.testing.assert_allclose(got, expected, rtol=1e-10)


def test_price_undiscounted_terminal_payoff():
    spec = CallSpec(100.0, 1.0, 0.2, 0.0, rate=0.05)
    sol = solve_perturbation(spec)
    s = np.array([80.0, 105.0, 130.0])
    got = price_undiscounted(sol, s, 1.0)
    np.testing.assert_allclose(
        got, np.maximum(s - 100.0 * np.exp(0.05), 0.0), atol=1e-12
    )


def test_rho_warning():
    with pytest.warns(UserWarning, match="rho"):
        CallSpec(100.0, 2.0, 0.2, rho=0.3)


# ---------------------------------------------------------------- grids


def test_transform_grid_validation():
    with pytest.raises(ValueError, match="16 nodes"):
        TransformGrid(np.linspace(0.001, 0.02, 8), np.linspace(-1, 1, 33))
    with pytest.raises(ValueError, match="bracket zero"):
        TransformGrid(np.linspace(0.001, 0.02, 20), np.linspace(0.1, 1, 33))
    with pytest.raises(ValueError, match="increasing"):
        TransformGrid(np.zeros(20), np.linspace(-1, 1, 33))
    with pytest.raises(ValueError, match="uniform"):
        TransformGrid(np.linspace(0.001, 0.02, 20), np.linspace(-1, 1, 33) ** 3)
    with pytest.raises(ValueError, match="unsafe"):
        TransformGrid(
            np.linspace(0.001, 0.02, 20), np.linspace(-1, 1, 33), z_half_width_sds=4
        )


def test_tau_grid_must_fit_call():
    spec = CallSpec(100.0, 0.25, 0.2, 0.0)
    grid = TransformGrid(np.linspace(0.001, 0.02, 20), np.linspace(-1, 1, 33))
    with pytest.raises(ValueError, match="exceeds"):
        solve_perturbation(spec, grid)  # tau_max = 0.005 < 0.02


def test_solution_determinism():
    spec = CallSpec(100.0, 1.0, 0.2, 0.01)
    grid = TransformGrid.for_call(
        spec, n_tau=16, n_y=33, y_half=0.3, n_time_quad=16, n_space_quad=61
    )
    a = solve_perturbation(spec, grid)
    b = solve_perturbation(spec, grid)
    np.testing.assert_array_equal(a.u1_grid, b.u1_grid)
    np.testing.assert_array_equal(a.u2_grid, b.u2_grid)


# ---------------------------------------------------------------- system check


def test_bss_consistency_classical_surface():
    spec = CallSpec(100.0, 1.0, 0.2, 0.0)
    t_nodes = np.linspace(0.0, 0.8, 41)
    x_nodes = np.exp(np.linspace(np.log(75), np.log(135), 61))
    surf = np.array([bs_call(x_nodes, 100.0, 0.2, 1.0 - t) for t in t_nodes])
    rep = bss_consistency(t_nodes, x_nodes, surf, spec, floor=1e-2)
    assert rep.max_abs_dev < 5e-3
    assert rep.mean_abs_dev < 5e-4


def test_bss_consistency_alpha_free():
    spec = CallSpec(100.0, 1.0, 0.2, 0.0)
    t_nodes = np.linspace(0.0, 0.8, 17)
    x_nodes = np.exp(np.linspace(np.log(80), np.log(125), 31))
    surf = np.array([bs_call(x_nodes, 100.0, 0.2, 1.0 - t) for t in t_nodes])
    a = bss_consistency(t_nodes, x_nodes, surf, spec, alpha=0.0, floor=1e-2)
    b = bss_consistency(t_nodes, x_nodes, surf, spec, alpha=0.37, floor=1e-2)
    np.testing.assert_allclose(
        a.implied_rho[a.mask], b.implied_rho[b.mask], atol=1e-10
    )


def test_bss_consistency_perturbation_surface(sol_rho_002):
    spec = sol_rho_002.spec
    t_nodes = np.linspace(0.0, 0.8, 33)
    x_nodes = np.exp(np.linspace(np.log(82), np.log(122), 41))
    surf = pricing.surface(sol_rho_002, t_nodes, x_nodes)
    rep = bss_consistency(t_nodes, x_nodes, surf, spec, floor=1e-2)
    assert rep.rho_input == 0.02
    assert rep.mean_abs_dev < 1e-3
    assert rep.max_abs_dev < 8e-3


def test_bss_deep_itm_loading_tends_to_sigma():
    # Phi ~ X far in the money, so the implied loading falls toward sigma
    spec = CallSpec(100.0, 1.0, 0.2, 0.0)
    eps = 1e-5
    vals = []
    for m in (3.0, 10.0, 1000.0):
        x = 100.0 * m
        phi = bs_call(x, 100.0, 0.2, 1.0)
        dphi = (bs_call(x * (1 + eps), 100.0, 0.2, 1.0)
                - bs_call(x * (1 - eps), 100.0, 0.2, 1.0)) / (2 * x * eps)
        vals.append(spec.sigma * x * dphi / phi)
    assert vals[0] > vals[1] > vals[2] > spec.sigma
    assert vals[2] == pytest.approx(spec.sigma, rel=2e-3)
