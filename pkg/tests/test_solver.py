import numpy as np
import pytest

from dualplast.checks import (gradient_fd_errors, hessian_fd_errors, mixed_iterate,
                              small_plate)
from dualplast.fem import Discretization, DofMap, Mesh
from dualplast.solver import (ConvergenceError, NewtonConfig, ReducedDual, contraction_constants,
                              is_quadratic_tail, observed_order)

from conftest import E, NU


def one_element(model):
    """Unit square in uniaxial tension along y; free DOFs are the right-hand x displacements."""
    mesh = Mesh([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 1, 2, 3]])
    # prescribed order follows the sorted DOF numbers: 0x 0y 1y 2y 3x 3y
    dm = DofMap(4, [0, 1, 3, 5, 6, 7])
    return ReducedDual(Discretization(mesh, dm), model)


def uniaxial(delta):
    return np.array([0.0, 0.0, 0.0, delta, 0.0, delta])


# -- evaluation -----------------------------------------------------------------

def test_zero_state_zero_objective(model):
    pb = one_element(model)
    ev = pb.evaluate(np.zeros(2), np.zeros(6))
    assert ev.objective == 0.0
    np.testing.assert_array_equal(ev.gradient, 0.0)


def test_one_element_elastic_closed_form(model):
    pb = one_element(model)
    d = 1e-3
    mu_exact = np.array([-NU * d, -NU * d])
    ev = pb.evaluate(mu_exact, uniaxial(d))
    np.testing.assert_allclose(ev.gradient, 0.0, atol=1e-15)
    np.testing.assert_allclose(ev.results.sigma, np.tile([0.0, E * d, 0.0], (4, 1)), atol=1e-14)
    # at equilibrium the reduced dual equals the stored energy of the uniaxial state
    assert ev.objective == pytest.approx(0.5 * E * d * d, rel=1e-12)
    assert pb.primal_objective(ev.results, uniaxial(d)) == pytest.approx(-0.5 * E * d * d, rel=1e-12)


def test_elastic_objective_is_exact_quadratic(model):
    pb, mu_prsc = small_plate(2, model)
    mu_prsc = mu_prsc * 1e-3  # stays elastic
    rng = np.random.default_rng(0)
    ev0 = pb.evaluate(np.zeros(pb.disc.dofmap.n_free), mu_prsc)
    assert not ev0.results.yielded.any()
    K = ev0.hessian
    for _ in range(3):
        mu = rng.normal(size=K.shape[0]) * 1e-5
        f = pb.objective(mu, mu_prsc)
        q = ev0.objective + ev0.gradient @ mu + 0.5 * mu @ (K @ mu)
        assert f == pytest.approx(q, rel=1e-10, abs=1e-16)


def test_gradient_and_hessian_by_finite_differences():
    pb, mu_prsc = small_plate(2)
    mu, ev = mixed_iterate(pb, mu_prsc)
    y = ev.results.yielded
    assert y.any() and not y.all()
    rng = np.random.default_rng(7)
    dirs = [v / np.linalg.norm(v) for v in rng.normal(size=(4, len(mu)))]
    assert max(gradient_fd_errors(pb, mu, mu_prsc, dirs)) <= 1e-6
    assert max(hessian_fd_errors(pb, mu, mu_prsc, dirs)) <= 1e-5


def test_rejects_three_dimensional_model(model3d):
    mesh = Mesh([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 1, 2, 3]])
    with pytest.raises(ValueError):
        ReducedDual(Discretization(mesh, DofMap(4, [0, 1])), model3d)


# -- Newton -----------------------------------------------------------------------

def test_elastic_newton_single_full_step(model):
    pb = one_element(model)
    mu, ev, rep = pb.newton_solve(uniaxial(1e-3), cfg=NewtonConfig(tol=1e-14))
    assert rep.converged and rep.iterations == 2
    assert rep.records[0].step_length == 1.0 and rep.records[0].backtracks == 0
    assert rep.records[-1].step_length is None
    np.testing.assert_allclose(mu, [-NU * 1e-3] * 2, rtol=1e-12)


def test_external_load_equilibrium(model):
    pb, _ = small_plate(2, model)
    rng = np.random.default_rng(3)
    pb.p = rng.normal(size=pb.disc.dofmap.n_free) * 1e-4
    zero = np.zeros(pb.disc.dofmap.n_prescribed)
    mu, ev, rep = pb.newton_solve(zero, cfg=NewtonConfig(tol=1e-13))
    assert rep.converged and not ev.results.yielded.any()
    K = pb.evaluate(mu, zero).hessian
    np.testing.assert_allclose(K @ mu, pb.p, atol=1e-12)


@pytest.fixture(scope="module")
def plastic_solve():
    pb, mu_prsc = small_plate(3)
    steps = []
    mu, ev, rep = pb.newton_solve(mu_prsc, on_iteration=lambda k, e, d: steps.append((k, e, d)))
    return pb, mu_prsc, mu, ev, rep, steps


def test_plastic_increment_converges(plastic_solve):
    pb, mu_prsc, mu, ev, rep, steps = plastic_solve
    assert rep.converged
    assert rep.residuals[-1] <= 1e-9
    assert ev.results.yielded.any()
    assert max(r.backtracks for r in rep.records[:-1]) <= 2
    assert [r.iteration for r in rep.records] == list(range(1, rep.iterations + 1))
    assert [k for k, _, _ in steps] == list(range(1, rep.iterations))


def test_objective_decreases_monotonically(plastic_solve):
    rep = plastic_solve[4]
    obj = [r.objective for r in rep.records]
    for a, b, rec in zip(obj, obj[1:], rep.records):
        assert b <= a or rec.noise_step


def test_newton_directions_descend(plastic_solve):
    for _, ev, dmu in plastic_solve[5]:
        assert ev.gradient @ dmu < 0


def test_duality_gap_vanishes(plastic_solve):
    pb, mu_prsc, mu, ev, rep, _ = plastic_solve
    assert abs(pb.duality_gap(ev, mu_prsc)) <= 1e-8 * (1 + abs(ev.objective))
    # identity at any mu, not just at equilibrium
    _, ev1, _ = plastic_solve[5][1]
    lhs = pb.duality_gap(ev1, mu_prsc)
    assert lhs == pytest.approx(ev1.mu @ ev1.gradient, rel=1e-8, abs=1e-14)


def test_restart_from_converged_point(plastic_solve):
    pb, mu_prsc, mu, ev, rep, _ = plastic_solve
    _, _, rep2 = pb.newton_solve(mu_prsc, mu0=mu)
    assert rep2.converged and rep2.iterations <= 2


def test_quadratic_tail_of_plastic_increment(plastic_solve):
    assert is_quadratic_tail(plastic_solve[4].residuals)


def test_iteration_limit_reports_failure(model):
    pb, mu_prsc = small_plate(2, model)
    mu, ev, rep = pb.newton_solve(mu_prsc, cfg=NewtonConfig(maxiter=2))
    assert not rep.converged and rep.iterations == 2
    with pytest.raises(ConvergenceError):
        pb.commit_increment(mu, ev, mu_prsc, rep)
    assert pb.increment == 0


# -- line-search profile ----------------------------------------------------------

def test_profile_at_zero_step(plastic_solve):
    pb, mu_prsc, _, _, _, steps = plastic_solve
    _, ev, dmu = steps[0]
    prof = pb.line_search_profile(ev, dmu, [0.0, 0.5, 1.0], mu_prsc)
    np.testing.assert_allclose(prof[0, 1:], ev.objective)
    assert np.all(prof[1:, 4] <= ev.objective)


def test_profile_elastic_matches_quadratic_model(model):
    pb = one_element(model)
    ev = pb.evaluate(np.zeros(2), uniaxial(1e-3))
    dmu = -np.linalg.solve(ev.hessian.toarray(), ev.gradient)
    prof = pb.line_search_profile(ev, dmu, np.linspace(0, 2, 9), uniaxial(1e-3))
    np.testing.assert_allclose(prof[:, 1], prof[:, 3], rtol=1e-12, atol=1e-18)


def test_profile_late_iteration_is_nearly_quadratic(plastic_solve):
    pb, mu_prsc, _, _, rep, steps = plastic_solve
    _, ev, dmu = steps[-2]
    prof = pb.line_search_profile(ev, dmu, [1.0], mu_prsc)
    s, f, first, second, _ = prof[0]
    assert abs(f - second) <= 0.01 * abs(f - ev.objective)


# -- commit -----------------------------------------------------------------------

def test_commit_updates_history(plastic_solve):
    pb0, mu_prsc, mu, ev, rep, _ = plastic_solve
    pb, _ = small_plate(3)
    pb.commit_increment(mu, ev, mu_prsc, rep)
    assert pb.increment == 1
    np.testing.assert_array_equal(pb.sigma, ev.results.sigma)
    np.testing.assert_allclose(pb.b_sigma, pb.sigma @ pb.model.Cinv.T)
    np.testing.assert_array_equal(pb.b_ih, pb.alpha_ih)
    np.testing.assert_array_equal(pb.first_yield[ev.results.yielded], 1)
    np.testing.assert_array_equal(pb.first_yield[~ev.results.yielded], 0)
    u = pb.disc.dofmap.full(mu, mu_prsc)
    np.testing.assert_array_equal(pb.u, u)
    # a zero second increment leaves everything in place
    z = np.zeros_like(mu_prsc)
    mu2, ev2, rep2 = pb.newton_solve(z)
    assert rep2.converged
    np.testing.assert_allclose(ev2.results.sigma, pb.sigma, atol=1e-12)


def test_elastic_split_path_matches_single_step(model):
    d = 2e-3
    one = one_element(model)
    mu, ev, rep = one.newton_solve(uniaxial(d), cfg=NewtonConfig(tol=1e-15))
    one.commit_increment(mu, ev, uniaxial(d), rep)

    two = one_element(model)
    for _ in range(2):
        mu, ev, rep = two.newton_solve(uniaxial(d / 2), cfg=NewtonConfig(tol=1e-15))
        two.commit_increment(mu, ev, uniaxial(d / 2), rep)
    np.testing.assert_allclose(two.sigma, one.sigma, atol=1e-10)
    np.testing.assert_allclose(two.u, one.u, atol=1e-10)


# -- configuration and rate helpers --------------------------------------------------

@pytest.mark.parametrize("kw", [dict(beta=0.5), dict(beta=0.0), dict(gamma=1.0), dict(gamma=0.0),
                                dict(tol=0.0), dict(maxiter=0), dict(maxbacktrack=-1)])
def test_newton_config_validation(kw):
    with pytest.raises(ValueError):
        NewtonConfig(**kw)


def test_contraction_constants_examples():
    r = [1.0, 1e-1, 1e-2, 1e-4, 1e-8]
    np.testing.assert_allclose(contraction_constants(r), [1.0, 1.0])
    assert is_quadratic_tail(r)
    assert not is_quadratic_tail([1.0, 0.5, 0.25, 0.125, 0.0625])
    assert not is_quadratic_tail([1.0, 1e-2, 1e-4, 1e-6])  # fast but linear
    assert not is_quadratic_tail([1.0, 0.1])
    # the rounding floor is dropped before the tail is taken
    np.testing.assert_allclose(contraction_constants(r + [1e-20]), [1.0, 1.0])
    # the constant may wander within the band
    assert is_quadratic_tail([1.0, 1e-1, 3e-2, 4.5e-4])
    assert observed_order([1.0, 1e-1, 1e-2, 1e-3]) == pytest.approx(1.0)
    assert observed_order([1e-1, 1e-2, 1e-4]) == pytest.approx(2.0)


def test_factorization_failure_retries_with_regularization(model, monkeypatch):
    import scipy.sparse.linalg as spla
    from dualplast import solver
    real = spla.splu
    calls = []

    def flaky(A):
        calls.append(A)
        if len(calls) == 1:
            raise RuntimeError("Factor is exactly singular")
        return real(A)

    monkeypatch.setattr(solver.spla, "splu", flaky)
    pb = one_element(model)
    mu, ev, rep = pb.newton_solve(uniaxial(1e-3), cfg=NewtonConfig(tol=1e-14))
    assert rep.regularized and rep.converged
    np.testing.assert_allclose(mu, [-NU * 1e-3] * 2, rtol=1e-8)


def test_factorization_failure_twice_raises(model, monkeypatch):
    from dualplast import solver

    def broken(A):
        raise RuntimeError("Factor is exactly singular")

    monkeypatch.setattr(solver.spla, "splu", broken)
    with pytest.raises(ConvergenceError):
        one_element(model).newton_solve(uniaxial(1e-3))
