import itertools

import numpy as np
import pytest

from dualplast.checks import compare_with_oracle, random_increment, random_kinematic_model, random_state
from dualplast.material import (MaterialState, history_terms, return_map, trial_state, yield_value)
from dualplast.oracle import (ConvexityError, IpProblem, OracleStall, kkt_residual, lagrangian_min,
                              oracle_state, solve_ip_oracle, von_mises_problem)


def _x_of(model, state):
    parts = [state.sigma] + ([state.zeta_kh] if model.has_kinematic else []) + [[state.zeta_ih]]
    return np.concatenate(parts)


# -- lagrangian_min ------------------------------------------------------------

def test_lagrangian_min_lambda_zero_is_trial(model):
    s = MaterialState(np.array([0.05, -0.02, 0.01]), np.zeros(3), 0.0, 0.0)
    d = np.array([0.004, 0.001, -0.002])
    prob = von_mises_problem(model, s, d)
    x = lagrangian_min(prob, [0.0])
    sig_tr, _, _ = trial_state(model, s, d)
    np.testing.assert_allclose(x[:3], sig_tr, rtol=1e-12, atol=1e-15)
    # zeta_ih is the hardening stress of the committed alpha
    assert x[-1] == pytest.approx(model.hardening.stress(s.alpha_ih), abs=1e-15)


def test_lagrangian_min_shrinks_with_lambda(rng):
    m = random_kinematic_model(rng)
    s = random_state(m, rng)
    d = random_increment(m, s, rng, "plastic")
    prob = von_mises_problem(m, s, d)
    n = m.n_sigma
    norms, phis = [], []
    lam_rm = return_map(m, s, d).lam
    # past a finite multiplier the minimizer reaches the apex of phi; stay below it
    for lam in np.linspace(0.0, 1.5 * lam_rm, 12):
        x = lagrangian_min(prob, [lam])
        r = x[:n] - x[n:2 * n]
        norms.append(np.sqrt(r @ m.P @ r))
        phis.append(prob.phi(x)[0])
    assert np.all(np.diff(norms) < 0)
    # dual monotonicity: g(lambda) = phi(x*(lambda)) is nonincreasing
    assert np.all(np.diff(phis) <= 1e-15)


def test_lagrangian_min_at_return_map_multiplier(model):
    s = MaterialState.zero(model)
    d = np.array([0.01, 0.0, 0.0])
    r = return_map(model, s, d)
    x = lagrangian_min(von_mises_problem(model, s, d), [r.lam])
    np.testing.assert_allclose(x, _x_of(model, r.state), rtol=0, atol=1e-10)


def test_lagrangian_min_rejects_negative_multiplier(model):
    prob = von_mises_problem(model, MaterialState.zero(model), np.zeros(3))
    with pytest.raises(ValueError):
        lagrangian_min(prob, [-1.0])


def test_lagrangian_min_detects_nonconvexity():
    prob = IpProblem(psic=lambda x: -0.5 * x @ x, psic_grad=lambda x: -x,
                     psic_hess=lambda x: -np.eye(2), phi=lambda x: np.array([x[0] - 1.0]),
                     phi_jac=lambda x: np.array([[1.0, 0.0]]), phi_hess=lambda x: np.zeros((1, 2, 2)),
                     drive_sigma=np.array([1.0]), drive_zeta=np.array([1.0]))
    with pytest.raises(ConvexityError):
        lagrangian_min(prob, [0.0])


# -- solve_ip_oracle --------------------------------------------------------------

def test_oracle_feasible_trial(model):
    s = MaterialState.zero(model)
    d = np.array([0.001, 0.0, 0.0])
    res = solve_ip_oracle(von_mises_problem(model, s, d))
    assert res.lam[0] == 0.0
    np.testing.assert_allclose(res.x[:3], model.C @ d, rtol=1e-13)


def test_oracle_matches_return_map_plastic(model):
    c = compare_with_oracle(model, MaterialState.zero(model), np.array([0.01, 0.0, 0.0]))
    assert c.yielded
    assert c.stress_error <= 1e-8 * model.sigma_y
    assert c.lam_error <= 1e-8


def test_oracle_strong_duality(rng):
    for _ in range(20):
        m = random_kinematic_model(rng, nonlinear=True)
        s = random_state(m, rng)
        d = random_increment(m, s, rng, "plastic")
        res = solve_ip_oracle(von_mises_problem(m, s, d))
        assert abs(res.objective - res.dual_objective) <= 1e-8 * max(1.0, abs(res.objective))
        assert res.kkt <= 1e-10


def test_oracle_objective_matches_ip_energy(model):
    s = MaterialState.zero(model)
    d = np.array([0.01, -0.003, 0.002])
    res = solve_ip_oracle(von_mises_problem(model, s, d))
    r = return_map(model, s, d)
    assert res.objective == pytest.approx(r.ip_energy, rel=1e-10)


# -- kkt_residual ---------------------------------------------------------------

def test_kkt_residual_exact_point_is_zero(model):
    s = MaterialState.zero(model)
    d = np.array([0.001, 0.0, 0.0])
    prob = von_mises_problem(model, s, d)
    sig_tr, _, _ = trial_state(model, s, d)
    assert kkt_residual(prob, np.concatenate([sig_tr, [0.0]]), [0.0]) <= 1e-14


def test_kkt_residual_detects_perturbation(model, rng):
    s = MaterialState.zero(model)
    d = np.array([0.01, 0.0, 0.0])
    r = return_map(model, s, d)
    prob = von_mises_problem(model, s, d)
    x = _x_of(model, r.state)
    x[:3] += 1e-3 * rng.normal(size=3)
    assert kkt_residual(prob, x, [r.lam]) >= 1e-4


def test_kkt_residual_of_return_map_outputs(rng):
    for i in range(100):
        m = random_kinematic_model(rng, nonlinear=bool(i % 2))
        s = random_state(m, rng)
        d = random_increment(m, s, rng, ("elastic", "boundary", "plastic")[i % 3])
        r = return_map(m, s, d)
        assert kkt_residual(von_mises_problem(m, s, d), _x_of(m, r.state), [r.lam]) <= 1e-10


# -- several yield functions -----------------------------------------------------

def _linear_problem(A, c, G, h):
    """min 1/2 x^T A x - c^T x  s.t.  G x <= h."""
    return IpProblem(psic=lambda x: 0.5 * x @ A @ x, psic_grad=lambda x: A @ x,
                     psic_hess=lambda x: A, phi=lambda x: G @ x - h, phi_jac=lambda x: G,
                     phi_hess=lambda x: np.zeros((len(h),) + A.shape),
                     drive_sigma=c[:1], drive_zeta=c[1:])


def _brute_force_active_set(A, c, G, h):
    n, ny = len(c), len(h)
    for k in range(ny + 1):
        for act in itertools.combinations(range(ny), k):
            act = list(act)
            K = np.zeros((n + k, n + k))
            K[:n, :n] = A
            K[:n, n:] = G[act].T
            K[n:, :n] = G[act]
            rhs = np.concatenate([c, h[act]])
            sol = np.linalg.solve(K, rhs)
            x, lam_a = sol[:n], sol[n:]
            lam = np.zeros(ny)
            lam[act] = lam_a
            if np.all(lam >= -1e-12) and np.all(G @ x - h <= 1e-12):
                return x, lam
    raise AssertionError("no KKT point found")


@pytest.mark.parametrize("seed", range(8))
def test_two_constraint_problem_vs_brute_force(seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(3, 3))
    A = M @ M.T + 3 * np.eye(3)
    c = rng.normal(size=3) * 3
    G = rng.normal(size=(2, 3))
    h = np.abs(rng.normal(size=2)) * 0.3
    x_ref, lam_ref = _brute_force_active_set(A, c, G, h)
    res = solve_ip_oracle(_linear_problem(A, c, G, h), tol=1e-10)
    np.testing.assert_allclose(res.x, x_ref, atol=1e-9)
    np.testing.assert_allclose(res.lam, lam_ref, atol=1e-9)


def test_two_constraint_infeasible_raises_stall():
    A = np.eye(2)
    c = np.zeros(2)
    G = np.array([[1.0, 0.0], [-1.0, 0.0]])
    h = np.array([-1.0, -1.0])  # x0 <= -1 and x0 >= 1
    with pytest.raises(OracleStall) as info:
        solve_ip_oracle(_linear_problem(A, c, G, h), max_sweeps=20)
    assert info.value.x is not None and info.value.lam is not None


def test_oracle_state_roundtrip(model):
    s = MaterialState.zero(model)
    d = np.array([0.01, 0.002, 0.0])
    st = oracle_state(model, solve_ip_oracle(von_mises_problem(model, s, d)))
    assert st.alpha_ih == pytest.approx(st.zeta_ih / model.hardening.h, rel=1e-14)
    assert abs(yield_value(model, st.sigma, st.zeta_kh, st.zeta_ih)) <= 1e-10 * model.sigma_y
    b_sigma, _, _ = history_terms(model, st)
    assert b_sigma.shape == (3,)
