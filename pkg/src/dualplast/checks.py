"""Randomized self-checks shared by the ``check`` command and the test suite."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import oracle
from .fem import PlateGeometry, Discretization, build_quarter_plate_mesh, plate_dofmap, prescribed_values
from .material import (DimMode, IsotropicHardening, MaterialState, VonMisesModel, pq_matrices,
                       return_map, spectral_moduli, yield_value)
from .solver import ReducedDual

BENCHMARK_CONSTANTS = dict(E=70.0, nu=0.2, sigma_y=0.243, h=2.24)


def benchmark_model(dim_mode=DimMode.PLANE_STRESS, **over):
    kw = {**BENCHMARK_CONSTANTS, **over}
    return VonMisesModel.from_constants(kw.pop("E"), kw.pop("nu"), kw.pop("sigma_y"),
                                        kw.pop("h"), dim_mode, **kw)


def random_kinematic_model(rng, dim_mode=DimMode.PLANE_STRESS, nonlinear=False):
    """Benchmark elasticity with random kinematic moduli sharing the P eigenbasis."""
    base = benchmark_model(dim_mode)
    n = dim_mode.n_sigma
    eigs = 10 ** rng.uniform(-1.0, 1.5, size=n)
    H = spectral_moduli(eigs, dim_mode)
    hard = IsotropicHardening(BENCHMARK_CONSTANTS["h"] * 10 ** rng.uniform(-1, 1),
                              rng.uniform(0, 0.2) if nonlinear else 0.0,
                              10 ** rng.uniform(0, 2) if nonlinear else 1.0)
    return VonMisesModel(dim_mode, base.C, base.sigma_y, hard, H)


def random_state(model, rng, inside=0.95):
    """Committed state strictly inside the current elastic region."""
    n = model.n_sigma
    alpha = abs(rng.normal()) * 3 * model.strain_scale * rng.integers(0, 2)
    zih = float(model.hardening.stress(alpha))
    zkh = rng.normal(size=n) * 0.3 * model.sigma_y if model.has_kinematic else np.zeros(n)
    direction = rng.normal(size=n)
    P = model.P
    nrm = math.sqrt(max(direction @ P @ direction, 1e-300))
    radius = math.sqrt(2.0 / 3.0) * (model.sigma_y + zih) * inside * rng.uniform()
    sigma = zkh + direction / nrm * radius
    if model.dim_mode is DimMode.THREE_D:
        sigma[:3] += rng.normal() * model.sigma_y
    return MaterialState(sigma, zkh, zih, alpha)


def random_increment(model, state, rng, regime):
    """Strain increment giving an elastic, near-boundary or plastic trial state."""
    n = model.n_sigma
    d = rng.normal(size=n)
    d /= np.linalg.norm(d)
    scale = model.strain_scale

    def phi_tr(t):
        sig = state.sigma + model.C @ (t * d)
        return float(yield_value(model, sig, state.zeta_kh, state.zeta_ih))

    if regime == "elastic":
        t = scale * rng.uniform(0.0, 1.0)
        while phi_tr(t) > 0:
            t *= 0.5
        return t * d
    # bisection for the first crossing of the yield surface along d
    lo, hi = 0.0, scale
    while phi_tr(hi) <= 0:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if phi_tr(mid) <= 0 else (lo, mid)
    if regime == "boundary":
        return hi * (1.0 + 10 ** rng.uniform(-9, -5)) * d
    return (hi + scale * 10 ** rng.uniform(-2, 1.3)) * d


REGIMES = ("elastic", "boundary", "plastic", "plastic")


@dataclass
class OracleComparison:
    stress_error: float
    zeta_error: float
    alpha_error: float
    lam_error: float
    kkt: float
    oracle_kkt: float
    yielded: bool


def compare_with_oracle(model, state, d_eps, tol=1e-10):
    """Return map against the dual-bisection oracle on one problem."""
    rm = return_map(model, state, d_eps)
    prob = oracle.von_mises_problem(model, state, d_eps)
    res = oracle.solve_ip_oracle(prob, tol=tol)
    ost = oracle.oracle_state(model, res)
    st = rm.state
    x_rm = np.concatenate([st.sigma, st.zeta_kh, [st.zeta_ih]]) if model.has_kinematic \
        else np.concatenate([st.sigma, [st.zeta_ih]])
    return OracleComparison(
        stress_error=float(np.abs(st.sigma - ost.sigma).max()),
        zeta_error=max(float(np.abs(st.zeta_kh - ost.zeta_kh).max()), abs(st.zeta_ih - ost.zeta_ih)),
        alpha_error=abs(st.alpha_ih - ost.alpha_ih),
        lam_error=abs(rm.lam - float(res.lam[0])),
        kkt=oracle.kkt_residual(prob, x_rm, np.array([rm.lam])),
        oracle_kkt=res.kkt,
        yielded=rm.yielded,
    )


def oracle_sweep(n, seed=0, dim_mode=DimMode.PLANE_STRESS, kinematic_fraction=0.5):
    """``n`` randomized comparisons over the benchmark constants and kinematic variants."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        if rng.uniform() < kinematic_fraction:
            model = random_kinematic_model(rng, dim_mode, nonlinear=bool(rng.integers(0, 2)))
        else:
            model = benchmark_model(dim_mode)
        state = random_state(model, rng)
        d = random_increment(model, state, rng, REGIMES[i % len(REGIMES)])
        out.append(compare_with_oracle(model, state, d))
    return out


def tangent_fd_error(model, state, d_eps, step=1e-6):
    """Max relative componentwise error of the consistent tangent vs central differences."""
    rm = return_map(model, state, d_eps)
    n = model.n_sigma
    fd = np.zeros((n, n))
    h = step
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        fd[:, j] = (return_map(model, state, d_eps + e).state.sigma
                    - return_map(model, state, d_eps - e).state.sigma) / (2 * h)
    scale = np.abs(rm.tangent).max()
    return float(np.abs(rm.tangent - fd).max() / scale), rm


# ---------------------------------------------------------------------------
# global derivative checks on a small plate
# ---------------------------------------------------------------------------

def small_plate(refinement=2, model=None):
    mesh = build_quarter_plate_mesh(PlateGeometry(refinement=refinement))
    dofmap = plate_dofmap(mesh)
    disc = Discretization(mesh, dofmap)
    problem = ReducedDual(disc, model or benchmark_model())
    mu_prsc = prescribed_values(mesh, dofmap, {("top_edge", 1): 0.5})
    return problem, mu_prsc


def mixed_iterate(problem, mu_prsc, iterations=2):
    """A Newton iterate with both elastic and plastic integration points."""
    from .solver import NewtonConfig
    mu, ev, _ = problem.newton_solve(mu_prsc, cfg=NewtonConfig(maxiter=iterations))
    return mu, ev


def gradient_fd_errors(problem, mu, mu_prsc, directions, h=1e-6):
    ev = problem.evaluate(mu, mu_prsc)
    errs = []
    for d in directions:
        fd = (problem.objective(mu + h * d, mu_prsc) - problem.objective(mu - h * d, mu_prsc)) / (2 * h)
        an = float(ev.gradient @ d)
        errs.append(abs(fd - an) / max(abs(an), 1e-300))
    return errs


def hessian_fd_errors(problem, mu, mu_prsc, directions, h=1e-6):
    ev = problem.evaluate(mu, mu_prsc)
    H = ev.hessian
    errs = []
    for d in directions:
        gp = problem.evaluate(mu + h * d, mu_prsc).gradient
        gm = problem.evaluate(mu - h * d, mu_prsc).gradient
        fd = (gp - gm) / (2 * h)
        an = H @ d
        errs.append(float(np.linalg.norm(fd - an) / np.linalg.norm(an)))
    return errs


def run_checks(n_oracle=200, seed=0):
    """Small instances of the property suite; returns ``[(name, ok, detail)]``."""
    rows = []
    sweep = oracle_sweep(n_oracle, seed)
    sy = BENCHMARK_CONSTANTS["sigma_y"]
    s_err = max(c.stress_error for c in sweep) / sy
    l_err = max(c.lam_error for c in sweep)
    kkt = max(c.kkt for c in sweep)
    rows.append(("return map vs oracle (stress / sigma_y)", s_err <= 1e-8, f"{s_err:.2e}"))
    rows.append(("return map vs oracle (lambda)", l_err <= 1e-8, f"{l_err:.2e}"))
    rows.append(("return map KKT residual", kkt <= 1e-10, f"{kkt:.2e}"))

    rng = np.random.default_rng(seed)
    model = benchmark_model()
    worst = 0.0
    for _ in range(20):
        st = random_state(model, rng)
        d = random_increment(model, st, rng, "plastic")
        worst = max(worst, tangent_fd_error(model, st, d)[0])
    rows.append(("consistent tangent vs finite differences", worst <= 1e-5, f"{worst:.2e}"))

    problem, mu_prsc = small_plate()
    mu, _ = mixed_iterate(problem, mu_prsc)
    dirs = [v / np.linalg.norm(v) for v in rng.normal(size=(5, len(mu)))]
    g = max(gradient_fd_errors(problem, mu, mu_prsc, dirs))
    rows.append(("reduced dual gradient vs finite differences", g <= 1e-6, f"{g:.2e}"))
    hh = max(hessian_fd_errors(problem, mu, mu_prsc, dirs))
    rows.append(("reduced dual Hessian vs finite differences", hh <= 1e-5, f"{hh:.2e}"))

    P, Q = pq_matrices(DimMode.THREE_D)
    orth = float(np.abs(Q.T @ Q - np.eye(6)).max())
    rows.append(("3D Q orthogonal", orth <= 1e-14, f"{orth:.1e}"))
    return rows
