"""Model-agnostic solver for the integration-point convex problem.

    min  psi_c(x) - drive^T x    s.t.  phi_k(x) <= 0,  k = 1..N_y

with ``x = (sigma, zeta)``. The solver works on the Lagrange dual: the
Lagrangian is minimized over ``x`` by damped Newton for fixed multipliers,
and the multipliers are found by bisection (one constraint) or projected
coordinate ascent (several constraints). It shares no code with the
closed-form return map, so agreement between the two is a real check.

Nonsmooth points of ``phi`` are allowed only strictly inside the elastic
region (for von Mises, the apex sigma = zeta_kh). When the inner Newton
cannot converge because the Lagrangian minimizer sits on such a point, the
multiplier is known to be too large and the bisection treats it that way.
"""
from dataclasses import dataclass
import math
from typing import Callable

import numpy as np

from .material import SQ23, VonMisesModel, MaterialState, history_terms


class ConvexityError(RuntimeError):
    """Hessian of the Lagrangian is not positive definite."""


class OracleStall(RuntimeError):
    """Multiplier iteration made no progress."""

    def __init__(self, message, x=None, lam=None, residual=None):
        super().__init__(message)
        self.x = x
        self.lam = lam
        self.residual = residual


class _InnerFailure(RuntimeError):
    def __init__(self, x):
        super().__init__("inner Newton did not converge")
        self.x = x


@dataclass
class IpProblem:
    """Callables for psi_c and the yield functions plus the linear drive terms.

    ``phi`` returns a vector of length N_y, ``phi_jac`` an (N_y, n) matrix and
    ``phi_hess`` an (N_y, n, n) stack. ``strain_scale`` and ``stress_scale``
    nondimensionalize residuals.
    """

    psic: Callable
    psic_grad: Callable
    psic_hess: Callable
    phi: Callable
    phi_jac: Callable
    phi_hess: Callable
    drive_sigma: np.ndarray
    drive_zeta: np.ndarray
    strain_scale: float = 1.0
    stress_scale: float = 1.0

    @property
    def drive(self):
        return np.concatenate([np.atleast_1d(self.drive_sigma), np.atleast_1d(self.drive_zeta)])

    @property
    def n_sigma(self):
        return np.atleast_1d(self.drive_sigma).size

    def objective(self, x):
        return float(self.psic(x) - self.drive @ x)

    def lagrangian(self, x, lam):
        return self.objective(x) + float(np.dot(lam, self.phi(x)))


@dataclass
class OracleResult:
    x: np.ndarray
    lam: np.ndarray
    objective: float
    dual_objective: float
    kkt: float
    iterations: int

    def split(self, n_sigma):
        return self.x[:n_sigma], self.x[n_sigma:]


def _cholesky(Hm):
    try:
        return np.linalg.cholesky(Hm)
    except np.linalg.LinAlgError:
        pass
    # rounding in a large rank-deficient curvature term; a relative jitter
    # far below the problem's own curvature separates it from real nonconvexity
    jitter = 1e-13 * np.max(np.abs(np.diag(Hm)))
    try:
        return np.linalg.cholesky(Hm + jitter * np.eye(Hm.shape[0]))
    except np.linalg.LinAlgError:
        raise ConvexityError("Lagrangian Hessian is not positive definite") from None


_EPS = np.finfo(float).eps


def _magnitude(problem, x, lam):
    return abs(problem.psic(x)) + abs(float(lam @ problem.phi(x))) + abs(problem.drive @ x)


def lagrangian_min(problem, lam, x0=None, rtol=1e-12, maxiter=100):
    """Unconstrained minimizer of psi_c(x) + lam^T phi(x) - drive^T x."""
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if np.any(lam < 0):
        raise ValueError("multipliers must be nonnegative")
    d = problem.drive
    if x0 is None and np.any(lam > 0):
        # the unconstrained minimizer is a smooth start; x = 0 may sit on a kink of phi
        x0 = lagrangian_min(problem, np.zeros_like(lam), rtol=rtol, maxiter=maxiter)
    x = np.zeros_like(d) if x0 is None else np.array(x0, dtype=float)
    tol = rtol * problem.strain_scale

    def value(z):
        return problem.psic(z) + lam @ problem.phi(z) - d @ z

    f = value(x)
    for _ in range(maxiter):
        g = problem.psic_grad(x) + lam @ problem.phi_jac(x) - d
        if np.max(np.abs(g)) <= tol:
            return x
        Hm = problem.psic_hess(x)
        if np.any(lam > 0):
            _cholesky(Hm)
            try:
                L = _cholesky(Hm + np.einsum("k,kij->ij", lam, problem.phi_hess(x)))
            except ConvexityError:
                # psi_c alone is fine, so the indefiniteness is rounding in
                # a huge phi curvature: x is next to a kink of phi
                raise _InnerFailure(x) from None
        else:
            L = _cholesky(Hm)
        dx = -np.linalg.solve(L.T, np.linalg.solve(L, g))
        slope = g @ dx
        t = 1.0
        for k in range(40):
            xn = x + t * dx
            try:
                fn = value(xn)
            except FloatingPointError:
                fn = math.inf
            # the last term absorbs rounding once the decrease is below ulp(f)
            if fn <= f + 1e-4 * t * slope + 4e-16 * abs(f):
                break
            if k == 0 and -slope <= 64 * _EPS * _magnitude(problem, x, lam):
                # decrease below the noise of the summed value: judge the
                # full step by the gradient instead
                gn = problem.psic_grad(xn) + lam @ problem.phi_jac(xn) - d
                if np.max(np.abs(gn)) < np.max(np.abs(g)):
                    break
            t *= 0.5
        else:
            if np.max(np.abs(g)) <= 1e3 * tol:
                return x
            raise _InnerFailure(x)
        if t < 1e-6 and np.any(lam > 0):
            # with phi in play, steps this short mean the minimizer sits on
            # a kink of phi where Newton cannot settle
            raise _InnerFailure(xn)
        x, f = xn, fn
    raise _InnerFailure(x)


def kkt_residual(problem, x, lam):
    """Max-norm violation of stationarity, feasibility, sign and complementarity."""
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    phi = np.atleast_1d(problem.phi(x))
    stat = problem.psic_grad(x) - problem.drive
    if np.any(lam != 0):
        stat = stat + lam @ problem.phi_jac(x)
    eps, sig = problem.strain_scale, problem.stress_scale
    parts = [
        np.max(np.abs(stat)) / eps,
        np.max(np.maximum(phi, 0.0)) / sig,
        np.max(np.maximum(-lam, 0.0)) / eps,
        abs(float(lam @ phi)) / (eps * sig),
    ]
    return float(max(parts))


def _dual_value(problem, x, lam):
    return problem.lagrangian(x, lam)


def _solve_single(problem, tol, lam_rtol=1e-13):
    x0 = lagrangian_min(problem, [0.0])
    g0 = float(problem.phi(x0)[0])
    if g0 <= 0.0:
        return x0, np.zeros(1), 0
    # linearized dual step gives the starting guess for the bracket
    J = problem.phi_jac(x0)[0]
    step = np.linalg.solve(problem.psic_hess(x0), J)
    lam_guess = g0 / max(J @ step, 1e-300)

    best = {"x": x0}

    def g(lam):
        try:
            x = lagrangian_min(problem, [lam], x0=best["x"])
        except _InnerFailure as exc:
            # minimizer on a nonsmooth point, which lies inside the elastic region
            if float(problem.phi(exc.x)[0]) < 0.0:
                return -math.inf, None
            raise OracleStall("inner minimization failed outside the elastic region",
                              x=exc.x, lam=np.array([lam])) from None
        best["x"] = x
        return float(problem.phi(x)[0]), x

    lo, x_lo = 0.0, x0
    hi = lam_guess
    g_hi, x_hi = g(hi)
    it = 0
    while g_hi > 0.0:
        lo, x_lo = hi, x_hi
        hi *= 2.0
        g_hi, x_hi = g(hi)
        it += 1
        if it > 200:
            raise OracleStall("could not bracket the multiplier", x=x_lo, lam=np.array([lo]))
    while hi - lo > lam_rtol * hi:
        mid = 0.5 * (lo + hi)
        if not lo < mid < hi:
            break
        g_mid, x_mid = g(mid)
        it += 1
        if g_mid > 0.0:
            lo, x_lo = mid, x_mid
        else:
            hi, g_hi, x_hi = mid, g_mid, x_mid
            if g_mid == 0.0:
                break
    if x_hi is None:
        best["x"] = x_lo
        x_hi = lagrangian_min(problem, [hi], x0=x_lo)
    return x_hi, np.array([hi]), it


def _solve_multi(problem, tol, max_sweeps=200):
    d = problem.drive
    x = lagrangian_min(problem, np.zeros(np.atleast_1d(problem.phi(d * 0.0)).size))
    ny = np.atleast_1d(problem.phi(x)).size
    lam = np.zeros(ny)
    for sweeps in range(1, max_sweeps + 1):
        for k in range(ny):
            x = _coordinate_update(problem, lam, k, x)
        res = kkt_residual(problem, x, lam)
        if res <= tol:
            return x, lam, sweeps
    raise OracleStall(f"projected coordinate ascent did not converge in {max_sweeps} sweeps",
                      x=x, lam=lam, residual=res)


def _coordinate_update(problem, lam, k, x):
    """Exact maximization of the dual along multiplier ``k`` (in place)."""

    def g(v):
        trial = lam.copy()
        trial[k] = v
        xs = lagrangian_min(problem, trial, x0=x)
        return float(problem.phi(xs)[k]), xs

    lam0 = lam[k]
    g0, x0 = g(0.0) if lam0 > 0 else (float(problem.phi(x)[k]), x)
    if g0 <= 0.0:
        lam[k] = 0.0
        return x0
    lo, x_lo = 0.0, x0
    hi = max(lam0, 1e-12 * problem.strain_scale)
    g_hi, x_hi = g(hi)
    while g_hi > 0.0:
        lo, x_lo = hi, x_hi
        hi *= 2.0
        if not math.isfinite(hi):
            raise OracleStall(f"yield function {k} stays violated for every multiplier",
                              x=x_lo, lam=lam.copy())
        g_hi, x_hi = g(hi)
    while hi - lo > 1e-14 * hi:
        mid = 0.5 * (lo + hi)
        if not lo < mid < hi:
            break
        g_mid, x_mid = g(mid)
        if g_mid > 0.0:
            lo, x_lo = mid, x_mid
        else:
            hi, x_hi = mid, x_mid
    lam[k] = hi
    return x_hi


def solve_ip_oracle(problem, tol=1e-10, max_sweeps=200):
    """KKT point of the integration-point problem via its dual.

    One yield function: bisection on the scalar multiplier.  Several:
    projected coordinate ascent, at most ``max_sweeps`` sweeps.
    """
    ny = np.atleast_1d(problem.phi(problem.drive * 0.0)).size
    if ny == 1:
        x, lam, it = _solve_single(problem, tol)
    else:
        x, lam, it = _solve_multi(problem, tol, max_sweeps)
    res = kkt_residual(problem, x, lam)
    if res > tol:
        raise OracleStall(f"KKT residual {res:.3e} above tolerance {tol:.1e}",
                          x=x, lam=lam, residual=res)
    return OracleResult(x, lam, problem.objective(x), _dual_value(problem, x, lam), res, it)


# ---------------------------------------------------------------------------
# von Mises instance
# ---------------------------------------------------------------------------

def _hardening_inverse(hardening, zeta):
    """alpha with psi_ih'(alpha) = zeta, by bracketed Newton."""
    if hardening.is_linear:
        return zeta / hardening.h
    lo, hi = -1.0, 1.0
    while float(hardening.stress(lo)) > zeta:
        lo *= 2.0
    while float(hardening.stress(hi)) < zeta:
        hi *= 2.0
    a = 0.5 * (lo + hi)
    for _ in range(200):
        r = float(hardening.stress(a)) - zeta
        if r > 0:
            hi = a
        else:
            lo = a
        if abs(r) <= 1e-16 * max(1.0, abs(zeta)):
            break
        a_new = a - r / float(hardening.modulus(a))
        a = a_new if lo < a_new < hi else 0.5 * (lo + hi)
        if hi - lo <= 1e-16 * max(1.0, abs(a)):
            break
    return a


def von_mises_problem(model: VonMisesModel, state_n: MaterialState, d_eps):
    """Integration-point problem for the von Mises model.

    The variable is ``x = (sigma, zeta_kh, zeta_ih)`` when kinematic hardening
    is present and ``x = (sigma, zeta_ih)`` otherwise. Requires a strongly
    convex isotropic hardening energy (psi_ih'' > 0).
    """
    if float(model.hardening.modulus(0.0)) <= 0.0:
        raise ValueError("oracle needs strictly positive hardening modulus")
    n = model.n_sigma
    kh = model.has_kinematic
    hd = model.hardening
    Cinv = np.array(model.Cinv)
    Hinv = np.array(model.Hinv) if kh else None
    P = np.array(model.P)
    nz = n + 1 if kh else 1
    b_sigma, b_kh, b_ih = history_terms(model, state_n)

    def split(x):
        sig = x[:n]
        zkh = x[n:2 * n] if kh else np.zeros(n)
        return sig, zkh, x[-1]

    def psic(x):
        sig, zkh, zih = split(x)
        a = _hardening_inverse(hd, zih)
        out = 0.5 * sig @ Cinv @ sig + zih * a - float(hd.energy(a))
        if kh:
            out += 0.5 * zkh @ Hinv @ zkh
        return out

    def psic_grad(x):
        sig, zkh, zih = split(x)
        parts = [Cinv @ sig]
        if kh:
            parts.append(Hinv @ zkh)
        parts.append([_hardening_inverse(hd, zih)])
        return np.concatenate(parts)

    def psic_hess(x):
        _, _, zih = split(x)
        Hm = np.zeros((n + nz, n + nz))
        Hm[:n, :n] = Cinv
        if kh:
            Hm[n:2 * n, n:2 * n] = Hinv
        Hm[-1, -1] = 1.0 / float(hd.modulus(_hardening_inverse(hd, zih)))
        return Hm

    def phi(x):
        sig, zkh, zih = split(x)
        s = sig - zkh
        return np.array([math.sqrt(max(s @ P @ s, 0.0)) - SQ23 * (model.sigma_y + zih)])

    def phi_jac(x):
        sig, zkh, _ = split(x)
        s = sig - zkh
        nrm = math.sqrt(max(s @ P @ s, 0.0))
        nv = P @ s / nrm if nrm > 0 else np.zeros(n)
        row = [nv]
        if kh:
            row.append(-nv)
        row.append([-SQ23])
        return np.concatenate(row)[None, :]

    def phi_hess(x):
        sig, zkh, _ = split(x)
        s = sig - zkh
        nrm = math.sqrt(max(s @ P @ s, 0.0))
        Hm = np.zeros((1, n + nz, n + nz))
        if nrm == 0.0:
            raise _InnerFailure(x)
        nv = P @ s / nrm
        N = (P - np.outer(nv, nv)) / nrm
        Hm[0, :n, :n] = N
        if kh:
            Hm[0, :n, n:2 * n] = -N
            Hm[0, n:2 * n, :n] = -N
            Hm[0, n:2 * n, n:2 * n] = N
        return Hm

    drive_zeta = np.concatenate([b_kh, [b_ih]]) if kh else np.array([b_ih])
    return IpProblem(psic, psic_grad, psic_hess, phi, phi_jac, phi_hess,
                     np.asarray(d_eps, dtype=float) + b_sigma, drive_zeta,
                     strain_scale=model.strain_scale, stress_scale=model.sigma_y)


def oracle_state(model, result):
    """Unpack an oracle solution into a MaterialState."""
    n = model.n_sigma
    x = result.x
    zkh = x[n:2 * n].copy() if model.has_kinematic else np.zeros(n)
    zih = float(x[-1])
    alpha = _hardening_inverse(model.hardening, zih)
    return MaterialState(x[:n].copy(), zkh, zih, float(alpha))
