"""Hot numeric loops: batched von Mises return map and IP stiffness products.

Every kernel exists twice:

* a per-point loop compiled with ``numba.njit`` (the default backend), and
* a vectorized pure-numpy version that works without numba.

Set ``DUALPLAST_DISABLE_NUMBA=1`` in the environment to select the numpy
backend at import time, or switch at runtime with :func:`use_backend`.
Both backends implement the same formulas and are cross-checked in the tests.
"""
import contextlib
import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None

SQ23 = math.sqrt(2.0 / 3.0)
SQ32 = math.sqrt(1.5)

# status bits reported per integration point
ELASTIC = 0
PLASTIC = 1
BISECTION = 2
DEGENERATE = 4
BRACKET_FAILURE = 8

NEWTON_MAXITER = 50
RESIDUAL_TOL = 1e-15


def _env_disabled():
    flag = os.environ.get("DUALPLAST_DISABLE_NUMBA", "").strip().lower()
    return flag in ("1", "true", "yes", "on")


JIT_ENABLED = HAVE_NUMBA and not _env_disabled()
_backend = "numba" if JIT_ENABLED else "numpy"


def backend():
    """Name of the active backend, ``"numba"`` or ``"numpy"``."""
    return _backend


def set_backend(name):
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not JIT_ENABLED:
        raise RuntimeError("numba is unavailable or disabled by DUALPLAST_DISABLE_NUMBA")
    _backend = name


@contextlib.contextmanager
def use_backend(name):
    previous = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def _jit(fn):
    if JIT_ENABLED:
        return numba.njit(cache=True)(fn)
    return fn


# ---------------------------------------------------------------------------
# per-point kernels (compiled when numba is enabled)
# ---------------------------------------------------------------------------

@_jit
def _hardening(alpha, h, q, delta):
    """First and second derivative of the isotropic hardening energy."""
    e = math.exp(-delta * alpha)
    return h * alpha + q * (1.0 - e), h + q * delta * e


@_jit
def _scalar_residual(a, w, lam_chp, alpha_n, sigma_y, h, q, delta):
    # r(a) = 1/sqrt(S(a)) - 1 is concave and increasing in the increment a,
    # so Newton started at a = 0 approaches the root from the left.
    dpsi, ddpsi = _hardening(alpha_n + a, h, q, delta)
    base = SQ23 * (sigma_y + dpsi)
    S = 0.0
    dS = 0.0
    for r in range(w.shape[0]):
        D = base + SQ32 * a * lam_chp[r]
        Dp = SQ23 * ddpsi + SQ32 * lam_chp[r]
        S += w[r] / (D * D)
        dS -= 2.0 * w[r] * Dp / (D * D * D)
    res = 1.0 / math.sqrt(S) - 1.0
    dres = -0.5 * dS / (S * math.sqrt(S))
    return res, dres


@_jit
def _bisect_increment(a0, w, lam_chp, alpha_n, sigma_y, h, q, delta):
    lo = 0.0
    hi = max(2.0 * a0, 1e-300)
    bracketed = False
    for _ in range(2100):
        r, _d = _scalar_residual(hi, w, lam_chp, alpha_n, sigma_y, h, q, delta)
        if r >= 0.0:
            bracketed = True
            break
        lo = hi
        hi *= 2.0
    if not bracketed or not math.isfinite(hi):
        return hi, BRACKET_FAILURE
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if hi - lo <= 2e-16 * hi or mid <= lo or mid >= hi:
            break
        r, _d = _scalar_residual(mid, w, lam_chp, alpha_n, sigma_y, h, q, delta)
        if r < 0.0:
            lo = mid
        else:
            hi = mid
    return hi, BISECTION


@_jit
def _solve_increment(w, lam_chp, alpha_n, sigma_y, h, q, delta):
    """Equivalent plastic strain increment from the scalar yield equation."""
    a = 0.0
    for _ in range(NEWTON_MAXITER):
        r, dr = _scalar_residual(a, w, lam_chp, alpha_n, sigma_y, h, q, delta)
        if abs(r) <= RESIDUAL_TOL:
            return a, 0
        if not (dr > 0.0) or not math.isfinite(r):
            break
        step = -r / dr
        a_new = a + step
        if a_new < 0.0:
            a_new = 0.5 * a
        if abs(a_new - a) <= 4e-16 * abs(a_new):
            return a_new, 0
        a = a_new
    return _bisect_increment(a, w, lam_chp, alpha_n, sigma_y, h, q, delta)


@_jit
def _solve_small(M, X, m, n):
    """Solve ``M[:m, :m] Y = X[:m, :n]`` in place (partial pivoting); Y ends up in X."""
    for col in range(m):
        piv = col
        big = abs(M[col, col])
        for r in range(col + 1, m):
            if abs(M[r, col]) > big:
                big = abs(M[r, col])
                piv = r
        if piv != col:
            for j in range(m):
                M[col, j], M[piv, j] = M[piv, j], M[col, j]
            for j in range(n):
                X[col, j], X[piv, j] = X[piv, j], X[col, j]
        d = M[col, col]
        for r in range(col + 1, m):
            f = M[r, col] / d
            if f != 0.0:
                for j in range(col + 1, m):
                    M[r, j] -= f * M[col, j]
                for j in range(n):
                    X[r, j] -= f * X[col, j]
    for col in range(m - 1, -1, -1):
        d = M[col, col]
        for j in range(n):
            acc = X[col, j]
            for c2 in range(col + 1, m):
                acc -= M[col, c2] * X[c2, j]
            X[col, j] = acc / d


@_jit
def _bordered_tangent_into(s, lam, ddpsi, Cinv, Hinv, P, has_kh, M, X, nv, out):
    """Consistent tangent from the bordered KKT derivative system, written to ``out``.

    ``s`` is the relative stress sigma - zeta_kh at the converged point.
    The isotropic hardening row is eliminated beforehand, which leaves the
    entry -(2/3) psi'' in the corner and keeps the system regular for
    perfect plasticity.  ``M``, ``X`` and ``nv`` are work arrays.
    """
    n = s.shape[0]
    nrm2 = 0.0
    for i in range(n):
        acc = 0.0
        for j in range(n):
            acc += P[i, j] * s[j]
        nv[i] = acc
        nrm2 += s[i] * acc
    nrm = math.sqrt(nrm2)
    for i in range(n):
        nv[i] /= nrm
    m = 2 * n + 1 if has_kh else n + 1
    c = lam / nrm
    for i in range(m):
        for j in range(m):
            M[i, j] = 0.0
        for j in range(n):
            X[i, j] = 0.0
    for i in range(n):
        X[i, i] = 1.0
        for j in range(n):
            lN = c * (P[i, j] - nv[i] * nv[j])
            M[i, j] = Cinv[i, j] + lN
            if has_kh:
                M[i, n + j] = -lN
                M[n + i, j] = -lN
                M[n + i, n + j] = Hinv[i, j] + lN
        M[i, m - 1] = nv[i]
        M[m - 1, i] = nv[i]
        if has_kh:
            M[n + i, m - 1] = -nv[i]
            M[m - 1, n + i] = -nv[i]
    M[m - 1, m - 1] = -(2.0 / 3.0) * ddpsi
    _solve_small(M, X, m, n)
    for i in range(n):
        for j in range(n):
            out[i, j] = 0.5 * (X[i, j] + X[j, i])


@_jit
def _bordered_tangent(s, lam, ddpsi, Cinv, Hinv, P, has_kh):
    n = s.shape[0]
    m = 2 * n + 1
    out = np.empty((n, n))
    _bordered_tangent_into(s, lam, ddpsi, Cinv, Hinv, P, has_kh, np.empty((m, m)),
                           np.empty((m, n)), np.empty(n), out)
    return out


@_jit
def _return_map_loop(sig_n, zkh_n, zih_n, alpha_n, deps, C, Cinv, Hinv, P, Q,
                     lam_p, lam_cp, lam_hp, has_kh, sigma_y, h, q, delta, eps_act,
                     sig, zkh, zih, alpha, lam, tangent, status):
    m, n = sig_n.shape
    lam_chp = lam_cp + lam_hp
    ytr = np.empty(n)
    w = np.empty(n)
    sig_tr = np.empty(n)
    rel = np.empty(n)
    ycp = np.empty(n)
    yhp = np.empty(n)
    M = np.empty((2 * n + 1, 2 * n + 1))
    X = np.empty((2 * n + 1, n))
    nv = np.empty(n)
    for k in range(m):
        for i in range(n):
            acc = sig_n[k, i]
            for j in range(n):
                acc += C[i, j] * deps[k, j]
            sig_tr[i] = acc
        norm2 = 0.0
        for r in range(n):
            acc = 0.0
            for j in range(n):
                acc += Q[j, r] * (sig_tr[j] - zkh_n[k, j])
            ytr[r] = acc
            w[r] = lam_p[r] * acc * acc
            norm2 += w[r]
        phi_tr = math.sqrt(norm2) - SQ23 * (sigma_y + zih_n[k])
        if phi_tr <= 0.0:
            for i in range(n):
                sig[k, i] = sig_tr[i]
                zkh[k, i] = zkh_n[k, i]
                for j in range(n):
                    tangent[k, i, j] = C[i, j]
            zih[k] = zih_n[k]
            alpha[k] = alpha_n[k]
            lam[k] = 0.0
            status[k] = ELASTIC
            continue
        da, st = _solve_increment(w, lam_chp, alpha_n[k], sigma_y, h, q, delta)
        a_new = alpha_n[k] + da
        dpsi, ddpsi = _hardening(a_new, h, q, delta)
        lk = SQ32 * da
        c = lk / (SQ23 * (sigma_y + dpsi))
        for r in range(n):
            yr = ytr[r] / (1.0 + c * lam_chp[r])
            ycp[r] = lam_cp[r] * yr
            yhp[r] = lam_hp[r] * yr
        for i in range(n):
            dc = 0.0
            dh = 0.0
            for r in range(n):
                dc += Q[i, r] * ycp[r]
                dh += Q[i, r] * yhp[r]
            sig[k, i] = sig_tr[i] - c * dc
            zkh[k, i] = zkh_n[k, i] + c * dh if has_kh else zkh_n[k, i]
            rel[i] = sig[k, i] - zkh[k, i]
        zih[k] = dpsi
        alpha[k] = a_new
        lam[k] = lk
        st = st | PLASTIC
        if lk <= eps_act:
            for i in range(n):
                for j in range(n):
                    tangent[k, i, j] = C[i, j]
            st = st | DEGENERATE
        else:
            _bordered_tangent_into(rel, lk, ddpsi, Cinv, Hinv, P, has_kh, M, X, nv, tangent[k])
        status[k] = st


@_jit
def _ip_stiffness_loop(B, K, w, out):
    m, ns, nd = B.shape
    tmp = np.empty((ns, nd))
    for k in range(m):
        for i in range(ns):
            for j in range(nd):
                acc = 0.0
                for l in range(ns):
                    acc += K[k, i, l] * B[k, l, j]
                tmp[i, j] = acc
        for i in range(nd):
            for j in range(nd):
                acc = 0.0
                for l in range(ns):
                    acc += B[k, l, i] * tmp[l, j]
                out[k, i, j] = w[k] * acc


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------

def _return_map_numpy(sig_n, zkh_n, zih_n, alpha_n, deps, C, Cinv, Hinv, P, Q,
                      lam_p, lam_cp, lam_hp, has_kh, sigma_y, h, q, delta, eps_act):
    m, n = sig_n.shape
    lam_chp = lam_cp + lam_hp
    sig_tr = sig_n + deps @ C.T
    ytr = (sig_tr - zkh_n) @ Q
    w_all = lam_p * ytr**2
    phi_tr = np.sqrt(w_all.sum(axis=1)) - SQ23 * (sigma_y + zih_n)
    plastic = np.flatnonzero(phi_tr > 0.0)

    sig = sig_tr.copy()
    zkh = zkh_n.copy()
    zih = zih_n.copy()
    alpha = alpha_n.copy()
    lam = np.zeros(m)
    tangent = np.broadcast_to(C, (m, n, n)).copy()
    status = np.zeros(m, dtype=np.int64)
    if plastic.size == 0:
        return sig, zkh, zih, alpha, lam, tangent, status

    w = w_all[plastic]
    an = alpha_n[plastic]
    a = np.zeros(plastic.size)
    done = np.zeros(plastic.size, dtype=bool)
    for _ in range(NEWTON_MAXITER):
        idx = np.flatnonzero(~done)
        if idx.size == 0:
            break
        ai = a[idx]
        e = np.exp(-delta * (an[idx] + ai))
        dpsi = h * (an[idx] + ai) + q * (1.0 - e)
        ddpsi = h + q * delta * e
        D = SQ23 * (sigma_y + dpsi)[:, None] + SQ32 * ai[:, None] * lam_chp
        Dp = SQ23 * ddpsi[:, None] + SQ32 * lam_chp
        S = (w[idx] / D**2).sum(axis=1)
        dS = -2.0 * (w[idx] * Dp / D**3).sum(axis=1)
        r = 1.0 / np.sqrt(S) - 1.0
        dr = -0.5 * dS / (S * np.sqrt(S))
        conv = np.abs(r) <= RESIDUAL_TOL
        done[idx[conv]] = True
        bad = ~conv & ~((dr > 0.0) & np.isfinite(r))
        live = ~conv & ~bad
        step = np.where(live, -r / np.where(live, dr, 1.0), 0.0)
        a_new = ai + step
        a_new = np.where(a_new < 0.0, 0.5 * ai, a_new)
        tiny = live & (np.abs(a_new - ai) <= 4e-16 * np.abs(a_new))
        a[idx[live]] = a_new[live]
        done[idx[tiny]] = True
        # leave non-finite points for the bisection fallback below
        done[idx[bad]] = True
        status[plastic[idx[bad]]] |= BISECTION
    pending = np.flatnonzero(~done | (status[plastic] & BISECTION).astype(bool))
    for j in pending:
        a[j], st = _bisect_increment(a[j], w[j], lam_chp, an[j], sigma_y, h, q, delta)
        status[plastic[j]] = st

    a_new = an + a
    e = np.exp(-delta * a_new)
    dpsi = h * a_new + q * (1.0 - e)
    ddpsi = h + q * delta * e
    lk = SQ32 * a
    c = lk / (SQ23 * (sigma_y + dpsi))
    y = ytr[plastic] / (1.0 + c[:, None] * lam_chp)
    sig[plastic] = sig_tr[plastic] - c[:, None] * ((lam_cp * y) @ Q.T)
    if has_kh:
        zkh[plastic] = zkh_n[plastic] + c[:, None] * ((lam_hp * y) @ Q.T)
    zih[plastic] = dpsi
    alpha[plastic] = a_new
    lam[plastic] = lk
    status[plastic] |= PLASTIC

    degenerate = lk <= eps_act
    status[plastic[degenerate]] |= DEGENERATE
    sel = plastic[~degenerate]
    if sel.size:
        tangent[sel] = _bordered_tangent_batch(
            sig[sel] - zkh[sel], lam[sel], ddpsi[~degenerate], Cinv, Hinv, P, has_kh)
    return sig, zkh, zih, alpha, lam, tangent, status


def _bordered_tangent_batch(s, lam, ddpsi, Cinv, Hinv, P, has_kh):
    k, n = s.shape
    Ps = s @ P
    nrm = np.sqrt(np.einsum("ki,ki->k", s, Ps))
    nv = Ps / nrm[:, None]
    N = (P - nv[:, :, None] * nv[:, None, :]) / nrm[:, None, None]
    lN = lam[:, None, None] * N
    m = 2 * n + 1 if has_kh else n + 1
    M = np.zeros((k, m, m))
    M[:, :n, :n] = Cinv + lN
    M[:, :n, -1] = nv
    M[:, -1, :n] = nv
    if has_kh:
        M[:, :n, n:2 * n] = -lN
        M[:, n:2 * n, :n] = -lN
        M[:, n:2 * n, n:2 * n] = Hinv + lN
        M[:, n:2 * n, -1] = -nv
        M[:, -1, n:2 * n] = -nv
    M[:, -1, -1] = -(2.0 / 3.0) * ddpsi
    rhs = np.zeros((k, m, n))
    rhs[:, :n, :n] = np.eye(n)
    X = np.linalg.solve(M, rhs)
    K = X[:, :n, :n]
    return 0.5 * (K + K.transpose(0, 2, 1))


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def return_map_batch(sig_n, zkh_n, zih_n, alpha_n, deps, params):
    """Run the return map on ``m`` integration points at once.

    ``params`` is the tuple produced by ``VonMisesModel.kernel_params``.
    Returns ``(sigma, zeta_kh, zeta_ih, alpha, lam, tangent, status)``.
    """
    sig_n = np.ascontiguousarray(sig_n, dtype=float)
    zkh_n = np.ascontiguousarray(zkh_n, dtype=float)
    zih_n = np.ascontiguousarray(zih_n, dtype=float)
    alpha_n = np.ascontiguousarray(alpha_n, dtype=float)
    deps = np.ascontiguousarray(deps, dtype=float)
    if _backend == "numba":
        m, n = sig_n.shape
        sig = np.empty((m, n))
        zkh = np.empty((m, n))
        zih = np.empty(m)
        alpha = np.empty(m)
        lam = np.empty(m)
        tangent = np.empty((m, n, n))
        status = np.empty(m, dtype=np.int64)
        _return_map_loop(sig_n, zkh_n, zih_n, alpha_n, deps, *params,
                         sig, zkh, zih, alpha, lam, tangent, status)
        return sig, zkh, zih, alpha, lam, tangent, status
    return _return_map_numpy(sig_n, zkh_n, zih_n, alpha_n, deps, *params)


def ip_stiffness(B, K, w):
    """Weighted ``w * B^T K B`` for every integration point, shape (m, nd, nd)."""
    if _backend == "numba":
        B = np.ascontiguousarray(B, dtype=float)
        K = np.ascontiguousarray(K, dtype=float)
        w = np.ascontiguousarray(w, dtype=float)
        out = np.empty((B.shape[0], B.shape[2], B.shape[2]))
        _ip_stiffness_loop(B, K, w, out)
        return out
    return w[:, None, None] * (B.transpose(0, 2, 1) @ K @ B)
