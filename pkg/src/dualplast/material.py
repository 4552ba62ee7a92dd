"""Von Mises elastoplasticity with linear kinematic and nonlinear isotropic hardening.

The complementary stored energy and yield function are

    psi_c(sigma, zeta) = 1/2 sigma^T C^-1 sigma + 1/2 zeta_kh^T H^-1 zeta_kh + psi_c_ih(zeta_ih)
    phi(sigma, zeta)   = sqrt((sigma - zeta_kh)^T P (sigma - zeta_kh)) - sqrt(2/3) (sigma_y + zeta_ih)

Stress and strain vectors use Voigt order with engineering shear strains:
``(xx, yy, xy)`` in plane stress and ``(xx, yy, zz, xy, yz, zx)`` in 3D.
Energies are per unit volume; quadrature weights are applied by the caller.
"""
from dataclasses import dataclass, field
import enum
import math
from typing import Optional

import numpy as np

from . import kernels

SQ23 = math.sqrt(2.0 / 3.0)
SQ32 = math.sqrt(1.5)


class DimMode(enum.Enum):
    PLANE_STRESS = 3
    THREE_D = 6

    @property
    def n_sigma(self):
        return self.value


class ReturnMapError(RuntimeError):
    """The scalar hardening equation could not be bracketed."""


def pq_matrices(dim_mode):
    """Von Mises quadratic form ``P`` and the orthogonal ``Q`` diagonalizing it."""
    if dim_mode is DimMode.PLANE_STRESS:
        P = np.array([[2.0, -1.0, 0.0], [-1.0, 2.0, 0.0], [0.0, 0.0, 6.0]]) / 3.0
        r2 = 1.0 / math.sqrt(2.0)
        Q = np.array([[r2, r2, 0.0], [r2, -r2, 0.0], [0.0, 0.0, 1.0]])
        return P, Q
    if dim_mode is DimMode.THREE_D:
        P = np.zeros((6, 6))
        P[:3, :3] = np.array([[2.0, -1.0, -1.0], [-1.0, 2.0, -1.0], [-1.0, -1.0, 2.0]]) / 3.0
        P[3:, 3:] = 2.0 * np.eye(3)
        r3, r6, r2 = 1.0 / math.sqrt(3.0), 1.0 / math.sqrt(6.0), 1.0 / math.sqrt(2.0)
        Q = np.eye(6)
        Q[:3, :3] = np.array([[r3, math.sqrt(2.0 / 3.0), 0.0],
                              [r3, -r6, r2],
                              [r3, -r6, -r2]])
        return P, Q
    raise ValueError(f"unknown dim_mode {dim_mode!r}")


def elastic_moduli(E, nu, dim_mode=DimMode.PLANE_STRESS):
    """Isotropic elastic moduli matrix for engineering-shear Voigt vectors."""
    if dim_mode is DimMode.PLANE_STRESS:
        c = E / (1.0 - nu**2)
        return c * np.array([[1.0, nu, 0.0], [nu, 1.0, 0.0], [0.0, 0.0, 0.5 * (1.0 - nu)]])
    lame = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    G = E / (2.0 * (1.0 + nu))
    C = np.zeros((6, 6))
    C[:3, :3] = lame
    C[:3, :3] += 2.0 * G * np.eye(3)
    C[3:, 3:] = G * np.eye(3)
    return C


def spectral_moduli(eigenvalues, dim_mode):
    """Moduli matrix ``Q diag(eigenvalues) Q^T`` sharing the von Mises eigenvectors."""
    _, Q = pq_matrices(dim_mode)
    return Q @ np.diag(np.asarray(eigenvalues, dtype=float)) @ Q.T


@dataclass(frozen=True)
class IsotropicHardening:
    """Isotropic hardening energy psi_ih(alpha) = h/2 alpha^2 + q (alpha - (1 - exp(-delta alpha))/delta).

    ``h`` alone gives linear hardening, ``q`` and ``delta`` add exponential
    saturation. The conjugate pair is zeta_ih = psi_ih'(alpha).
    """

    h: float = 0.0
    q: float = 0.0
    delta: float = 0.0

    def __post_init__(self):
        if self.h < 0 or self.q < 0 or self.delta < 0:
            raise ValueError("hardening parameters must be nonnegative")
        if self.q > 0 and self.delta == 0:
            raise ValueError("saturation term needs delta > 0")

    @property
    def is_linear(self):
        return self.q == 0.0

    def energy(self, alpha):
        alpha = np.asarray(alpha, dtype=float)
        out = 0.5 * self.h * alpha**2
        if self.q:
            out = out + self.q * (alpha - (1.0 - np.exp(-self.delta * alpha)) / self.delta)
        return out

    def stress(self, alpha):
        """psi_ih'(alpha)."""
        alpha = np.asarray(alpha, dtype=float)
        return self.h * alpha + self.q * (1.0 - np.exp(-self.delta * alpha))

    def modulus(self, alpha):
        """psi_ih''(alpha)."""
        alpha = np.asarray(alpha, dtype=float)
        return self.h + self.q * self.delta * np.exp(-self.delta * alpha)


def _diagonal_in(Q, A, name, rtol=1e-12):
    D = Q.T @ A @ Q
    off = D - np.diag(np.diag(D))
    scale = max(np.abs(D).max(), 1e-300)
    if np.abs(off).max() > rtol * scale:
        raise ValueError(f"{name} does not share eigenvectors with the von Mises matrix P")
    return np.diag(D).copy()


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class VonMisesModel:
    dim_mode: DimMode
    C: np.ndarray
    sigma_y: float
    hardening: IsotropicHardening = IsotropicHardening()
    H: Optional[np.ndarray] = None
    P: np.ndarray = field(init=False, repr=False)
    Q: np.ndarray = field(init=False, repr=False)
    Lambda_P: np.ndarray = field(init=False, repr=False)
    Lambda_CP: np.ndarray = field(init=False, repr=False)
    Lambda_HP: np.ndarray = field(init=False, repr=False)
    Lambda_CHP: np.ndarray = field(init=False, repr=False)
    Cinv: np.ndarray = field(init=False, repr=False)
    Hinv: Optional[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        n = self.dim_mode.n_sigma
        C = np.asarray(self.C, dtype=float)
        if C.shape != (n, n):
            raise ValueError(f"C must be {n}x{n} for {self.dim_mode.name}")
        if not np.allclose(C, C.T, rtol=1e-14, atol=0.0):
            raise ValueError("C must be symmetric")
        if self.sigma_y <= 0:
            raise ValueError("sigma_y must be positive")
        P, Q = pq_matrices(self.dim_mode)
        lam_c = _diagonal_in(Q, C, "C")
        if lam_c.min() <= 0:
            raise ValueError("C must be positive definite")
        lam_p = np.diag(Q.T @ P @ Q).copy()
        if self.dim_mode is DimMode.THREE_D:
            lam_p[0] = 0.0
        set_ = object.__setattr__
        set_(self, "C", _frozen(C))
        set_(self, "P", _frozen(P))
        set_(self, "Q", _frozen(Q))
        set_(self, "Lambda_P", _frozen(lam_p))
        set_(self, "Lambda_CP", _frozen(lam_c * lam_p))
        set_(self, "Cinv", _frozen(Q @ np.diag(1.0 / lam_c) @ Q.T))
        if self.H is not None:
            H = np.asarray(self.H, dtype=float)
            if H.shape != (n, n):
                raise ValueError(f"H must be {n}x{n}")
            lam_h = _diagonal_in(Q, H, "H")
            if lam_h.min() <= 0:
                raise ValueError("H must be positive definite")
            set_(self, "H", _frozen(H))
            set_(self, "Lambda_HP", _frozen(lam_h * lam_p))
            set_(self, "Hinv", _frozen(Q @ np.diag(1.0 / lam_h) @ Q.T))
        else:
            set_(self, "Lambda_HP", _frozen(np.zeros(n)))
            set_(self, "Hinv", None)
        set_(self, "Lambda_CHP", _frozen(self.Lambda_CP + self.Lambda_HP))

    @classmethod
    def from_constants(cls, E, nu, sigma_y, h=0.0, dim_mode=DimMode.PLANE_STRESS,
                       q=0.0, delta=0.0, H=None):
        return cls(dim_mode, elastic_moduli(E, nu, dim_mode), sigma_y,
                   IsotropicHardening(h, q, delta), H)

    @property
    def n_sigma(self):
        return self.dim_mode.n_sigma

    @property
    def has_kinematic(self):
        return self.H is not None

    @property
    def stress_scale(self):
        return self.sigma_y

    @property
    def strain_scale(self):
        """Yield strain based on the stiffest elastic mode."""
        return self.sigma_y / float(np.max(np.diag(self.Q.T @ self.C @ self.Q)))

    @property
    def active_threshold(self):
        """Smallest multiplier counted as an active yield constraint."""
        return 1e-12 * self.strain_scale

    def kernel_params(self):
        n = self.n_sigma
        Hinv = self.Hinv if self.Hinv is not None else np.zeros((n, n))
        hd = self.hardening
        return (np.ascontiguousarray(self.C), np.ascontiguousarray(self.Cinv),
                np.ascontiguousarray(Hinv), np.ascontiguousarray(self.P),
                np.ascontiguousarray(self.Q), np.ascontiguousarray(self.Lambda_P),
                np.ascontiguousarray(self.Lambda_CP), np.ascontiguousarray(self.Lambda_HP),
                self.has_kinematic, float(self.sigma_y), float(hd.h), float(hd.q),
                float(hd.delta), float(self.active_threshold))

    def with_hardening(self, hardening):
        return VonMisesModel(self.dim_mode, self.C, self.sigma_y, hardening, self.H)


@dataclass
class MaterialState:
    sigma: np.ndarray
    zeta_kh: np.ndarray
    zeta_ih: float = 0.0
    alpha_ih: float = 0.0

    @classmethod
    def zero(cls, model):
        n = model.n_sigma
        return cls(np.zeros(n), np.zeros(n), 0.0, 0.0)

    def copy(self):
        return MaterialState(self.sigma.copy(), self.zeta_kh.copy(), self.zeta_ih, self.alpha_ih)


@dataclass
class ReturnMapResult:
    state: MaterialState
    lam: float
    tangent: np.ndarray
    yielded: bool
    ip_energy: float
    status: int = 0


def _check_vec(model, v, name):
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != model.n_sigma:
        raise ValueError(f"{name} has {v.shape[-1]} components, expected {model.n_sigma}")
    return v


def yield_value(model, sigma, zeta_kh, zeta_ih):
    """Von Mises yield function; negative inside the elastic region.

    Accepts single vectors or stacks with a leading batch axis.
    """
    s = _check_vec(model, sigma, "sigma") - _check_vec(model, zeta_kh, "zeta_kh")
    quad = np.einsum("...i,ij,...j->...", s, model.P, s)
    return np.sqrt(np.maximum(quad, 0.0)) - SQ23 * (model.sigma_y + np.asarray(zeta_ih))


def von_mises_stress(model, sigma):
    sigma = _check_vec(model, sigma, "sigma")
    return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", sigma, model.P, sigma), 0.0))


def complementary_energy(model, state_or_sigma, zeta_kh=None, zeta_ih=None, alpha_ih=None):
    """Complementary stored energy per unit volume.

    The isotropic part is evaluated through the conjugate pair as
    zeta_ih * alpha_ih - psi_ih(alpha_ih), which avoids inverting psi_ih'.
    """
    if isinstance(state_or_sigma, MaterialState):
        st = state_or_sigma
        sigma, zeta_kh, zeta_ih, alpha_ih = st.sigma, st.zeta_kh, st.zeta_ih, st.alpha_ih
    else:
        sigma = state_or_sigma
    sigma = _check_vec(model, sigma, "sigma")
    out = 0.5 * np.einsum("...i,ij,...j->...", sigma, model.Cinv, sigma)
    if model.has_kinematic:
        zeta_kh = _check_vec(model, zeta_kh, "zeta_kh")
        out = out + 0.5 * np.einsum("...i,ij,...j->...", zeta_kh, model.Hinv, zeta_kh)
    alpha_ih = np.asarray(alpha_ih, dtype=float)
    out = out + np.asarray(zeta_ih) * alpha_ih - model.hardening.energy(alpha_ih)
    return out


def ip_energy(model, sigma, zeta_kh, zeta_ih, alpha_ih, deps, b_sigma, b_kh, b_ih):
    """Objective of the integration-point primal problem at a given state.

    psi_c(sigma, zeta) - (deps + b_sigma)^T sigma - b_kh^T zeta_kh - b_ih zeta_ih
    """
    out = complementary_energy(model, sigma, zeta_kh, zeta_ih, alpha_ih)
    out = out - np.einsum("...i,...i->...", np.asarray(deps) + b_sigma, sigma)
    if model.has_kinematic:
        out = out - np.einsum("...i,...i->...", b_kh, zeta_kh)
    return out - np.asarray(b_ih) * np.asarray(zeta_ih)


def history_terms(model, state):
    """Linear terms (b_sigma, b_kh, b_ih) = gradient of psi_c at the committed state."""
    b_sigma = state.sigma @ model.Cinv.T
    b_kh = state.zeta_kh @ model.Hinv.T if model.has_kinematic else np.zeros_like(state.zeta_kh)
    return b_sigma, b_kh, state.alpha_ih


def trial_state(model, state_n, d_eps):
    """Elastic predictor: frozen internal variables, sigma_tr = sigma_n + C d_eps."""
    d_eps = _check_vec(model, d_eps, "d_eps")
    return state_n.sigma + model.C @ d_eps, state_n.zeta_kh.copy(), state_n.zeta_ih


def return_map(model, state_n, d_eps):
    """Solve the integration-point convex problem for one strain increment."""
    d_eps = _check_vec(model, d_eps, "d_eps")
    sig, zkh, zih, alpha, lam, tang, status = kernels.return_map_batch(
        state_n.sigma[None, :], state_n.zeta_kh[None, :], np.array([state_n.zeta_ih]),
        np.array([state_n.alpha_ih]), d_eps[None, :], model.kernel_params())
    if status[0] & kernels.BRACKET_FAILURE:
        raise ReturnMapError("could not bracket the hardening equation; "
                             "check that the hardening law is convex")
    state = MaterialState(sig[0], zkh[0], float(zih[0]), float(alpha[0]))
    b_sigma, b_kh, b_ih = history_terms(model, state_n)
    energy = ip_energy(model, state.sigma, state.zeta_kh, state.zeta_ih, state.alpha_ih,
                       d_eps, b_sigma, b_kh, b_ih)
    return ReturnMapResult(state, float(lam[0]), tang[0], bool(status[0] & kernels.PLASTIC),
                           float(energy), int(status[0]))


def _yield_derivatives(model, state):
    s = state.sigma - state.zeta_kh
    Ps = model.P @ s
    nrm = math.sqrt(s @ Ps)
    nv = Ps / nrm
    N = (model.P - np.outer(nv, nv)) / nrm
    return nv, N


def consistent_tangent(model, state, lam):
    """Derivative of the returned stress with respect to the strain increment.

    Elastic points (``lam`` at or below the activity threshold) get ``C``.
    Plastic points solve the bordered derivative system of the KKT conditions.
    """
    if lam <= model.active_threshold:
        return np.array(model.C)
    n = model.n_sigma
    Hinv = model.Hinv if model.has_kinematic else np.zeros((n, n))
    ddpsi = float(model.hardening.modulus(state.alpha_ih))
    return kernels._bordered_tangent(np.ascontiguousarray(state.sigma - state.zeta_kh), float(lam),
                                     ddpsi, np.ascontiguousarray(model.Cinv),
                                     np.ascontiguousarray(Hinv), np.ascontiguousarray(model.P),
                                     model.has_kinematic)


def consistent_tangent_direct(model, state, lam):
    """Consistent tangent by explicit Schur complements of the derivative blocks.

    Needs a strictly convex isotropic hardening energy (psi_ih'' > 0) since
    the generalized-stress block is inverted.
    """
    if lam <= model.active_threshold:
        return np.array(model.C)
    n = model.n_sigma
    nv, N = _yield_derivatives(model, state)
    ddpsi = float(model.hardening.modulus(state.alpha_ih))
    if ddpsi <= 0:
        raise ValueError("direct tangent needs psi_ih'' > 0")
    Kss = model.Cinv + lam * N
    if model.has_kinematic:
        nz = n + 1
        Ksx = np.zeros((n, nz))
        Ksx[:, :n] = -lam * N
        Kxx = np.zeros((nz, nz))
        Kxx[:n, :n] = model.Hinv + lam * N
        Kxx[n, n] = 1.0 / ddpsi
        Phix = np.concatenate([-nv, [-SQ23]])[None, :]
    else:
        Ksx = np.zeros((n, 1))
        Kxx = np.array([[1.0 / ddpsi]])
        Phix = np.array([[-SQ23]])
    Phis = nv[None, :]
    Kss_inv = np.linalg.inv(Kss)
    Kbar_xx = Kxx - Ksx.T @ Kss_inv @ Ksx
    Kbar_xx_inv = np.linalg.inv(Kbar_xx)
    Phibar_x = Phix - Phis @ Kss_inv @ Ksx
    Phibar_s = Phis - Phibar_x @ Kbar_xx_inv @ Ksx.T
    Xi = Phis @ Kss_inv @ Phis.T + Phibar_x @ Kbar_xx_inv @ Phibar_x.T
    inner = Kss + Ksx @ Kbar_xx_inv @ Ksx.T - Phibar_s.T @ np.linalg.solve(Xi, Phibar_s)
    K = Kss_inv @ inner @ Kss_inv
    return 0.5 * (K + K.T)


def kkt_residual_closed_form(model, state_n, d_eps, result):
    """Max-norm residual of the rewritten return-map optimality conditions.

    Stress-like rows are scaled by sigma_y and the hardening row by the
    yield strain.
    """
    st = result.state
    lam = result.lam
    sig_tr, zkh_tr, _ = trial_state(model, state_n, d_eps)
    R = model.sigma_y + st.zeta_ih
    c = lam / (SQ23 * R)
    s = st.sigma - st.zeta_kh
    rows = [np.abs(st.sigma + c * model.C @ model.P @ s - sig_tr) / model.sigma_y]
    if model.has_kinematic:
        rows.append(np.abs(st.zeta_kh - c * model.H @ model.P @ s - zkh_tr) / model.sigma_y)
    rows.append([abs(st.alpha_ih - lam * SQ23 - state_n.alpha_ih) / model.strain_scale])
    phi = float(yield_value(model, st.sigma, st.zeta_kh, st.zeta_ih))
    if lam > 0:
        rows.append([abs(phi) / model.sigma_y])
    else:
        rows.append([max(phi, 0.0) / model.sigma_y])
    return float(max(np.max(r) for r in rows))
