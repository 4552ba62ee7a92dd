"""Incremental state update by Newton minimization of the reduced dual."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .fem import Discretization
from .material import MaterialState, ReturnMapError, VonMisesModel, ip_energy

log = logging.getLogger(__name__)


NOISE_FACTOR = 64.0


class ConvergenceError(RuntimeError):
    pass


@dataclass
class NewtonConfig:
    tol: float = 1e-9
    maxiter: int = 50
    beta: float = 1e-4
    gamma: float = 0.5
    maxbacktrack: int = 30
    relative: bool = False

    def __post_init__(self):
        if not 0.0 < self.beta < 0.5:
            raise ValueError("beta must lie in (0, 0.5)")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.tol <= 0 or self.maxiter < 1 or self.maxbacktrack < 0:
            raise ValueError("tol, maxiter and maxbacktrack must be positive")


@dataclass
class IterationRecord:
    iteration: int
    residual_norm: float
    objective: float
    step_length: Optional[float] = None
    backtracks: Optional[int] = None
    noise_step: bool = False


@dataclass
class SolveReport:
    records: list = field(default_factory=list)
    converged: bool = False
    mu: Optional[np.ndarray] = None
    wall_time: float = 0.0
    backtrack_exhausted: bool = False
    regularized: bool = False

    @property
    def iterations(self):
        return len(self.records)

    @property
    def residuals(self):
        return [r.residual_norm for r in self.records]


@dataclass
class IpResults:
    """Return-map output for every integration point, structure of arrays."""
    sigma: np.ndarray
    zeta_kh: np.ndarray
    zeta_ih: np.ndarray
    alpha_ih: np.ndarray
    lam: np.ndarray
    tangent: np.ndarray
    status: np.ndarray
    energy: np.ndarray

    @property
    def yielded(self):
        return (self.status & kernels.PLASTIC) != 0

    def state(self, m):
        return MaterialState(self.sigma[m].copy(), self.zeta_kh[m].copy(),
                             float(self.zeta_ih[m]), float(self.alpha_ih[m]))


@dataclass
class Evaluation:
    mu: np.ndarray
    objective: float
    gradient: np.ndarray
    results: IpResults
    objective_scale: float = 0.0
    _disc: Discretization = field(repr=False, default=None)
    _hessian: object = field(repr=False, default=None)

    @property
    def hessian(self):
        if self._hessian is None:
            self._hessian = self._disc.assemble_tangent(self.results.tangent)
        return self._hessian


class ReducedDual:
    """Reduced dual objective of one load increment and its Newton minimizer.

    Parameters
    ----------
    disc : Discretization
    model : VonMisesModel
        Shared by all integration points.
    p : array, optional
        External load increment on the free DOFs; zero by default.
    """

    def __init__(self, disc: Discretization, model: VonMisesModel, p=None):
        if model.n_sigma != 3:
            raise ValueError("the quadrilateral discretization needs a plane-stress model")
        self.disc = disc
        self.model = model
        m, n = disc.n_ip, model.n_sigma
        self.p = np.zeros(disc.dofmap.n_free) if p is None else np.asarray(p, dtype=float)
        self.sigma = np.zeros((m, n))
        self.zeta_kh = np.zeros((m, n))
        self.zeta_ih = np.zeros(m)
        self.alpha_ih = np.zeros(m)
        self.b_sigma = np.zeros((m, n))
        self.b_kh = np.zeros((m, n))
        self.b_ih = np.zeros(m)
        self.u = np.zeros(disc.dofmap.n_total)
        self.increment = 0
        self.first_yield = np.zeros(m, dtype=np.int64)
        self._params = model.kernel_params()

    # -- evaluation ------------------------------------------------------

    def return_maps(self, deps):
        sig, zkh, zih, alpha, lam, tang, status = kernels.return_map_batch(
            self.sigma, self.zeta_kh, self.zeta_ih, self.alpha_ih, deps, self._params)
        bad = np.flatnonzero(status & kernels.BRACKET_FAILURE)
        if bad.size:
            raise ReturnMapError(f"return map failed at integration point {bad[0]} "
                                 f"(element {self.disc.ip_element[bad[0]]})")
        energy = ip_energy(self.model, sig, zkh, zih, alpha, deps,
                           self.b_sigma, self.b_kh, self.b_ih)
        return IpResults(sig, zkh, zih, alpha, lam, tang, status, energy)

    def evaluate(self, mu, mu_prsc=None):
        """Objective and gradient at ``mu``; the Hessian is assembled on first access."""
        mu = np.asarray(mu, dtype=float)
        deps = self.disc.effective_strain_increment(mu, mu_prsc)
        res = self.return_maps(deps)
        obj = -mu @ self.p - self.disc.weights @ res.energy
        grad = self.disc.assemble_gradient(res.sigma, self.p)
        scale = abs(mu @ self.p) + self.disc.weights @ np.abs(res.energy)
        return Evaluation(mu, float(obj), grad, res, float(scale), self.disc)

    def objective(self, mu, mu_prsc=None):
        return self.evaluate(mu, mu_prsc).objective

    def primal_objective(self, results: IpResults, mu_prsc=None):
        """Primal objective at collected stresses, with prescribed-displacement work."""
        deps_p = self.disc.effective_strain_increment(np.zeros(self.disc.dofmap.n_free), mu_prsc)
        e = ip_energy(self.model, results.sigma, results.zeta_kh, results.zeta_ih,
                      results.alpha_ih, deps_p, self.b_sigma, self.b_kh, self.b_ih)
        return float(self.disc.weights @ e)

    def duality_gap(self, ev: Evaluation, mu_prsc=None):
        return self.primal_objective(ev.results, mu_prsc) + ev.objective

    # -- Newton ----------------------------------------------------------

    def _direction(self, ev, report):
        H = ev.hessian.tocsc()
        try:
            return spla.splu(H).solve(-ev.gradient)
        except RuntimeError:
            log.warning("tangent factorization failed; retrying with diagonal regularization")
            report.regularized = True
            d = H.diagonal()
            H = (H + sp.diags(1e-10 * np.maximum(np.abs(d), 1e-300))).tocsc()
            try:
                return spla.splu(H).solve(-ev.gradient)
            except RuntimeError as exc:
                raise ConvergenceError("tangent factorization failed after regularization") from exc

    def newton_solve(self, mu_prsc=None, mu0=None, cfg: NewtonConfig = NewtonConfig(),
                     on_iteration: Optional[Callable] = None):
        """Minimize the reduced dual for one increment.

        Returns ``(mu, evaluation, report)``.  ``on_iteration(k, ev, dmu)`` is
        called before each line search with the 1-based iteration index.
        """
        t0 = time.perf_counter()
        mu = np.zeros(self.disc.dofmap.n_free) if mu0 is None else np.array(mu0, dtype=float)
        report = SolveReport()
        ev = self.evaluate(mu, mu_prsc)
        tol = cfg.tol
        if cfg.relative:
            tol = cfg.tol * max(np.linalg.norm(ev.gradient), 1.0)
        for k in range(1, cfg.maxiter + 1):
            r = float(np.linalg.norm(ev.gradient))
            rec = IterationRecord(k, r, ev.objective)
            report.records.append(rec)
            if r <= tol:
                report.converged = True
                break
            dmu = self._direction(ev, report)
            slope = float(ev.gradient @ dmu)
            if not slope < 0:
                raise ConvergenceError(f"iteration {k}: Newton direction is not a descent direction")
            if on_iteration is not None:
                on_iteration(k, ev, dmu)
            s = 1.0
            nback = 0
            # Once the predicted decrease drops under the rounding level of
            # the summed objective, the decrease test only compares noise.
            # There the full step is judged by the gradient norm instead.
            noisy = -slope <= NOISE_FACTOR * np.finfo(float).eps * max(ev.objective_scale, 1e-300)
            while True:
                trial = self.evaluate(mu + s * dmu, mu_prsc)
                if trial.objective <= ev.objective + cfg.beta * s * slope:
                    break
                if noisy and nback == 0 and np.linalg.norm(trial.gradient) < r:
                    rec.noise_step = True
                    break
                if nback == cfg.maxbacktrack:
                    log.warning("iteration %d: backtracking exhausted, accepting s=%g", k, s)
                    report.backtrack_exhausted = True
                    break
                s *= cfg.gamma
                nback += 1
            rec.step_length, rec.backtracks = s, nback
            mu = trial.mu
            ev = trial
        report.mu = mu
        report.wall_time = time.perf_counter() - t0
        return mu, ev, report

    def line_search_profile(self, ev: Evaluation, dmu, s_grid, mu_prsc=None, beta=1e-4):
        """Objective along ``mu + s dmu`` with its first/second order models.

        Returns an array with columns
        (s, objective, first_order, second_order, sufficient_decrease).
        """
        f0 = ev.objective
        g = float(ev.gradient @ dmu)
        q = float(dmu @ (ev.hessian @ dmu))
        rows = []
        for s in s_grid:
            f = f0 if s == 0 else self.objective(ev.mu + s * dmu, mu_prsc)
            rows.append((s, f, f0 + s * g, f0 + s * g + 0.5 * s * s * q, f0 + beta * s * g))
        return np.array(rows, dtype=float)

    # -- commit ----------------------------------------------------------

    def commit_increment(self, mu, ev: Evaluation, mu_prsc=None, report: SolveReport = None,
                         force=False):
        """Adopt the increment's integration-point states as the new history."""
        if report is not None and not report.converged and not force:
            raise ConvergenceError("refusing to commit an unconverged increment")
        res = ev.results
        self.increment += 1
        newly = res.yielded & (self.first_yield == 0)
        self.first_yield[newly] = self.increment
        self.sigma = res.sigma.copy()
        self.zeta_kh = res.zeta_kh.copy()
        self.zeta_ih = res.zeta_ih.copy()
        self.alpha_ih = res.alpha_ih.copy()
        self.b_sigma = self.sigma @ self.model.Cinv.T
        if self.model.has_kinematic:
            self.b_kh = self.zeta_kh @ self.model.Hinv.T
        self.b_ih = self.alpha_ih.copy()
        self.u = self.u + self.disc.dofmap.full(mu, mu_prsc)

    def yielded_ever(self):
        return self.first_yield > 0


def contraction_constants(residuals, floor=None):
    """Ratios ``r[k+1] / r[k]**2`` over the last three residuals above ``floor``.

    Residuals at the rounding floor carry no rate information, so they are
    dropped first.  The default floor is ``1e3 * eps * r[0]``.
    """
    r = np.asarray(residuals, dtype=float)
    if floor is None:
        floor = 1e3 * np.finfo(float).eps * r[0]
    tail = r[r > floor][-3:]
    return tail[1:] / tail[:-1] ** 2


def observed_order(residuals, floor=None):
    """Convergence order ``log(r2/r1) / log(r1/r0)`` of the last three residuals above ``floor``."""
    r = np.asarray(residuals, dtype=float)
    if floor is None:
        floor = 1e3 * np.finfo(float).eps * r[0]
    tail = r[r > floor][-3:]
    if len(tail) < 3 or not tail[1] < tail[0]:
        return float("nan")
    return float(np.log(tail[2] / tail[1]) / np.log(tail[1] / tail[0]))


def is_quadratic_tail(residuals, floor=None, factor=10.0, min_order=1.5):
    """True when one constant C bounds both contraction ratios of the tail.

    C is fitted in log space (geometric mean of the two ratios); both
    ratios must stay within ``factor`` of it, and the observed order must
    reach ``min_order`` so a slow linear tail does not pass.
    """
    c = contraction_constants(residuals, floor)
    if len(c) < 2:
        return False
    fit = math.sqrt(c[0] * c[1])
    return bool(c.max() <= factor * fit and observed_order(residuals, floor) >= min_order)
