"""
=============================================================================
engine/laplace.py - Joint Likelihood, Inner Newton & Laplace Approximation
=============================================================================
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from etc.conf import stnngp_setting
from etc.exceptions import InnerDivergenceError, InnerIterationError, SaddlePointError
from observation.families import ResponseFamily, eta_terms
from process.state import LOG_2PI, TemporalParams

logger = logging.getLogger(__name__)

MAX_HALVINGS = 40
SOLVE_CHUNK = 256
# accepted rounding noise in the step-halving decrease test
DECREASE_SLACK = 1e-14


def factorize(H):
    """Sparse LU of a symmetric matrix without pivoting off the diagonal"""
    return splu(
        sparse.csc_matrix(H),
        permc_spec='MMD_AT_PLUS_A',
        diag_pivot_thresh=0.0,
        options={'SymmetricMode': True},
    )


@dataclass(frozen=True, eq=False)
class InnerResult:
    u: np.ndarray
    joint_nll: float
    iterations: int
    gradient_norm: float


@dataclass(frozen=True, eq=False)
class LaplaceResult:
    nll: float
    inner: InnerResult
    logdet: float


class LaplaceObjective:
    """
    Negative joint log-likelihood of (data, random effects) for a prepared
    model, its inner mode and the Laplace-approximate marginal.
    """

    def __init__(self, model, inner_tol=None, inner_max_iter=None, random_effects=True):
        self.model = model
        self.inner_tol = inner_tol if inner_tol is not None else stnngp_setting('INNER_TOL')
        self.inner_max_iter = inner_max_iter if inner_max_iter is not None else stnngp_setting('INNER_MAX_ITER')
        self.random_effects = random_effects

    @property
    def n_effects(self):
        return self.model.n_effects if self.random_effects else 0

    # ======================== Pieces ========================

    def family(self, params):
        return ResponseFamily(self.model.family, params.response_params(self.model.family))

    def temporal(self, params):
        return TemporalParams(mu=params['mu'], phi=params['phi'], sigma=params['sigma'])

    def form(self, params):
        return self.model.operator().evaluate(self.temporal(params), tau=params['tau'])

    def eta(self, params, u):
        fixed = self.model.X @ params.beta if params.beta.size else np.zeros(self.model.n_obs)
        if not self.random_effects:
            return fixed
        return fixed + u[self.model.obs_effect]

    def _scatter(self, values):
        """Z' values: sum observation terms onto their effects"""
        return np.bincount(self.model.obs_effect, weights=values, minlength=self.model.n_effects)

    def data_terms(self, params, u):
        return eta_terms(self.model.y, self.eta(params, u), self.family(params), self.model.link)

    # ======================== Joint Likelihood ========================

    def joint_nll(self, params, u, form=None):
        """-(l_y + l_w)"""
        ll, _, _ = self.data_terms(params, u)
        total = -float(ll.sum())
        if self.random_effects:
            form = form or self.form(params)
            total -= form.loglik(u)
        return total if np.isfinite(total) else np.inf

    def gradient(self, params, u, form=None):
        form = form or self.form(params)
        _, g1, _ = self.data_terms(params, u)
        return -form.gradient(u) - self._scatter(g1)

    def hessian(self, params, u, form=None, clip=False):
        """Joint Hessian in u; clip drops negative data curvature"""
        form = form or self.form(params)
        _, _, g2 = self.data_terms(params, u)
        curvature = -g2
        if clip:
            curvature = np.maximum(curvature, 0.0)
        return (form.precision() + sparse.diags(self._scatter(curvature))).tocsc()

    # ======================== Inner Optimisation ========================

    def inner_optimize(self, params, u0, free=None):
        """
        Newton iterations on u with step halving. free, if given, is a
        boolean mask of the effects allowed to move.
        """
        form = self.form(params)
        u = np.array(u0, dtype=float, copy=True)
        free = np.ones(u.size, dtype=bool) if free is None else np.asarray(free, dtype=bool)
        f = self.joint_nll(params, u, form)
        if not np.isfinite(f):
            raise InnerDivergenceError("non-finite objective at the starting point")

        for iteration in range(self.inner_max_iter + 1):
            g = self.gradient(params, u, form)[free]
            g_norm = float(np.max(np.abs(g))) if g.size else 0.0
            if g_norm < self.inner_tol:
                logger.debug("Inner optimum after %d Newton steps (|g| = %.3g)", iteration, g_norm)
                return InnerResult(u=u, joint_nll=f, iterations=iteration, gradient_norm=g_norm)
            if iteration == self.inner_max_iter:
                raise InnerIterationError(
                    f"{self.inner_max_iter} Newton steps without convergence (max |gradient| = {g_norm:.3g})"
                )
            H = self.hessian(params, u, form, clip=True)[free][:, free]
            step = factorize(H).solve(-g)
            if not np.all(np.isfinite(step)):
                raise InnerDivergenceError("non-finite Newton step")

            t = 1.0
            for _ in range(MAX_HALVINGS):
                trial = u.copy()
                trial[free] += t * step
                f_trial = self.joint_nll(params, trial, form)
                if np.isfinite(f_trial) and f_trial <= f + DECREASE_SLACK * max(1.0, abs(f)):
                    break
                t *= 0.5
            else:
                raise InnerDivergenceError(
                    f"step halving failed to decrease the objective (max |gradient| = {g_norm:.3g})"
                )
            u, f = trial, f_trial

    # ======================== Laplace Approximation ========================

    def laplace_nll(self, params, u0=None, free=None):
        """J(u_hat) + 1/2 log det H - (n_u / 2) log(2 pi)"""
        if not self.random_effects:
            nll = self.joint_nll(params, np.zeros(0))
            return LaplaceResult(nll=nll, inner=InnerResult(np.zeros(0), nll, 0, 0.0), logdet=0.0)
        u0 = self.initial_effects(params) if u0 is None else u0
        inner = self.inner_optimize(params, u0, free=free)
        H = self.hessian(params, inner.u)
        if free is not None:
            H = H[free][:, free]
        logdet = self.logdet(H)
        n_u = H.shape[0]
        nll = inner.joint_nll + 0.5 * logdet - 0.5 * n_u * LOG_2PI
        return LaplaceResult(nll=float(nll), inner=inner, logdet=logdet)

    @staticmethod
    def logdet(H):
        if H.shape[0] == 0:
            return 0.0
        try:
            lu = factorize(H)
        except RuntimeError:
            raise SaddlePointError("joint Hessian is singular")
        diag = lu.U.diagonal()
        if not np.all(diag > 0):
            raise SaddlePointError("joint Hessian is not positive definite")
        return float(np.log(diag).sum())

    def initial_effects(self, params):
        return np.full(self.model.n_effects, float(params['mu']))

    def effect_standard_errors(self, params, u, free=None):
        """sqrt(diag(H^-1)) at u, solved a block of unit vectors at a time"""
        H = self.hessian(params, u)
        if free is not None:
            H = H[free][:, free]
        n = H.shape[0]
        if n == 0:
            return np.zeros(0)
        lu = factorize(H)
        if not np.all(lu.U.diagonal() > 0):
            raise SaddlePointError("joint Hessian is not positive definite")
        variances = np.empty(n)
        for start in range(0, n, SOLVE_CHUNK):
            stop = min(start + SOLVE_CHUNK, n)
            rhs = np.zeros((n, stop - start))
            rhs[np.arange(start, stop), np.arange(stop - start)] = 1.0
            variances[start:stop] = lu.solve(rhs)[np.arange(start, stop), np.arange(stop - start)]
        return np.sqrt(np.maximum(variances, 0.0))
