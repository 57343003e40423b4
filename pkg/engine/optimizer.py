"""
=============================================================================
engine/optimizer.py - Outer Optimisation, Standard Errors & Fit Results
=============================================================================

The outer problem is quasi-Newton (BFGS) over the free parameters in their
unconstrained transforms. Gradients are central finite differences of the
Laplace marginal. Every evaluation in one outer iteration starts the inner
Newton solve from the same warm random effects, so results do not depend on
the order in which worker threads finish.

Convergence needs both a small gradient max-norm and a small relative
nll change over the last accepted step; when only the gradient test has
stopped BFGS it is restarted with a tighter gtol.
"""

import logging
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from etc.conf import stnngp_setting
from etc.exceptions import InnerDivergenceError, SaddlePointError
from .laplace import LaplaceObjective

logger = logging.getLogger(__name__)

FD_RELATIVE_STEP = 1e-5
FD_MIN_STEP = 1e-7
HESSIAN_STEP = 1e-4
RESTART_GTOL_FACTOR = 0.01
MAX_RESTARTS = 3


class _InnerFailure(Exception):
    """Finite-difference stencil hit a failed inner solve"""


@dataclass(frozen=True, eq=False)
class FitResult:
    model: object
    params: object
    se: dict
    u: np.ndarray
    u_se: np.ndarray
    nll: float
    message: str
    converged: bool
    iterations: int
    n_evaluations: int = 0
    free_names: tuple = ()
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    nll_history: tuple = ()

    @classmethod
    def pinned(cls, model, params, u, u_se=None):
        """Parameters and random effects set by hand, e.g. for simulation studies"""
        u = np.asarray(u, dtype=float)
        return cls(
            model=model,
            params=params.with_fixed(params.names),
            se={name: 0.0 for name in params.names},
            u=u,
            u_se=np.zeros(u.size) if u_se is None else np.asarray(u_se, dtype=float),
            nll=np.nan,
            message='relative convergence',
            converged=True,
            iterations=0,
        )

    @property
    def status(self):
        return 'converged' if self.converged else 'not_converged'

    def beta_covariance(self):
        """Var(beta) on the natural scale; fixed coefficients have zero rows"""
        names = self.params.beta_names
        cov = np.zeros((len(names), len(names)))
        position = {name: i for i, name in enumerate(self.free_names)}
        free = [(i, position[name]) for i, name in enumerate(names) if name in position]
        for a, pa in free:
            for b, pb in free:
                cov[a, b] = self.covariance[pa, pb]
        return cov

    def parameter_table(self):
        """Rows of (group, name, estimate, se, fixed)"""
        return [
            (p.group, p.report_name, p.value, self.se[p.name], p.fixed)
            for p in self.params
        ]


# ======================== Outer Optimisation ========================

class OuterOptimizer:

    def __init__(self, objective, gtol=None, rel_tol=None, max_iter=None, threads=None):
        self.objective = objective
        self.gtol = gtol if gtol is not None else stnngp_setting('OUTER_GTOL')
        self.rel_tol = rel_tol if rel_tol is not None else stnngp_setting('OUTER_REL_TOL')
        self.max_iter = max_iter if max_iter is not None else stnngp_setting('OUTER_MAX_ITER')
        self.threads = threads
        self._cache = {}
        self.warm_u = None
        self.n_evaluations = 0
        self.inner_failures = 0
        self.nll_history = []
        self._counter_lock = threading.Lock()

    def _params(self, base, x):
        return base.with_free(x)

    def _solve(self, base, x, u0):
        """(nll, u) at x starting from u0; a failed inner solve gives (inf, None)"""
        try:
            result = self.objective.laplace_nll(self._params(base, x), u0=u0)
        except (InnerDivergenceError, SaddlePointError) as exc:
            logger.debug("Inner failure at %s: %s", np.array2string(x, precision=4), exc)
            with self._counter_lock:
                self.inner_failures += 1
            return np.inf, None
        with self._counter_lock:
            self.n_evaluations += 1
        return result.nll, result.inner.u

    def evaluate(self, base, x):
        x = np.asarray(x, dtype=float)
        key = x.tobytes()
        if key not in self._cache:
            self._cache[key] = self._solve(base, x, self.warm_u)
        return self._cache[key]

    def _map(self, base, points, pool):
        missing = [x for x in points if x.tobytes() not in self._cache]
        for x, value in zip(missing, pool.map(lambda z: self._solve(base, z, self.warm_u), missing)):
            self._cache[x.tobytes()] = value
        return [self._cache[x.tobytes()][0] for x in points]

    def gradient(self, base, x, pool):
        x = np.asarray(x, dtype=float)
        steps = np.maximum(FD_RELATIVE_STEP * np.abs(x), FD_MIN_STEP)
        points = []
        for j, h in enumerate(steps):
            for sign in (1.0, -1.0):
                z = x.copy()
                z[j] += sign * h
                points.append(z)
        values = self._map(base, points, pool)
        f0 = self.evaluate(base, x)[0]
        grad = np.empty(x.size)
        for j, h in enumerate(steps):
            up, down = values[2 * j], values[2 * j + 1]
            if np.isfinite(up) and np.isfinite(down):
                grad[j] = (up - down) / (2.0 * h)
            elif np.isfinite(up) and np.isfinite(f0):
                grad[j] = (up - f0) / h
            elif np.isfinite(down) and np.isfinite(f0):
                grad[j] = (f0 - down) / h
            else:
                raise _InnerFailure()
        return grad

    def run(self, params):
        x0 = params.free_vector()
        u0 = self.objective.initial_effects(params) if self.objective.random_effects else np.zeros(0)
        # the starting point must be evaluable; errors here propagate
        start = self.objective.laplace_nll(params, u0=u0)
        self.warm_u = start.inner.u
        self._cache[x0.tobytes()] = (start.nll, start.inner.u)
        self.nll_history = [start.nll]
        logger.info("Outer start: nll = %.8g with %d free parameters", start.nll, x0.size)

        if x0.size == 0:
            return x0, 'relative convergence', True, 0

        x = x0
        round_gtol = self.gtol
        iterations = 0
        restarts = 0
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            def fun(z):
                return self.evaluate(params, z)[0]

            def jac(z):
                return self.gradient(params, z, pool)

            def callback(xk):
                nll, u = self.evaluate(params, xk)
                if u is not None:
                    self.warm_u = u
                self.nll_history.append(nll)
                logger.info("Outer iteration %d: nll = %.8g", len(self.nll_history) - 1, nll)

            while True:
                try:
                    result = optimize.minimize(
                        fun, x, jac=jac, method='BFGS', callback=callback,
                        options={'gtol': round_gtol, 'norm': np.inf, 'maxiter': self.max_iter - iterations},
                    )
                except _InnerFailure:
                    best = self._best_point(params)
                    logger.info("Outer optimisation stopped: inner divergence")
                    return best, 'inner divergence', False, len(self.nll_history) - 1
                iterations += int(result.nit)
                if result.nit == 0 and np.isfinite(result.fun):
                    # no step taken: the accepted nll is unchanged
                    self.nll_history.append(float(result.fun))
                x = result.x
                if result.status != 0 or self.relative_change() < self.rel_tol:
                    break
                if restarts == MAX_RESTARTS or iterations >= self.max_iter:
                    break
                restarts += 1
                round_gtol *= RESTART_GTOL_FACTOR
                logger.info("Gradient test met but nll still moving; restarting with gtol = %g", round_gtol)

        message = self._message(result, iterations)
        logger.info("Outer optimisation finished after %d iterations: %s", iterations, message)
        x = result.x if np.isfinite(result.fun) else self._best_point(params)
        return x, message, message == 'relative convergence', iterations

    def _best_point(self, params):
        finite = [(value[0], key) for key, value in self._cache.items() if np.isfinite(value[0])]
        _, key = min(finite)
        return np.frombuffer(key, dtype=float).copy()

    def relative_change(self):
        """|nll change| of the last accepted step, relative to max(|nll|, 1)"""
        if len(self.nll_history) < 2:
            return 0.0
        previous, last = self.nll_history[-2], self.nll_history[-1]
        return abs(previous - last) / max(abs(last), 1.0)

    def _message(self, result, iterations=0):
        """Converged only when both the nll change and the gradient max-norm are small"""
        if result.status == 1 or (result.status == 0 and iterations >= self.max_iter
                                  and self.relative_change() >= self.rel_tol):
            return 'iteration limit'
        gradient = np.asarray(getattr(result, 'jac', np.zeros(0)), dtype=float)
        small_gradient = gradient.size == 0 or float(np.max(np.abs(gradient))) <= self.gtol
        if result.status in (0, 2) and self.relative_change() < self.rel_tol and small_gradient:
            return 'relative convergence'
        if self.inner_failures and not np.isfinite(result.fun):
            return 'inner divergence'
        return 'false convergence'


# ======================== Standard Errors ========================

def parameter_hessian(objective, params, u0, threads=None):
    """
    Finite-difference Hessian of the Laplace marginal in the free
    transformed parameters, from the four-point second-difference stencil.
    """
    x = params.free_vector()
    k = x.size
    steps = HESSIAN_STEP * (1.0 + np.abs(x))

    def value(z):
        try:
            return objective.laplace_nll(params.with_free(z), u0=u0).nll
        except (InnerDivergenceError, SaddlePointError) as exc:
            logger.debug("Hessian stencil point failed: %s", exc)
            return np.nan

    stencils = []
    for i in range(k):
        for j in range(i, k):
            corners = []
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                z = x.copy()
                z[i] += si * steps[i]
                z[j] += sj * steps[j]
                corners.append(z)
            stencils.append((i, j, corners))

    points = [z for _, _, corners in stencils for z in corners]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        values = list(pool.map(value, points))

    H = np.empty((k, k))
    for n, (i, j, _) in enumerate(stencils):
        pp, pm, mp, mm = values[4 * n:4 * n + 4]
        H[i, j] = H[j, i] = (pp - pm - mp + mm) / (4.0 * steps[i] * steps[j])
    return H


def invert_parameter_hessian(H):
    """Covariance in the transformed space; NaN when H is not positive definite"""
    k = H.shape[0]
    if k == 0:
        return np.zeros((0, 0))
    try:
        if not np.all(np.isfinite(H)):
            raise linalg.LinAlgError("non-finite entries")
        factor = linalg.cho_factor(H)
    except linalg.LinAlgError:
        message = "Parameter Hessian is not positive definite; standard errors are NaN."
        logger.warning(message)
        warnings.warn(message, RuntimeWarning)
        return np.full((k, k), np.nan)
    return linalg.cho_solve(factor, np.eye(k))


def standard_errors(objective, params, u, threads=None):
    """
    Natural-scale parameter SEs (delta method through the transforms) and
    the covariance of the free transformed parameters. Fixed parameters
    get SE 0.
    """
    free_names = params.free_names
    if free_names:
        H = parameter_hessian(objective, params, u, threads=threads)
        covariance = invert_parameter_hessian(H)
    else:
        covariance = np.zeros((0, 0))
    jac = np.abs(params.free_jacobian())
    free_se = jac * np.sqrt(np.where(np.diag(covariance) >= 0, np.diag(covariance), np.nan))
    se = {name: 0.0 for name in params.names}
    se.update({name: float(s) for name, s in zip(free_names, free_se)})
    return se, covariance


# ======================== Entry Point ========================

def fit(model, params, *, inner_tol=None, inner_max_iter=None, outer_gtol=None,
        outer_rel_tol=None, outer_max_iter=None, threads=None, random_effects=True):
    """
    Maximise the Laplace marginal likelihood from params and report the
    estimates, their SEs and the random-effect modes with SEs.
    """
    objective = LaplaceObjective(model, inner_tol=inner_tol, inner_max_iter=inner_max_iter,
                                 random_effects=random_effects)
    optimizer = OuterOptimizer(objective, gtol=outer_gtol, rel_tol=outer_rel_tol,
                               max_iter=outer_max_iter, threads=threads)
    x, message, converged, iterations = optimizer.run(params)
    estimates = params.with_free(x)

    final = objective.laplace_nll(estimates, u0=optimizer.warm_u)
    u = final.inner.u
    se, covariance = standard_errors(objective, estimates, u, threads=threads)
    u_se = objective.effect_standard_errors(estimates, u) if random_effects else np.zeros(0)

    history = tuple(optimizer.nll_history)
    logger.info("Fit finished: nll = %.10g, %s", final.nll, message)
    return FitResult(
        model=model,
        params=estimates,
        se=se,
        u=u,
        u_se=u_se,
        nll=final.nll,
        message=message,
        converged=converged,
        iterations=iterations,
        n_evaluations=optimizer.n_evaluations,
        free_names=tuple(estimates.free_names),
        covariance=covariance,
        nll_history=history,
    )
