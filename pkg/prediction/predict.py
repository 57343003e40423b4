"""
=============================================================================
prediction/predict.py - Random Effect, Linear Predictor & Response Prediction
=============================================================================

New (location, time) points join the joint likelihood as transient effects
(and new times extend the AR(1) chain). The joint mode at the fitted
parameters is the prediction and the inverse joint Hessian gives its SE.
"""

import logging
from dataclasses import dataclass

import numpy as np

from engine.laplace import LaplaceObjective
from engine.model import remap_values
from etc.conf import stnngp_setting
from etc.exceptions import PredictionError
from observation.links import d1_inv_link, d2_inv_link, inv_link
from spatial.graph import as_coords

logger = logging.getLogger(__name__)

LAYERS = ('w', 'w_se', 'linear', 'linear_se', 'response', 'response_se')


# ======================== Types ========================

@dataclass(frozen=True)
class PredictionRecord:
    coords: tuple
    t: int
    w: float
    w_se: float
    linear: float
    linear_se: float
    response: float
    response_se: float


@dataclass(frozen=True, eq=False)
class EffectPrediction:
    """Predicted w at the requested points plus the extended joint mode"""
    w: np.ndarray
    w_se: np.ndarray
    model: object
    effects: np.ndarray
    u: np.ndarray
    u_se: np.ndarray

    def eps(self):
        T = self.model.layout.n_times
        return self.u[:T], self.u_se[:T]


@dataclass(frozen=True, eq=False)
class PredictionTable:
    coords: np.ndarray
    times: np.ndarray
    w: np.ndarray
    w_se: np.ndarray
    linear: np.ndarray
    linear_se: np.ndarray
    response: np.ndarray
    response_se: np.ndarray

    def __len__(self):
        return self.times.size

    def layer(self, name):
        if name not in LAYERS:
            raise PredictionError(f"Unknown prediction layer '{name}'.")
        return getattr(self, name)

    def records(self):
        for i in range(len(self)):
            yield PredictionRecord(
                coords=tuple(float(c) for c in self.coords[i]),
                t=int(self.times[i]),
                **{name: float(self.layer(name)[i]) for name in LAYERS},
            )


# ======================== Random Effects ========================

def check_times(fit, times, forecast_horizon=None):
    horizon = stnngp_setting('FORECAST_HORIZON') if forecast_horizon is None else int(forecast_horizon)
    if horizon < 0:
        raise PredictionError("The forecast horizon cannot be negative.")
    times = np.asarray(times, dtype=np.int64)
    last = fit.model.layout.n_times - 1 + horizon
    if times.size and times.max() > last:
        raise PredictionError(
            f"Time {int(times.max())} is past the last fitted time plus the forecast horizon ({last})."
        )
    if times.size and times.min() < 0:
        raise PredictionError("Prediction times cannot precede the first fitted time.")
    return times


def predict_w(fit, coords, times, *, forecast_horizon=None, hold_state=False):
    """
    Modes and SEs of W at (coords, times). Points already in the fit return
    the stored values. hold_state keeps every fitted effect at its value and
    moves only the new ones.
    """
    coords = as_coords(coords)
    times = check_times(fit, times, forecast_horizon)
    model = fit.model
    extended, effects = model.locate(coords, times)

    old_keys = model.layout.keys()
    new_keys = extended.layout.keys()
    known = np.zeros(extended.n_effects, dtype=bool)
    position = {key: i for i, key in enumerate(new_keys)}
    for key in old_keys:
        known[position[key]] = True

    u = remap_values(model.layout, extended.layout, fit.u, fill=fit.params['mu'])
    u_se = remap_values(model.layout, extended.layout, fit.u_se, fill=np.nan)
    if not known.all():
        objective = LaplaceObjective(extended)
        free = ~known if hold_state else None
        inner = objective.inner_optimize(fit.params, u, free=free)
        se = objective.effect_standard_errors(fit.params, inner.u, free=free)
        if hold_state:
            u = inner.u
            u_se[free] = se
        else:
            fresh = ~known
            u[fresh], u_se[fresh] = inner.u[fresh], se[fresh]
        logger.debug("Predicted %d new effects in %d Newton steps", int((~known).sum()), inner.iterations)

    return EffectPrediction(
        w=u[effects], w_se=u_se[effects], model=extended, effects=effects, u=u, u_se=u_se,
    )


# ======================== Linear Predictor & Response ========================

def predict_linear(fit, X_new, w, w_se):
    """L = X beta + w, Var(L) = x' Var(beta) x + Var(w)"""
    w = np.asarray(w, dtype=float)
    w_se = np.asarray(w_se, dtype=float)
    beta = fit.params.beta
    X = np.zeros((w.size, 0)) if X_new is None else np.asarray(X_new, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape != (w.size, beta.size):
        raise PredictionError(
            f"Prediction covariates have shape {X.shape}; expected ({w.size}, {beta.size})."
        )
    if beta.size == 0:
        return w.copy(), w_se.copy()
    linear = X @ beta + w
    beta_var = np.einsum('ij,jk,ik->i', X, fit.beta_covariance(), X)
    linear_se = np.where(beta_var == 0, w_se, np.sqrt(beta_var + w_se ** 2))
    return linear, linear_se


def predict_response(linear, linear_se, link):
    """
    Second-order delta method: mean g^-1(L) + h(L) Var / 2 and variance
    g^-1'(L)^2 Var + h(L)^2 Var^2 / 2, h the second derivative of g^-1.
    """
    linear = np.asarray(linear, dtype=float)
    linear_se = np.asarray(linear_se, dtype=float)
    if link == 'identity':
        return linear.copy(), linear_se.copy()
    var = linear_se ** 2
    d1 = d1_inv_link(linear, link)
    d2 = d2_inv_link(linear, link)
    mean = inv_link(linear, link) + 0.5 * d2 * var
    variance = d1 ** 2 * var + 0.5 * d2 ** 2 * var ** 2
    return mean, np.sqrt(variance)


def predict(fit, coords, times, X_new=None, *, forecast_horizon=None, hold_state=False):
    """All six prediction columns at (coords, times)"""
    coords = as_coords(coords)
    effects = predict_w(fit, coords, times, forecast_horizon=forecast_horizon, hold_state=hold_state)
    linear, linear_se = predict_linear(fit, X_new, effects.w, effects.w_se)
    response, response_se = predict_response(linear, linear_se, fit.model.link)
    logger.info("Predicted %d points", coords.shape[0])
    return PredictionTable(
        coords=coords,
        times=np.asarray(times, dtype=np.int64),
        w=effects.w,
        w_se=effects.w_se,
        linear=linear,
        linear_se=linear_se,
        response=response,
        response_se=response_se,
    )
