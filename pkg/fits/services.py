"""
=============================================================================
fits/services.py - Fit, Predict, Simulate & Residual Workflows
=============================================================================

The steps shared by the management commands and the REST API. Times
coming in and going out are input times; the engine works on 0..T-1.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from engine.model import assemble
from engine.optimizer import fit
from etc.exceptions import DataError, PredictionError
from prediction.grids import predict_grid
from prediction.predict import predict
from prediction.residuals import dispersion_direction, fit_residuals, uniformity_test
from prediction.simulate import simulate
from .artifacts import FitArtifact
from .datasets import numeric_column, read_coordinates, read_frame

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ResidualReport:
    residuals: object
    statistic: float
    pvalue: float
    direction: str


# ======================== Fitting ========================

def reference_coordinates(config):
    """None for the observed locations, else the coordinates of the configured CSV"""
    source = config.graph['reference']
    if source == 'observed':
        return None
    return read_coordinates(source, config.data['coords'])


def prepare_model(dataset, config, reference=None):
    return assemble(
        dataset.coords, dataset.times, dataset.y, dataset.X,
        family=config.family, link=config.link,
        n_parents=config.graph['n_parents'], metric=config.graph['distance'],
        covariate_names=dataset.covariate_names, reference_coords=reference,
        n_times=dataset.n_times, covariance=config.model['covariance'], nu=config.model['nu'],
    )


def run_fit(dataset, config, threads=None):
    model = prepare_model(dataset, config, reference_coordinates(config))
    params = config.initial_parameters(dataset.y, dataset.covariate_names)
    result = fit(model, params, threads=threads, **config.fit_options())
    logger.info("%s/%s fit on %d rows: %s", config.family, config.link, dataset.n_obs, result.message)
    return FitArtifact(fit=result, config=config, dataset=dataset)


# ======================== Prediction ========================

def label_of(artifact):
    """Internal time -> input time, continuing past the last fitted time"""
    first = int(artifact.time_labels[0])
    return lambda t: first + int(t)


def forecast_horizon(artifact, horizon=None):
    return artifact.config.prediction['forecast_horizon'] if horizon is None else int(horizon)


def predict_points(artifact, coords, labels, covariates=None, *, horizon=None, hold_state=False):
    """Prediction table at input-time points; covariates are n x p when the model has them"""
    dataset = artifact.dataset
    times = dataset.internal_times(labels)
    X_new = None
    if dataset.covariate_names:
        if covariates is None:
            raise PredictionError(f"Predictions need the covariates {', '.join(dataset.covariate_names)}.")
        X_new = np.asarray(covariates, dtype=float).reshape(times.size, len(dataset.covariate_names))
    return predict(artifact.fit, coords, times, X_new,
                   forecast_horizon=forecast_horizon(artifact, horizon), hold_state=hold_state)


def read_points(artifact, path):
    """(coords, input times, covariates) from a CSV with the fitted column names"""
    dataset = artifact.dataset
    frame = read_frame(path)
    source = str(path)

    def column(name):
        values, missing = numeric_column(frame, name, source)
        if missing.any():
            raise DataError(f"{source}: missing value in column '{name}', row {int(np.argmax(missing)) + 1}.")
        return values

    coords = np.column_stack([column(name) for name in dataset.coordinate_names])
    labels = column(dataset.time_name)
    covariates = None
    if dataset.covariate_names:
        covariates = np.column_stack([column(name) for name in dataset.covariate_names])
    return coords, labels, covariates


def predict_on_grid(artifact, grid, *, horizon=None):
    """grid.times are input times; returns {(input time, layer): raster}"""
    dataset = artifact.dataset
    internal = replace(grid, times=tuple(dataset.internal_times(grid.times)))
    rasters = predict_grid(artifact.fit, internal, forecast_horizon=forecast_horizon(artifact, horizon))
    to_label = label_of(artifact)
    return {(to_label(t), name): raster for (t, name), raster in rasters.items()}


# ======================== Simulation & Residuals ========================

def simulate_fit(artifact, n_sim=1, *, conditional=True, seed=None, family=None, family_params=None,
                 progress=False):
    seed = artifact.config.random['seed'] if seed is None else seed
    return simulate(artifact.fit, n_sim, conditional=conditional, seed=seed, family=family,
                    family_params=family_params, progress=progress)


def residual_report(artifact, n_sim=None, *, seed=None, progress=False):
    seed = artifact.config.random['seed'] if seed is None else seed
    residuals = fit_residuals(artifact.fit, n_sim=n_sim, seed=seed, progress=progress)
    test = uniformity_test(residuals)
    return ResidualReport(
        residuals=residuals,
        statistic=test.statistic,
        pvalue=test.pvalue,
        direction=dispersion_direction(residuals),
    )
