from django.conf import settings


# Packaged defaults, overridden key by key by settings.STNNGP
DEFAULTS = {
    'N_PARENTS': 15,
    'DISTANCE': 'euclidean',
    'FAMILY': 'poisson',
    'LINK': 'log',
    'COVARIANCE': 'exponential',
    'NU': 0.5,
    'FORECAST_HORIZON': 0,
    'SEED': 0,
    'INNER_TOL': 1e-8,
    'INNER_MAX_ITER': 100,
    'OUTER_GTOL': 1e-4,
    'OUTER_REL_TOL': 1e-8,
    'OUTER_MAX_ITER': 500,
    'RESIDUAL_N_SIM': 100,
    'MIN_RESIDUAL_N_SIM': 50,
}


def stnngp_setting(name):
    """Read one STNNGP setting, falling back to the packaged default"""
    overrides = getattr(settings, 'STNNGP', {}) if settings.configured else {}
    if name in overrides:
        return overrides[name]
    return DEFAULTS[name]
