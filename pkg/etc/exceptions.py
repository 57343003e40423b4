"""
=============================================================================
exceptions.py - Centralized Error Classes
All model, data and artifact errors raised by the stnngp apps
=============================================================================
"""


# Process exit codes used by the management commands
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NOT_CONVERGED = 3


class StnngpError(Exception):
    """
    Base class for every error raised by the model code
    """
    exit_code = EXIT_DATA


# ======================== Model Errors ========================

class GraphError(StnngpError):
    """Invalid reference set or neighbour graph"""


class CovarianceError(StnngpError):
    """Singular kriging system or invalid covariance parameters"""


class ProcessError(StnngpError):
    """Invalid random-effect state or temporal parameters"""


class ObservationError(StnngpError):
    """Response outside the family support or invalid family parameters"""


class InnerDivergenceError(StnngpError):
    """Newton iterations over the random effects produced a non-finite step"""

    def __init__(self, detail=''):
        message = 'inner divergence'
        if detail:
            message = f'{message}: {detail}'
        super().__init__(message)


class InnerIterationError(InnerDivergenceError):
    """Newton iterations hit the iteration cap"""


class SaddlePointError(StnngpError):
    """Joint Hessian is not positive definite at the inner mode"""

    def __init__(self, detail=''):
        message = 'saddle at inner mode'
        if detail:
            message = f'{message}: {detail}'
        super().__init__(message)


class PredictionError(StnngpError):
    """Prediction request outside what the fitted model supports"""


class ResidualError(StnngpError):
    """Invalid residual request"""


# ======================== Input / Output Errors ========================

class DataError(StnngpError):
    """Malformed or inconsistent input data"""


class ConfigError(StnngpError):
    """Invalid run configuration"""


class ArtifactError(StnngpError):
    """Unreadable, truncated or incompatible fit artifact"""


class NotConvergedError(StnngpError):
    """Outer optimization stopped before convergence"""
    exit_code = EXIT_NOT_CONVERGED
