"""
=============================================================================
engine/parameters.py - Parameter Set & Unconstrained Transforms
=============================================================================

Positive parameters are optimised on the log scale, phi through tanh and
mu / beta as they are.
"""

from dataclasses import dataclass, replace

import numpy as np

from etc.exceptions import ConfigError
from observation.families import FAMILY_PARAMETERS
from observation.links import LinkFunction

POSITIVE = ('tau', 'sigma', 'sd', 'overdispersion', 'dispersion', 'nu')

# group, reported name
REPORT_NAMES = {
    'tau': ('spatial', 'sd'),
    'nu': ('spatial', 'nu'),
    'mu': ('time', 'mu'),
    'phi': ('time', 'ar1'),
    'sigma': ('time', 'sd'),
    'sd': ('response', 'sd'),
    'overdispersion': ('response', 'overdispersion'),
    'dispersion': ('response', 'dispersion'),
}


# ======================== Transforms ========================

def to_free(value, transform):
    if transform == 'log':
        return np.log(value)
    if transform == 'tanh':
        return np.arctanh(value)
    return value


def from_free(x, transform):
    if transform == 'log':
        return np.exp(x)
    if transform == 'tanh':
        return np.tanh(x)
    return x


def free_derivative(x, transform):
    """d natural / d free"""
    if transform == 'log':
        return np.exp(x)
    if transform == 'tanh':
        return 1.0 - np.tanh(x) ** 2
    return 1.0


def transform_for(name):
    if name in POSITIVE:
        return 'log'
    if name == 'phi':
        return 'tanh'
    return 'identity'


# ======================== Types ========================

@dataclass(frozen=True)
class Parameter:
    name: str
    value: float
    fixed: bool = False

    @property
    def transform(self):
        return transform_for(self.name)

    @property
    def group(self):
        if self.name.startswith('beta.'):
            return 'fixed_effects'
        return REPORT_NAMES[self.name][0]

    @property
    def report_name(self):
        if self.name.startswith('beta.'):
            return self.name[len('beta.'):]
        return REPORT_NAMES[self.name][1]

    def validate(self):
        if not np.isfinite(self.value):
            raise ConfigError(f"Parameter '{self.name}' must be finite.")
        if self.transform == 'log' and self.value <= 0:
            raise ConfigError(f"Parameter '{self.name}' must be positive.")
        if self.transform == 'tanh' and not -1.0 < self.value < 1.0:
            raise ConfigError(f"Parameter '{self.name}' must lie strictly between -1 and 1.")


class ParameterSet:
    """Ordered parameters; the free ones form the optimiser's vector"""

    def __init__(self, parameters):
        self.parameters = tuple(parameters)
        names = [p.name for p in self.parameters]
        if len(set(names)) != len(names):
            raise ConfigError("Duplicate parameter names.")
        for p in self.parameters:
            p.validate()
        self._index = {name: i for i, name in enumerate(names)}

    def __iter__(self):
        return iter(self.parameters)

    def __len__(self):
        return len(self.parameters)

    def __contains__(self, name):
        return name in self._index

    def __getitem__(self, name):
        return self.parameters[self._index[name]].value

    def get(self, name, default=None):
        return self[name] if name in self else default

    def parameter(self, name):
        return self.parameters[self._index[name]]

    @property
    def names(self):
        return [p.name for p in self.parameters]

    @property
    def free(self):
        return [p for p in self.parameters if not p.fixed]

    @property
    def free_names(self):
        return [p.name for p in self.free]

    @property
    def beta_names(self):
        return [p.name for p in self.parameters if p.name.startswith('beta.')]

    @property
    def beta(self):
        return np.array([self[name] for name in self.beta_names], dtype=float)

    def free_vector(self):
        return np.array([to_free(p.value, p.transform) for p in self.free], dtype=float)

    def with_free(self, x):
        x = np.asarray(x, dtype=float)
        free = iter(x)
        updated = [
            p if p.fixed else replace(p, value=float(from_free(next(free), p.transform)))
            for p in self.parameters
        ]
        return ParameterSet(updated)

    def with_values(self, **values):
        return ParameterSet([
            replace(p, value=float(values[p.name])) if p.name in values else p
            for p in self.parameters
        ])

    def with_fixed(self, names, fixed=True):
        return ParameterSet([
            replace(p, fixed=fixed) if p.name in names else p for p in self.parameters
        ])

    def free_jacobian(self, x=None):
        """Diagonal of d natural / d free at x (defaults to the current values)"""
        x = self.free_vector() if x is None else np.asarray(x, dtype=float)
        return np.array([free_derivative(v, p.transform) for v, p in zip(x, self.free)], dtype=float)

    def response_params(self, family):
        return {name: self[name] for name in FAMILY_PARAMETERS[family]}

    def as_dict(self):
        return {p.name: {'value': p.value, 'fixed': p.fixed} for p in self.parameters}

    @classmethod
    def from_dict(cls, data):
        return cls([Parameter(name, float(v['value']), bool(v['fixed'])) for name, v in data.items()])


# ======================== Defaults ========================

def link_scale_proxy(y, link):
    """Response mapped to the link scale without blowing up at the boundaries"""
    y = np.asarray(y, dtype=float)
    if link == 'log':
        return np.log(y + 0.5)
    if link == 'logit':
        p = 0.25 + 0.5 * y if np.all((y == 0) | (y == 1)) else np.clip(y, 0.05, 0.95)
        return np.log(p / (1.0 - p))
    return y


def default_parameters(family, link, y, covariate_names=(), nu=0.5, overrides=None):
    """
    beta = 0, mu = g(mean y), phi = 0.5, sigma = tau = sd of the link-scale
    proxy, response parameters 1 (gaussian sd = sd(y)), nu fixed.
    """
    y = np.asarray(y, dtype=float)
    link_fn = LinkFunction(link)
    if y.size:
        mean = float(np.mean(y))
        if link == 'log':
            mean = max(mean, 0.5)
        elif link == 'logit':
            mean = min(max(mean, 0.05), 0.95)
        mu = float(link_fn.forward(mean))
        spread = float(np.std(link_scale_proxy(y, link)))
    else:
        mu, spread = 0.0, 1.0
    spread = spread if spread > 1e-3 else 1.0

    values = [
        Parameter('tau', spread),
        Parameter('nu', float(nu), fixed=True),
        Parameter('mu', mu),
        Parameter('phi', 0.5),
        Parameter('sigma', spread),
    ]
    for name in FAMILY_PARAMETERS[family]:
        start = float(np.std(y)) if name == 'sd' and y.size and np.std(y) > 0 else 1.0
        values.append(Parameter(name, start))
    values.extend(Parameter(f'beta.{c}', 0.0) for c in covariate_names)

    params = ParameterSet(values)
    for name, override in (overrides or {}).items():
        if name not in params:
            raise ConfigError(f"Unknown parameter '{name}' for the {family} family.")
        p = params.parameter(name)
        value = override.get('value', p.value)
        fixed = override.get('fixed', p.fixed)
        if name == 'nu' and not fixed:
            raise ConfigError("The smoothness nu is always fixed.")
        params = ParameterSet([
            Parameter(name, float(value), bool(fixed)) if q.name == name else q for q in params
        ])
    return params
