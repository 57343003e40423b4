"""
=============================================================================
fits/config.py - Run Configuration Files
=============================================================================

One dotted key per line, written `key: value`, so a file is a flat YAML
mapping:

    model.family: poisson
    graph.n_parents: 10
    parameters.phi.value: 0.8
    parameters.beta.elevation.fixed: true

Nested YAML sections are accepted as well. Unknown keys are errors.
"""

import logging
from dataclasses import dataclass

import yaml

from engine.parameters import default_parameters
from etc.exceptions import ConfigError
from etc.helper_functions import flatten, unflatten
from .serializers import RunConfigSerializer

logger = logging.getLogger(__name__)

FIT_OPTIONS = ('inner_tol', 'inner_max_iter', 'outer_gtol', 'outer_rel_tol', 'outer_max_iter')


@dataclass(frozen=True, eq=False)
class RunConfig:
    sections: dict

    @property
    def data(self):
        return self.sections['data']

    @property
    def model(self):
        return self.sections['model']

    @property
    def graph(self):
        return self.sections['graph']

    @property
    def prediction(self):
        return self.sections['prediction']

    @property
    def optimizer(self):
        return self.sections['optimizer']

    @property
    def random(self):
        return self.sections['random']

    @property
    def parameters(self):
        return self.sections['parameters']

    @property
    def family(self):
        return self.model['family']

    @property
    def link(self):
        return self.model['link']

    def as_dict(self):
        """Plain nested data; parameter overrides keep their dotted names"""
        out = {}
        for name, section in self.sections.items():
            out[name] = {key: (list(value) if isinstance(value, (list, tuple)) else value)
                         for key, value in section.items()}
        out['parameters'] = {name: dict(entry) for name, entry in self.parameters.items()}
        return out

    def fit_options(self):
        return {name: self.optimizer[name] for name in FIT_OPTIONS}

    def initial_parameters(self, y, covariate_names=()):
        return default_parameters(self.family, self.link, y, covariate_names=covariate_names,
                                  nu=self.model['nu'], overrides=self.parameters)


# ======================== Validation ========================

def describe_errors(errors, prefix=''):
    """Serializer errors as 'dotted.key: message' lines"""
    if isinstance(errors, dict):
        lines = []
        for key, value in errors.items():
            if key == 'non_field_errors':
                name = prefix
            else:
                name = f'{prefix}.{key}' if prefix else str(key)
            lines.extend(describe_errors(value, name))
        return lines
    if isinstance(errors, (list, tuple)):
        lines = []
        for item in errors:
            lines.extend(describe_errors(item, prefix))
        return lines
    return [f'{prefix}: {errors}' if prefix else str(errors)]


def validate_config(mapping):
    """RunConfig from a flat dotted or nested mapping"""
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError("A configuration is a mapping of `key: value` lines.")
    nested = unflatten(flatten({str(key): value for key, value in mapping.items()}))
    serializer = RunConfigSerializer(data=nested)
    if not serializer.is_valid():
        raise ConfigError('Invalid configuration: ' + '; '.join(describe_errors(serializer.errors)))
    return RunConfig(sections=dict(serializer.validated_data))


def read_mapping(text, source):
    try:
        mapping = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: not a `key: value` file: {exc}")
    if mapping is None:
        return {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"{source}: expected one `key: value` per line.")
    return mapping


def parse_override(item):
    """'key=value' from the command line, the value read as YAML"""
    key, sep, value = item.partition('=')
    if not sep or not key.strip():
        raise ConfigError(f"Override '{item}' is not key=value.")
    try:
        return key.strip(), yaml.safe_load(value)
    except yaml.YAMLError as exc:
        raise ConfigError(f"Override '{item}': {exc}")


def parse_config(text, source='<config>', overrides=()):
    """Defaults, then the lines of text, then key=value overrides"""
    mapping = read_mapping(text, source)
    flat = flatten({str(key): value for key, value in mapping.items()})
    flat.update(parse_override(item) for item in overrides)
    config = validate_config(flat)
    logger.debug("Configuration from %s: %s", source, flatten(config.as_dict()))
    return config


def load_config(path=None, overrides=()):
    if not path:
        return parse_config('', '<defaults>', overrides)
    try:
        with open(path, encoding='utf-8') as handle:
            text = handle.read()
    except OSError as exc:
        raise ConfigError(f"Cannot read configuration '{path}': {exc}")
    return parse_config(text, str(path), overrides)
