"""
=============================================================================
fits/artifacts.py - Versioned Fit Artifacts
=============================================================================

A fit artifact is one JSON document (format "stnngp-fit", version 1)
holding the configuration, the dataset, the reference set, the graph, the
estimates with their SEs and the random-effect modes. Floats are written
in shortest round-trip form, so reading an artifact back gives the same
doubles. The model is rebuilt from the stored dataset and reference set
and must reproduce the stored graph exactly.
"""

import json
import logging
from dataclasses import dataclass

import numpy as np

from engine.model import assemble
from engine.optimizer import FitResult
from engine.parameters import ParameterSet
from etc.exceptions import ArtifactError, StnngpError
from .config import validate_config
from .datasets import SpatioTemporalDataset

logger = logging.getLogger(__name__)

ARTIFACT_FORMAT = 'stnngp-fit'
ARTIFACT_VERSION = 1


@dataclass(frozen=True, eq=False)
class FitArtifact:
    fit: FitResult
    config: object
    dataset: SpatioTemporalDataset

    @property
    def model(self):
        return self.fit.model

    @property
    def time_labels(self):
        return self.dataset.time_labels


# ======================== Encoding ========================

def _array(values):
    return np.asarray(values).tolist()


def _int_lists(rows):
    return [[int(v) for v in row] for row in rows]


def artifact_to_dict(artifact):
    fit, dataset, model = artifact.fit, artifact.dataset, artifact.fit.model
    structure = model.structure
    return {
        'format': ARTIFACT_FORMAT,
        'version': ARTIFACT_VERSION,
        'config': artifact.config.as_dict(),
        'dataset': {
            'coordinate_names': list(dataset.coordinate_names),
            'time_name': dataset.time_name,
            'response_name': dataset.response_name,
            'covariate_names': list(dataset.covariate_names),
            'time_labels': [int(t) for t in dataset.time_labels],
            'coords': _array(dataset.coords),
            'times': _array(dataset.times),
            'y': _array(dataset.y),
            'X': _array(dataset.X),
        },
        'model': {
            'family': model.family,
            'link': model.link,
            'covariance': structure.spec.family,
            'nu': structure.spec.nu,
            'tau': structure.spec.tau,
            'n_parents': structure.dag.n_parents,
            'metric': structure.dag.metric,
            'n_times': model.layout.n_times,
        },
        'reference': _array(model.refs.coords),
        'graph': {
            'persistent_parents': _int_lists(structure.dag.persistent_parents),
            'transient_parents': _int_lists(structure.dag.transient_parents),
            'transient_keys': _int_lists(model.layout.transient_keys),
        },
        'parameters': [
            {'name': p.name, 'value': p.value, 'fixed': p.fixed} for p in fit.params
        ],
        'se': {name: float(value) for name, value in fit.se.items()},
        'covariance': _array(fit.covariance),
        'free_names': list(fit.free_names),
        'u': _array(fit.u),
        'u_se': _array(fit.u_se),
        'fit': {
            'nll': float(fit.nll),
            'message': fit.message,
            'converged': bool(fit.converged),
            'iterations': int(fit.iterations),
            'n_evaluations': int(fit.n_evaluations),
            'nll_history': [float(v) for v in fit.nll_history],
        },
    }


def dumps_fit_artifact(artifact):
    return json.dumps(artifact_to_dict(artifact), separators=(',', ':')) + '\n'


def write_fit_artifact(path, artifact):
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write(dumps_fit_artifact(artifact))
    logger.info("Wrote fit artifact %s", path)


# ======================== Decoding ========================

def _rebuild_model(document, dataset):
    spec = document['model']
    X = dataset.X if dataset.X.shape[1] else None
    model = assemble(
        dataset.coords, dataset.times, dataset.y, X,
        family=spec['family'], link=spec['link'], n_parents=int(spec['n_parents']),
        metric=spec['metric'], covariate_names=dataset.covariate_names,
        reference_coords=np.array(document['reference'], dtype=float),
        n_times=int(spec['n_times']), tau=float(spec['tau']),
        covariance=spec['covariance'], nu=float(spec['nu']),
    )
    graph = document['graph']
    dag = model.structure.dag
    same = (
        _int_lists(dag.persistent_parents) == graph['persistent_parents']
        and _int_lists(dag.transient_parents) == graph['transient_parents']
        and _int_lists(model.layout.transient_keys) == graph['transient_keys']
        and np.array_equal(model.refs.coords, np.array(document['reference'], dtype=float))
    )
    if not same:
        raise ArtifactError("The stored graph does not match the one rebuilt from the stored data.")
    return model


def artifact_from_dict(document):
    if not isinstance(document, dict) or document.get('format') != ARTIFACT_FORMAT:
        raise ArtifactError("Not a fit artifact.")
    version = document.get('version')
    if version != ARTIFACT_VERSION:
        raise ArtifactError(f"Fit artifact version {version!r} is not supported (expected {ARTIFACT_VERSION}).")
    try:
        config = validate_config(document['config'])
        data = document['dataset']
        n_covariates = len(data['covariate_names'])
        n_rows = len(data['y'])
        dataset = SpatioTemporalDataset(
            coords=np.array(data['coords'], dtype=float),
            times=np.array(data['times'], dtype=np.int64),
            y=np.array(data['y'], dtype=float),
            X=np.array(data['X'], dtype=float).reshape(n_rows, n_covariates),
            coordinate_names=tuple(data['coordinate_names']),
            time_name=data['time_name'],
            response_name=data['response_name'],
            covariate_names=tuple(data['covariate_names']),
            time_labels=tuple(int(t) for t in data['time_labels']),
        )
        model = _rebuild_model(document, dataset)
        params = ParameterSet.from_dict({
            p['name']: {'value': p['value'], 'fixed': p['fixed']} for p in document['parameters']
        })
        free_names = tuple(document['free_names'])
        summary = document['fit']
        fit = FitResult(
            model=model,
            params=params,
            se={name: float(value) for name, value in document['se'].items()},
            u=np.array(document['u'], dtype=float),
            u_se=np.array(document['u_se'], dtype=float),
            nll=float(summary['nll']),
            message=summary['message'],
            converged=bool(summary['converged']),
            iterations=int(summary['iterations']),
            n_evaluations=int(summary['n_evaluations']),
            free_names=free_names,
            covariance=np.array(document['covariance'], dtype=float).reshape(len(free_names), len(free_names)),
            nll_history=tuple(float(v) for v in summary['nll_history']),
        )
    except ArtifactError:
        raise
    except StnngpError as exc:
        raise ArtifactError(f"Fit artifact does not describe a valid model: {exc}")
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactError(f"Fit artifact is incomplete: {exc!r}")
    if fit.u.size != model.n_effects or fit.u_se.size != model.n_effects:
        raise ArtifactError("Fit artifact random effects do not match the model layout.")
    return FitArtifact(fit=fit, config=config, dataset=dataset)


def loads_fit_artifact(text):
    try:
        document = json.loads(text)
    except ValueError as exc:
        raise ArtifactError(f"Fit artifact is truncated or not JSON: {exc}")
    return artifact_from_dict(document)


def read_fit_artifact(path):
    try:
        with open(path, encoding='utf-8') as handle:
            text = handle.read()
    except OSError as exc:
        raise ArtifactError(f"Cannot read fit artifact '{path}': {exc}")
    artifact = loads_fit_artifact(text)
    logger.info("Read fit artifact %s", path)
    return artifact
