"""
=============================================================================
engine/model.py - Data Layout: Observations to Random Effects
=============================================================================

Every observation row points at one entry of u. Rows at a reference
location alias that node's effect; rows elsewhere get a transient effect,
shared by all rows at the same (time, location).
"""

import logging
import threading
from dataclasses import dataclass, replace

import numpy as np

from etc.exceptions import DataError, PredictionError
from process.innovations import InnovationOperator
from process.state import EffectLayout, build_spatial_structure
from spatial.covariance import CovarianceSpec
from spatial.graph import as_coords, build_persistent_graph, dedupe_locations, order_locations

logger = logging.getLogger(__name__)

_OPERATOR_LOCK = threading.Lock()


@dataclass(frozen=True, eq=False)
class PreparedModel:
    structure: object
    layout: EffectLayout
    y: np.ndarray
    X: np.ndarray
    obs_effect: np.ndarray
    family: str
    link: str
    covariate_names: tuple = ()

    @property
    def refs(self):
        return self.structure.refs

    @property
    def dag(self):
        return self.structure.dag

    @property
    def n_obs(self):
        return self.y.size

    @property
    def n_effects(self):
        return self.layout.n_effects

    def operator(self):
        """Innovation operator for this layout, built once and shared across threads"""
        with _OPERATOR_LOCK:
            if '_operator' not in self.__dict__:
                object.__setattr__(self, '_operator', InnovationOperator(self.structure, self.layout))
        return self._operator

    def transient_location_lookup(self):
        return {tuple(c): k for k, c in enumerate(self.structure.transient_coords)}

    def ref_lookup(self):
        return {tuple(c): i for i, c in enumerate(self.refs.coords)}

    def locate(self, coords, times, n_times=None):
        """
        Map (location, time) points to effects, adding transient locations
        and effects where needed. Returns the extended model and one effect
        index per point.
        """
        coords = as_coords(coords)
        times = np.asarray(times, dtype=np.int64)
        if coords.shape[0] != times.size:
            raise PredictionError("Each point needs exactly one time.")
        if coords.shape[0] and coords.shape[1] != self.refs.dim:
            raise PredictionError(f"Points need {self.refs.dim} coordinates.")
        n_times = max(self.layout.n_times, n_times or 0, int(times.max()) + 1 if times.size else 0)
        if times.size and times.min() < 0:
            raise PredictionError("Times must not precede the first fitted time.")

        refs = self.ref_lookup()
        transient = self.transient_location_lookup()
        new_coords = []
        point_loc = []
        for point in coords:
            key = tuple(point)
            if key in refs:
                point_loc.append(('ref', refs[key]))
                continue
            if key not in transient:
                transient[key] = len(self.structure.transient_coords) + len(new_coords)
                new_coords.append(point)
            point_loc.append(('tr', transient[key]))

        known = set(self.layout.transient_keys)
        added = {
            (int(t), loc) for (kind, loc), t in zip(point_loc, times)
            if kind == 'tr' and (int(t), loc) not in known
        }
        keys = list(self.layout.transient_keys) + sorted(added)

        structure = self.structure.with_transient_locations(np.array(new_coords)) if new_coords else self.structure
        layout = EffectLayout(n_times=n_times, n_refs=self.layout.n_refs, transient_keys=tuple(keys))
        index = layout.transient_lookup()
        effects = np.array([
            layout.ref_index(int(t), loc) if kind == 'ref' else index[(int(t), loc)]
            for (kind, loc), t in zip(point_loc, times)
        ], dtype=np.int64)
        obs_effect = remap_indices(self.layout, layout, self.obs_effect)
        return replace(self, structure=structure, layout=layout, obs_effect=obs_effect), effects


def remap_indices(old, new, indices):
    """Translate u indices between layouts through the effect keys"""
    position = {key: i for i, key in enumerate(new.keys())}
    old_keys = old.keys()
    return np.array([position[old_keys[i]] for i in indices], dtype=np.int64)


def remap_values(old, new, u_old, fill):
    """Carry u across layouts; entries new to the layout get fill"""
    u_new = np.array(fill, dtype=float, copy=True) if np.ndim(fill) else np.full(new.n_effects, float(fill))
    position = {key: i for i, key in enumerate(new.keys())}
    for key, value in zip(old.keys(), u_old):
        u_new[position[key]] = value
    return u_new


def check_covariates(X, names):
    """Reject constant covariate columns (the mean is carried by mu)"""
    for j, name in enumerate(names):
        column = X[:, j]
        if column.size and np.all(column == column[0]):
            raise DataError(f"Covariate '{name}' is constant; the intercept is carried by mu.")


def assemble(coords, times, y, X=None, *, family, link, n_parents=15, metric='euclidean',
             covariate_names=(), reference_coords=None, n_times=None, tau=1.0,
             covariance='exponential', nu=0.5):
    """
    Build the reference set, graph, spatial structure and effect layout for
    a dataset with internal times 0..T-1.
    """
    coords = as_coords(coords)
    times = np.asarray(times, dtype=np.int64)
    y = np.asarray(y, dtype=float)
    n = y.size
    X = np.zeros((n, 0)) if X is None else np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if coords.shape[0] != n or times.size != n or X.shape[0] != n:
        raise DataError("Coordinates, times and responses must have the same number of rows.")
    if times.size and times.min() < 0:
        raise DataError("Internal times start at 0.")
    check_covariates(X, covariate_names)

    source = coords if reference_coords is None else as_coords(reference_coords)
    unique, _ = dedupe_locations(source)
    refs = order_locations(unique)
    dag = build_persistent_graph(refs, n_parents, metric)
    structure = build_spatial_structure(refs, dag, tau, CovarianceSpec(covariance, nu, tau))

    T = max(int(times.max()) + 1 if n else 1, n_times or 0)
    empty = PreparedModel(
        structure=structure,
        layout=EffectLayout(n_times=T, n_refs=len(refs)),
        y=np.zeros(0),
        X=np.zeros((0, X.shape[1])),
        obs_effect=np.zeros(0, dtype=np.int64),
        family=family,
        link=link,
        covariate_names=tuple(covariate_names),
    )
    model, effects = empty.locate(coords, times, n_times=T)
    model = replace(model, y=y, X=X, obs_effect=effects)
    model.operator()
    logger.info(
        "Prepared model: %d observations, %d times, %d reference nodes, %d transient effects",
        n, model.layout.n_times, len(refs), model.layout.n_transient,
    )
    return model
