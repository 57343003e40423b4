"""
=============================================================================
process/state.py - AR(1) Temporal Level & NNGP Spatial Level
=============================================================================

Random effects are laid out as one vector u = [eps (T), W (T x M, time
major), transient effects (sorted by time, then location)]. The functions
here evaluate the log-density of that vector term by term; the sparse
innovation form in innovations.py evaluates the same density in one pass.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.stats import norm

from etc.exceptions import CovarianceError, GraphError, ProcessError
from spatial.covariance import (
    DEFICIT_FLOOR, JITTER, calibrate, correlation, kriging_system, unit_conditional,
)
from spatial.graph import as_coords, build_transient_parents, pairwise_distances

logger = logging.getLogger(__name__)

BLUP_FLOOR = 1e-12
LOG_2PI = np.log(2.0 * np.pi)


# ======================== Parameters & State ========================

@dataclass(frozen=True)
class TemporalParams:
    mu: float
    phi: float
    sigma: float

    def __post_init__(self):
        if not np.isfinite(self.mu):
            raise ProcessError("mu must be finite.")
        if not -1.0 < self.phi < 1.0:
            raise ProcessError("phi must lie strictly between -1 and 1.")
        if not self.sigma > 0:
            raise ProcessError("sigma must be positive.")

    @property
    def stationary_variance(self):
        return self.sigma ** 2 / (1.0 - self.phi ** 2)


@dataclass(frozen=True, eq=False)
class RandomEffectState:
    eps: np.ndarray
    W: np.ndarray
    transient: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.eps.ndim != 1 or self.eps.size < 1:
            raise ProcessError("A state needs at least one time step.")
        if self.W.shape[0] != self.eps.size:
            raise ProcessError("W must have one row per time step.")
        for values in (self.eps, self.W, self.transient):
            if not np.all(np.isfinite(values)):
                raise ProcessError("Random effects must be finite.")

    @property
    def n_times(self):
        return self.eps.size


@dataclass(frozen=True, eq=False)
class EffectLayout:
    """
    Index bookkeeping for u. Transient effects are keyed by
    (time index, transient location index).
    """
    n_times: int
    n_refs: int
    transient_keys: tuple = ()

    @property
    def n_transient(self):
        return len(self.transient_keys)

    @property
    def n_effects(self):
        return self.n_times * (1 + self.n_refs) + self.n_transient

    def eps_index(self, t):
        return t

    def ref_index(self, t, node):
        return self.n_times + t * self.n_refs + node

    def transient_index(self, k):
        return self.n_times * (1 + self.n_refs) + k

    def transient_lookup(self):
        return {key: self.transient_index(k) for k, key in enumerate(self.transient_keys)}

    def split(self, u):
        u = np.asarray(u, dtype=float)
        if u.size != self.n_effects:
            raise ProcessError(f"Expected {self.n_effects} random effects, got {u.size}.")
        T, M = self.n_times, self.n_refs
        return RandomEffectState(
            eps=u[:T].copy(),
            W=u[T:T + T * M].reshape(T, M).copy(),
            transient=u[T + T * M:].copy(),
        )

    def pack(self, state):
        return np.concatenate([state.eps, state.W.reshape(-1), state.transient])

    def keys(self):
        """Stable identity of each entry of u, used to carry values across layouts"""
        out = [('eps', t) for t in range(self.n_times)]
        out += [('ref', t, i) for t in range(self.n_times) for i in range(self.n_refs)]
        out += [('tr', t, loc) for t, loc in self.transient_keys]
        return out


@dataclass(frozen=True, eq=False)
class TransientBlock:
    t: int
    location: int
    parents: np.ndarray
    weights: np.ndarray
    cond_var: float
    blup_weights: np.ndarray


# ======================== Spatial Structure ========================

@dataclass(frozen=True, eq=False)
class SpatialStructure:
    """
    Unit-variance kriging quantities for every persistent node and every
    transient location. Weights and deficits do not depend on tau, so a new
    tau only rescales the calibration.
    """
    refs: object
    dag: object
    spec: object
    calibration: object
    node_weights: tuple
    node_deficits: np.ndarray
    head_correlation: np.ndarray
    transient_coords: np.ndarray
    transient_weights: tuple
    transient_deficits: np.ndarray

    @property
    def n_refs(self):
        return len(self.refs)

    @property
    def head_size(self):
        return self.head_correlation.shape[0]

    @property
    def marginal_variance(self):
        return self.calibration.marginal_variance

    def with_tau(self, tau):
        return SpatialStructure(
            refs=self.refs,
            dag=self.dag,
            spec=self.spec.with_tau(tau),
            calibration=self.calibration.with_tau(tau),
            node_weights=self.node_weights,
            node_deficits=self.node_deficits,
            head_correlation=self.head_correlation,
            transient_coords=self.transient_coords,
            transient_weights=self.transient_weights,
            transient_deficits=self.transient_deficits,
        )

    def with_transient_locations(self, coords):
        """Append transient locations (parents, weights and deficits computed here)"""
        coords = as_coords(coords)
        if coords.shape[0] == 0:
            return self
        parents = build_transient_parents(coords, self.refs, self.dag.n_parents, self.dag.metric)
        weights, deficits = _transient_systems(coords, parents, self.refs, self.spec, self.calibration, self.dag.metric)
        dag = self.dag.with_transient(tuple(self.dag.transient_parents) + tuple(parents))
        return SpatialStructure(
            refs=self.refs,
            dag=dag,
            spec=self.spec,
            calibration=self.calibration,
            node_weights=self.node_weights,
            node_deficits=self.node_deficits,
            head_correlation=self.head_correlation,
            transient_coords=np.vstack([self.transient_coords, coords]),
            transient_weights=self.transient_weights + tuple(weights),
            transient_deficits=np.concatenate([self.transient_deficits, deficits]),
        )

    def kriging_systems(self):
        """Kriging systems of the persistent nodes after the head block"""
        coords = self.refs.coords
        return [
            kriging_system(coords[i], coords[self.dag.persistent_parents[i]],
                           self.spec, self.calibration, self.dag.metric)
            for i in range(self.head_size, self.n_refs)
        ]

    def transient_blocks(self, layout):
        s2 = self.marginal_variance
        for t, loc in layout.transient_keys:
            weights = self.transient_weights[loc]
            yield TransientBlock(
                t=t,
                location=loc,
                parents=self.dag.transient_parents[loc],
                weights=weights,
                cond_var=s2 * self.transient_deficits[loc],
                blup_weights=blup_weights(weights),
            )


def _node_conditional(point, parent_coords, nu, range_scale, metric, coincident_message):
    """
    Unit-variance kriging weights and deficit of one node. A deficit at the
    floor gets a nugget of JITTER unless the node sits exactly on a parent.
    """
    w, a = unit_conditional(point, parent_coords, nu, range_scale, metric)
    if a > DEFICIT_FLOOR:
        return w, a
    if pairwise_distances(point, parent_coords, metric).min() == 0.0:
        raise GraphError(coincident_message)
    logger.warning("Node at %s is nearly coincident with its parents; adding a %g nugget",
                   np.array2string(np.asarray(point), precision=6), JITTER)
    return w, a + JITTER


def _transient_systems(coords, parents, refs, spec, cal, metric):
    weights, deficits = [], []
    for point, p in zip(coords, parents):
        w, a = _node_conditional(
            point, refs.coords[p], spec.nu, cal.range_scale, metric,
            "A transient location coincides with a reference node; it should be aliased.",
        )
        weights.append(w)
        deficits.append(a)
    return weights, np.asarray(deficits, dtype=float)


def build_spatial_structure(refs, dag, tau, spec, transient_coords=None):
    """Calibrate at tau and precompute every kriging system of the graph"""
    cal = calibrate(dag, refs, tau, spec)
    spec = spec.with_tau(tau)
    coords = refs.coords
    weights, deficits = [], []
    for i, parents in enumerate(dag.persistent_parents):
        w, a = _node_conditional(
            coords[i], coords[parents], spec.nu, cal.range_scale, dag.metric,
            f"Reference node {i} coincides with its parents; deduplicate the reference set.",
        )
        weights.append(w)
        deficits.append(a)

    h = min(dag.n_parents, len(refs))
    head = correlation(pairwise_distances(coords[:h], coords[:h], dag.metric), spec.nu, cal.range_scale)

    structure = SpatialStructure(
        refs=refs,
        dag=dag.with_transient(()),
        spec=spec,
        calibration=cal,
        node_weights=tuple(weights),
        node_deficits=np.asarray(deficits, dtype=float),
        head_correlation=head,
        transient_coords=np.zeros((0, refs.dim)),
        transient_weights=(),
        transient_deficits=np.zeros(0),
    )
    if transient_coords is not None:
        structure = structure.with_transient_locations(transient_coords)
    return structure


# ======================== Operations ========================

def ar1_logdensity(eps, p):
    """eps_1 ~ N(mu, sigma^2/(1-phi^2)); eps_t | eps_{t-1} ~ N(mu + phi (eps_{t-1} - mu), sigma^2)"""
    eps = np.asarray(eps, dtype=float)
    if eps.size == 0 or not np.all(np.isfinite(eps)):
        raise ProcessError("Temporal effects must be a non-empty finite vector.")
    total = norm.logpdf(eps[0], loc=p.mu, scale=np.sqrt(p.stationary_variance))
    if eps.size > 1:
        means = p.mu + p.phi * (eps[:-1] - p.mu)
        total += norm.logpdf(eps[1:], loc=means, scale=p.sigma).sum()
    return float(total)


def mean_function(w_prev, eps_prev, eps_now, phi):
    return phi * (w_prev - eps_prev) + eps_now


def _mvn_logpdf(x, mean, cov):
    try:
        factor = linalg.cho_factor(cov, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise CovarianceError("Head block covariance is singular.")
    r = x - mean
    logdet = 2.0 * np.log(np.diag(factor[0])).sum()
    quad = r @ linalg.cho_solve(factor, r, check_finite=False)
    return -0.5 * (x.size * LOG_2PI + logdet + quad)


def persistent_loglik(state, structure, p, systems=None):
    """
    Head block as one joint normal per time, remaining nodes through their
    kriging conditionals.
    """
    W, eps = state.W, state.eps
    h = structure.head_size
    s2 = structure.marginal_variance
    head_cov = s2 * structure.head_correlation
    systems = structure.kriging_systems() if systems is None else systems
    parents = structure.dag.persistent_parents[h:]

    total = 0.0
    for t in range(state.n_times):
        if t == 0:
            m = np.full(structure.n_refs, eps[0])
        else:
            m = mean_function(W[t - 1], eps[t - 1], eps[t], p.phi)
        total += _mvn_logpdf(W[t, :h], m[:h], head_cov)
        if not systems:
            continue
        means = np.array([
            m[h + j] + system.weights @ (W[t, parents[j]] - m[parents[j]])
            for j, system in enumerate(systems)
        ])
        scales = np.sqrt([system.cond_var for system in systems])
        total += norm.logpdf(W[t, h:], loc=means, scale=scales).sum()
    return float(total)


def blup_weights(weights):
    weights = np.asarray(weights, dtype=float)
    total = weights.sum()
    if abs(total) < BLUP_FLOOR:
        raise ProcessError("degenerate BLUP")
    return weights / total


def blup_previous(w_prev_parents, weights):
    """Previous-time field value at a location with no effect of its own"""
    return float(blup_weights(weights) @ np.asarray(w_prev_parents, dtype=float))


def transient_loglik(obs_effects, state, blocks, p):
    W, eps = state.W, state.eps
    means, scales = [], []
    for block in blocks:
        t, P = block.t, block.parents
        if t == 0:
            mean = eps[0] + block.weights @ (W[0, P] - eps[0])
        else:
            m_parents = mean_function(W[t - 1, P], eps[t - 1], eps[t], p.phi)
            w_tilde = block.blup_weights @ W[t - 1, P]
            mean = mean_function(w_tilde, eps[t - 1], eps[t], p.phi) + block.weights @ (W[t, P] - m_parents)
        means.append(mean)
        scales.append(np.sqrt(block.cond_var))
    if not means:
        return 0.0
    return float(norm.logpdf(np.asarray(obs_effects, dtype=float), loc=means, scale=scales).sum())


def process_loglik(state, structure, layout, p):
    """Temporal + persistent + transient log-density of the random effects"""
    blocks = list(structure.transient_blocks(layout))
    return (ar1_logdensity(state.eps, p)
            + persistent_loglik(state, structure, p)
            + transient_loglik(state.transient, state, blocks, p))
