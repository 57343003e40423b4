"""
=============================================================================
spatial/graph.py - Reference Ordering & Nearest-Neighbour Graphs
=============================================================================
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from etc.exceptions import GraphError

logger = logging.getLogger(__name__)

# Below this many candidate nodes, neighbours are found by a full distance sort
BRUTE_FORCE_LIMIT = 2000
EARTH_RADIUS_KM = 6371.0088


# ======================== Types ========================

@dataclass(frozen=True, eq=False)
class ReferenceSet:
    """
    Ordered reference locations (south-west first, north-east last)
    """
    coords: np.ndarray
    ordering_key: np.ndarray
    source_index: np.ndarray

    def __len__(self):
        return self.coords.shape[0]

    @property
    def dim(self):
        return self.coords.shape[1]


@dataclass(frozen=True, eq=False)
class NeighbourDag:
    """
    Persistent parents per reference node and transient parents per
    non-reference location. A location keeps the same parents every time,
    so the transient part is keyed by location rather than (time, location).
    """
    persistent_parents: tuple
    transient_parents: tuple = ()
    n_parents: int = 15
    metric: str = 'euclidean'

    @property
    def n_edges(self):
        return int(sum(len(p) for p in self.persistent_parents))

    def edges(self):
        for child, parents in enumerate(self.persistent_parents):
            for parent in parents:
                yield child, int(parent)

    def with_transient(self, transient_parents):
        return NeighbourDag(
            persistent_parents=self.persistent_parents,
            transient_parents=tuple(transient_parents),
            n_parents=self.n_parents,
            metric=self.metric,
        )


@dataclass(frozen=True)
class EdgeSummary:
    mean_edge_distance: float


# ======================== Coordinates & Distances ========================

def as_coords(locations):
    """Validate a list of locations and return an (n, d) float array"""
    coords = np.asarray(locations, dtype=float)
    if coords.ndim == 1:
        coords = coords.reshape(-1, 1) if coords.size else coords.reshape(0, 1)
    if coords.ndim != 2:
        raise GraphError("Locations must be a list of coordinate vectors.")
    if coords.shape[0] and coords.shape[1] < 1:
        raise GraphError("Locations need at least one coordinate.")
    if not np.all(np.isfinite(coords)):
        raise GraphError("Location coordinates must be finite.")
    return coords


def _haversine(a, b):
    lon1, lat1 = np.radians(a[:, 0])[:, None], np.radians(a[:, 1])[:, None]
    lon2, lat2 = np.radians(b[:, 0])[None, :], np.radians(b[:, 1])[None, :]
    h = (np.sin((lat2 - lat1) / 2.0) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def pairwise_distances(a, b, metric='euclidean'):
    """Distance matrix between two coordinate arrays"""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if metric == 'euclidean':
        return cdist(a, b)
    if metric == 'haversine':
        if a.shape[1] != 2:
            raise GraphError("Haversine distance needs (longitude, latitude) coordinates.")
        return _haversine(a, b)
    raise GraphError(f"Unknown distance metric '{metric}'.")


def _tree_points(coords, metric):
    # Chord length on the unit sphere is monotone in great-circle distance
    if metric == 'haversine':
        lon, lat = np.radians(coords[:, 0]), np.radians(coords[:, 1])
        return np.column_stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)])
    return coords


def _nearest(query, candidates, k, metric, tree=None):
    """
    Indices of the k nearest candidates for each query point, ties broken
    by lower candidate index.
    """
    n_cand = candidates.shape[0]
    k = min(k, n_cand)
    out = np.empty((query.shape[0], k), dtype=np.int64)
    if k == 0:
        return out

    if tree is None or n_cand < BRUTE_FORCE_LIMIT:
        index = np.arange(n_cand)
        for start in range(0, query.shape[0], 512):
            block = pairwise_distances(query[start:start + 512], candidates, metric)
            for row, dist in enumerate(block):
                out[start + row] = np.lexsort((index, dist))[:k]
        return out

    points = _tree_points(query, metric)
    for row, point in enumerate(points):
        dist, _ = tree.query(point, k=k)
        radius = float(np.atleast_1d(dist)[-1])
        ball = np.asarray(tree.query_ball_point(point, radius * (1.0 + 1e-12) + 1e-12), dtype=np.int64)
        exact = pairwise_distances(query[row:row + 1], candidates[ball], metric)[0]
        out[row] = ball[np.lexsort((ball, exact))][:k]
    return out


# ======================== Operations ========================

def dedupe_locations(locations):
    """
    Merge exact-coordinate duplicates, keeping first-appearance order.
    Returns the unique coordinates and a map from input rows to unique rows.
    """
    coords = as_coords(locations)
    if coords.shape[0] == 0:
        return coords, np.zeros(0, dtype=np.int64)
    _, first, inverse = np.unique(coords, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(first, kind='stable')
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    return coords[first[order]], rank[inverse]


def order_locations(locations):
    """
    Sort by ascending coordinate sum; ties by first coordinate, then the
    second and so on, then by first appearance.
    """
    coords = as_coords(locations)
    if coords.shape[0] == 0:
        raise GraphError("empty reference set")
    key = coords.sum(axis=1)
    index = np.arange(coords.shape[0])
    sort_keys = [index] + [coords[:, j] for j in reversed(range(coords.shape[1]))] + [key]
    order = np.lexsort(sort_keys)
    return ReferenceSet(coords=coords[order], ordering_key=key[order], source_index=order)


def build_persistent_graph(refs, n_parents, metric='euclidean'):
    """
    Each reference node's parents are its min(i, n_parents) nearest
    predecessors in the ordering.
    """
    if n_parents < 1:
        raise GraphError("n_parents must be at least 1.")
    coords = refs.coords
    n = coords.shape[0]
    tree = cKDTree(_tree_points(coords, metric)) if n >= BRUTE_FORCE_LIMIT else None

    parents = [np.zeros(0, dtype=np.int64)]
    for i in range(1, n):
        k = min(i, n_parents)
        if tree is None or i <= 4 * n_parents:
            dist = pairwise_distances(coords[i:i + 1], coords[:i], metric)[0]
            parents.append(np.lexsort((np.arange(i), dist))[:k].astype(np.int64))
            continue
        # Grow the query until enough predecessors are inside it
        point = _tree_points(coords[i:i + 1], metric)[0]
        width = 2 * k
        while True:
            width = min(width, n)
            dist, idx = tree.query(point, k=width)
            earlier = idx[idx < i]
            if earlier.size >= k or width == n:
                break
            width *= 2
        radius = float(dist[idx < i][k - 1])
        ball = np.asarray(tree.query_ball_point(point, radius * (1.0 + 1e-12) + 1e-12), dtype=np.int64)
        ball = ball[ball < i]
        exact = pairwise_distances(coords[i:i + 1], coords[ball], metric)[0]
        parents.append(ball[np.lexsort((ball, exact))][:k])

    dag = NeighbourDag(persistent_parents=tuple(parents), n_parents=int(n_parents), metric=metric)
    logger.info("Persistent graph: %d nodes, %d edges (n_parents=%d)", n, dag.n_edges, n_parents)
    return dag


def build_transient_parents(obs_locations, refs, n_parents, metric='euclidean'):
    """Nearest min(|refs|, n_parents) reference nodes for each location"""
    if len(refs) == 0:
        raise GraphError("empty reference set")
    query = as_coords(obs_locations)
    if query.shape[0] == 0:
        return ()
    tree = None
    if len(refs) >= BRUTE_FORCE_LIMIT:
        tree = cKDTree(_tree_points(refs.coords, metric))
    nearest = _nearest(query, refs.coords, n_parents, metric, tree=tree)
    return tuple(row.copy() for row in nearest)


def mean_edge_distance(dag, refs):
    """Average length of the persistent child -> parent edges"""
    lengths = [
        pairwise_distances(refs.coords[i:i + 1], refs.coords[parents], dag.metric)[0]
        for i, parents in enumerate(dag.persistent_parents) if len(parents)
    ]
    if not lengths:
        raise GraphError("degenerate graph")
    return EdgeSummary(mean_edge_distance=float(np.mean(np.concatenate(lengths))))


def to_dot(dag, refs, name='persistent'):
    """DOT text with one directed edge per child -> parent"""
    lines = [f'digraph {name} {{']
    for i, point in enumerate(refs.coords):
        label = ', '.join(repr(float(c)) for c in point)
        lines.append(f'  {i} [label="{i} ({label})"];')
    for child, parent in dag.edges():
        lines.append(f'  {child} -> {parent};')
    lines.append('}')
    return '\n'.join(lines) + '\n'
