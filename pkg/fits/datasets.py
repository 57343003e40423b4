"""
=============================================================================
fits/datasets.py - CSV & GeoJSON Ingestion
=============================================================================

Input times are arbitrary integers. They are offset so that the first time
is 0 internally; years missing inside the range become unobserved times
that carry random effects only.
"""

import csv
import io
import json
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from engine.model import check_covariates
from etc.exceptions import DataError
from etc.helper_functions import format_float, format_int

logger = logging.getLogger(__name__)

MISSING = ('', 'NA', 'NaN', 'nan', 'null', 'None')


@dataclass(frozen=True, eq=False)
class SpatioTemporalDataset:
    coords: np.ndarray
    times: np.ndarray       # internal, 0..T-1
    y: np.ndarray
    X: np.ndarray
    coordinate_names: tuple
    time_name: str
    response_name: str
    covariate_names: tuple = ()
    time_labels: tuple = ()  # input time of each internal time

    @property
    def n_obs(self):
        return self.y.size

    @property
    def n_times(self):
        return len(self.time_labels)

    @property
    def labels(self):
        """Input time of every row"""
        return np.asarray(self.time_labels, dtype=np.int64)[self.times]

    def internal_times(self, labels):
        """Input times to internal times; later times continue the range"""
        labels = np.asarray(labels, dtype=float)
        if labels.size and not np.all(labels == np.round(labels)):
            raise DataError("Times must be integers.")
        return labels.astype(np.int64) - int(self.time_labels[0])


# ======================== Column Parsing ========================

def _to_float(value):
    try:
        return float(value)
    except (TypeError, ValueError):
        return np.nan


def numeric_column(frame, name, source):
    """(values, missing mask); a non-numeric cell is a DataError naming its row and column"""
    if name not in frame.columns:
        raise DataError(f"{source}: column '{name}' not found.")
    raw = frame[name]
    missing = (raw.isna() | raw.astype(str).str.strip().isin(MISSING)).to_numpy()
    values = np.array([np.nan if m else _to_float(v) for v, m in zip(raw, missing)], dtype=float)
    bad = np.flatnonzero(~np.isfinite(values) & ~missing)
    if bad.size:
        i = int(bad[0])
        raise DataError(f"{source}: non-numeric value {raw.iloc[i]!r} in column '{name}', row {i + 1}.")
    return values, missing


def build_dataset(frame, columns, source='<data>'):
    """Validate a string/object frame and map its times to 0..T-1"""
    coord_names = tuple(columns['coords'])
    time_name, response_name = columns['time'], columns['response']
    covariate_names = tuple(columns.get('covariates', ()))

    coords, X = [], []
    for name in coord_names:
        values, missing = numeric_column(frame, name, source)
        if missing.any():
            raise DataError(f"{source}: missing coordinate in column '{name}', row {int(np.argmax(missing)) + 1}.")
        coords.append(values)
    times, missing = numeric_column(frame, time_name, source)
    if missing.any():
        raise DataError(f"{source}: missing time in row {int(np.argmax(missing)) + 1}.")
    if not np.all(times == np.round(times)):
        row = int(np.argmax(times != np.round(times)))
        raise DataError(f"{source}: time {times[row]!r} in row {row + 1} is not an integer.")
    for name in covariate_names:
        values, missing = numeric_column(frame, name, source)
        if missing.any():
            raise DataError(f"{source}: missing covariate '{name}' in row {int(np.argmax(missing)) + 1}.")
        X.append(values)
    y, missing_y = numeric_column(frame, response_name, source)

    keep = ~missing_y
    if not keep.all():
        logger.warning("%s: dropped %d rows with a missing response", source, int((~keep).sum()))
    if not keep.any():
        raise DataError(f"{source}: no rows with a response.")

    coords = np.column_stack(coords)[keep]
    labels = times[keep].astype(np.int64)
    y = y[keep]
    X = np.column_stack(X)[keep] if X else np.zeros((y.size, 0))
    check_covariates(X, covariate_names)

    first, last = int(labels.min()), int(labels.max())
    time_labels = tuple(range(first, last + 1))
    gaps = sorted(set(time_labels) - set(labels.tolist()))
    if gaps:
        logger.warning("%s: inserted %d unobserved times %s", source, len(gaps), gaps)
    dataset = SpatioTemporalDataset(
        coords=coords,
        times=labels - first,
        y=y,
        X=X,
        coordinate_names=coord_names,
        time_name=time_name,
        response_name=response_name,
        covariate_names=covariate_names,
        time_labels=time_labels,
    )
    logger.info("%s: %d rows over %d times", source, dataset.n_obs, dataset.n_times)
    return dataset


# ======================== Readers ========================

def source_name(source):
    return str(getattr(source, 'name', source))


def read_text(source):
    """Text of a path or of an open (possibly binary) file"""
    try:
        if hasattr(source, 'read'):
            data = source.read()
            return data.decode('utf-8') if isinstance(data, bytes) else data
        with open(source, encoding='utf-8') as handle:
            return handle.read()
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"Cannot read '{source_name(source)}': {exc}")


def read_frame(source):
    """Every cell as text, so bad cells can be reported by row and column"""
    try:
        return pd.read_csv(io.StringIO(read_text(source)), dtype=str, keep_default_na=False,
                           skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"'{source_name(source)}' is not a valid CSV file: {exc}")


def ingest_csv(path, config):
    """Rows of a headed, comma separated file; columns named by config.data"""
    return build_dataset(read_frame(path), config.data, source=source_name(path))


def ingest_geojson(path, config):
    """
    Point features; the configured coordinate names map to the geometry
    coordinates in order, the other columns to feature properties.
    """
    source = source_name(path)
    try:
        document = json.loads(read_text(path))
    except ValueError as exc:
        raise DataError(f"'{source}' is not valid JSON: {exc}")
    features = document.get('features') if isinstance(document, dict) else None
    if not isinstance(features, list) or document.get('type') != 'FeatureCollection':
        raise DataError(f"'{source}' is not a GeoJSON FeatureCollection.")

    columns = config.data
    coord_names = list(columns['coords'])
    needed = [columns['time'], columns['response']] + list(columns.get('covariates', ()))
    rows = []
    for k, feature in enumerate(features, start=1):
        geometry = feature.get('geometry') or {}
        if geometry.get('type') != 'Point':
            raise DataError(f"{source}: feature {k} is a {geometry.get('type')!r}, only Point geometries are supported.")
        point = geometry.get('coordinates') or []
        if len(point) < len(coord_names):
            raise DataError(f"{source}: feature {k} has {len(point)} coordinates, {len(coord_names)} are configured.")
        properties = feature.get('properties') or {}
        for name in needed:
            if name not in properties:
                raise DataError(f"{source}: feature {k} has no '{name}' property.")
        row = dict(zip(coord_names, point))
        row.update({name: properties[name] for name in needed})
        rows.append(row)
    frame = pd.DataFrame(rows, columns=coord_names + needed, dtype=object)
    return build_dataset(frame, columns, source=source)


def ingest(path, config):
    """Dispatch on the file extension"""
    if source_name(path).lower().endswith(('.geojson', '.json')):
        return ingest_geojson(path, config)
    return ingest_csv(path, config)


def read_coordinates(path, names):
    """Coordinate rows of a reference-set CSV"""
    frame = read_frame(path)
    columns = []
    for name in names:
        values, missing = numeric_column(frame, name, source_name(path))
        if missing.any():
            raise DataError(f"{source_name(path)}: missing coordinate in column '{name}'.")
        columns.append(values)
    return np.column_stack(columns)


# ======================== Writers ========================

def _row_values(dataset, i):
    return (
        [format_float(c) for c in dataset.coords[i]]
        + [format_int(dataset.time_labels[dataset.times[i]]), format_float(dataset.y[i])]
        + [format_float(v) for v in dataset.X[i]]
    )


def dataset_to_csv(path, dataset):
    header = list(dataset.coordinate_names) + [dataset.time_name, dataset.response_name]
    header += list(dataset.covariate_names)
    with open(path, 'w', encoding='utf-8', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(header)
        for i in range(dataset.n_obs):
            writer.writerow(_row_values(dataset, i))


def dataset_to_geojson(path, dataset):
    labels = dataset.labels
    features = []
    for i in range(dataset.n_obs):
        properties = {dataset.time_name: int(labels[i]), dataset.response_name: float(dataset.y[i])}
        properties.update({name: float(v) for name, v in zip(dataset.covariate_names, dataset.X[i])})
        features.append({
            'type': 'Feature',
            'geometry': {'type': 'Point', 'coordinates': [float(c) for c in dataset.coords[i]]},
            'properties': properties,
        })
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        json.dump({'type': 'FeatureCollection', 'features': features}, handle)
        handle.write('\n')
