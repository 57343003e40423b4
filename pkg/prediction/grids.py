"""
=============================================================================
prediction/grids.py - Prediction Grids & ESRI ASCII Rasters
=============================================================================

Row 0 of a raster is its northern edge. Cells equal to NODATA in a template
are inactive and are written back as NODATA.
"""

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from etc.exceptions import DataError, PredictionError
from etc.helper_functions import format_float
from .predict import LAYERS, predict

logger = logging.getLogger(__name__)

NODATA = -9999.0
HEADER_KEYS = ('ncols', 'nrows', 'xllcorner', 'yllcorner', 'xllcenter', 'yllcenter',
               'cellsize', 'dx', 'dy', 'nodata_value')


@dataclass(frozen=True, eq=False)
class PredictionGrid:
    xllcorner: float
    yllcorner: float
    dx: float
    dy: float
    n_rows: int
    n_cols: int
    mask: np.ndarray = None
    times: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not (self.dx > 0 and self.dy > 0):
            raise PredictionError("Grid cells must have positive size.")
        if self.n_rows < 1 or self.n_cols < 1:
            raise PredictionError("A grid needs at least one row and one column.")
        mask = np.ones((self.n_rows, self.n_cols), dtype=bool) if self.mask is None else np.asarray(self.mask, dtype=bool)
        if mask.shape != (self.n_rows, self.n_cols):
            raise PredictionError("The active-cell mask must match the grid shape.")
        object.__setattr__(self, 'mask', mask)
        object.__setattr__(self, 'times', tuple(int(t) for t in self.times))

    @classmethod
    def from_bounds(cls, xmin, ymin, xmax, ymax, cellsize, times=()):
        n_cols = max(int(np.ceil((xmax - xmin) / cellsize)), 1)
        n_rows = max(int(np.ceil((ymax - ymin) / cellsize)), 1)
        return cls(xmin, ymin, cellsize, cellsize, n_rows, n_cols, times=times)

    @classmethod
    def from_template(cls, path, times=()):
        header, values = read_ascii_grid(path)
        mask = values != header['nodata_value']
        return cls(header['xllcorner'], header['yllcorner'], header['dx'], header['dy'],
                   header['nrows'], header['ncols'], mask=mask, times=times)

    @property
    def n_active(self):
        return int(self.mask.sum())

    def centroids(self):
        """Active cell centres in row-major order, north row first"""
        rows, cols = np.nonzero(self.mask)
        x = self.xllcorner + (cols + 0.5) * self.dx
        y = self.yllcorner + (self.n_rows - rows - 0.5) * self.dy
        return np.column_stack([x, y])

    def to_raster(self, values):
        values = np.asarray(values, dtype=float)
        if values.size != self.n_active:
            raise PredictionError(f"Expected {self.n_active} cell values, got {values.size}.")
        raster = np.full((self.n_rows, self.n_cols), NODATA)
        raster[self.mask] = values
        return raster


# ======================== ESRI ASCII ========================

def read_ascii_grid(path):
    """Header (with dx, dy and the lower-left corner resolved) and the value array"""
    header = {}
    try:
        with open(path, encoding='utf-8') as handle:
            lines = handle.read().splitlines()
    except OSError as exc:
        raise DataError(f"Cannot read grid '{path}': {exc}")
    n_header = 0
    for line in lines:
        parts = line.split()
        if len(parts) != 2 or parts[0].lower() not in HEADER_KEYS:
            break
        header[parts[0].lower()] = float(parts[1])
        n_header += 1
    for key in ('ncols', 'nrows'):
        if key not in header:
            raise DataError(f"Grid '{path}' has no '{key}' line.")
    header['ncols'], header['nrows'] = int(header['ncols']), int(header['nrows'])
    if 'cellsize' in header:
        header['dx'] = header['dy'] = header['cellsize']
    if 'dx' not in header or 'dy' not in header:
        raise DataError(f"Grid '{path}' has no cell size.")
    if 'xllcorner' not in header:
        if 'xllcenter' not in header or 'yllcenter' not in header:
            raise DataError(f"Grid '{path}' has no lower-left corner.")
        header['xllcorner'] = header['xllcenter'] - 0.5 * header['dx']
        header['yllcorner'] = header['yllcenter'] - 0.5 * header['dy']
    header.setdefault('nodata_value', NODATA)

    try:
        values = np.array([[float(v) for v in line.split()] for line in lines[n_header:] if line.strip()])
    except ValueError as exc:
        raise DataError(f"Grid '{path}' has a non-numeric cell: {exc}")
    if values.shape != (header['nrows'], header['ncols']):
        raise DataError(
            f"Grid '{path}' holds {values.shape} values; the header says "
            f"({header['nrows']}, {header['ncols']})."
        )
    return header, values


def write_ascii_grid(path, grid, raster):
    lines = [f"ncols {grid.n_cols}", f"nrows {grid.n_rows}",
             f"xllcorner {format_float(grid.xllcorner)}", f"yllcorner {format_float(grid.yllcorner)}"]
    if grid.dx == grid.dy:
        lines.append(f"cellsize {format_float(grid.dx)}")
    else:
        lines += [f"dx {format_float(grid.dx)}", f"dy {format_float(grid.dy)}"]
    lines.append(f"NODATA_value {format_float(NODATA)}")
    lines += [' '.join(format_float(v) for v in row) for row in raster]
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write('\n'.join(lines) + '\n')


# ======================== Grid Prediction ========================

def predict_grid(fit, grid, *, forecast_horizon=None):
    """{(t, layer): raster} at the active cell centres for every grid time"""
    if fit.params.beta.size:
        raise PredictionError("Grid prediction needs a model without covariates.")
    if not grid.times:
        raise PredictionError("The grid has no prediction times.")
    centres = grid.centroids()
    coords = np.tile(centres, (len(grid.times), 1))
    times = np.repeat(np.array(grid.times, dtype=np.int64), centres.shape[0])
    table = predict(fit, coords, times, forecast_horizon=forecast_horizon)
    rasters = {}
    for k, t in enumerate(grid.times):
        block = slice(k * centres.shape[0], (k + 1) * centres.shape[0])
        for name in LAYERS:
            rasters[(t, name)] = grid.to_raster(table.layer(name)[block])
    logger.info("Grid prediction: %d active cells x %d times", grid.n_active, len(grid.times))
    return rasters


def write_grid_layers(directory, grid, rasters, time_labels=None):
    """One file per time per layer, named <layer>_<time>.asc"""
    os.makedirs(directory, exist_ok=True)
    written = []
    for (t, name), raster in sorted(rasters.items()):
        label = time_labels[t] if time_labels is not None else t
        path = os.path.join(directory, f"{name}_{label}.asc")
        write_ascii_grid(path, grid, raster)
        written.append(path)
    return written
