"""
=============================================================================
fits/writers.py - Output Files
=============================================================================

Every CSV is comma separated with a header and '\\n' line ends. Floats use
the shortest text that reads back as the same double, so outputs are
byte-identical across runs with the same inputs and seed.
"""

import csv
import logging

from etc.helper_functions import format_float, format_int
from spatial.graph import mean_edge_distance, to_dot

logger = logging.getLogger(__name__)

PARAMETER_COLUMNS = ['group', 'name', 'par', 'se', 'fixed']
PREDICTION_COLUMNS = ['t', 'w', 'w_se', 'linear', 'linear_se', 'response', 'response_se']


def coordinate_columns(dim):
    return ['x', 'y'] if dim == 2 else [f'x{j + 1}' for j in range(dim)]


def _write_rows(path, header, rows):
    with open(path, 'w', encoding='utf-8', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(header)
        writer.writerows(rows)
    logger.info("Wrote %s", path)


def format_bool(value):
    return 'TRUE' if value else 'FALSE'


# ======================== Fit Outputs ========================

def parameter_rows(fit):
    return [
        [group, name, format_float(par), format_float(se), format_bool(fixed)]
        for group, name, par, se, fixed in fit.parameter_table()
    ]


def write_parameter_table(path, fit):
    _write_rows(path, PARAMETER_COLUMNS, parameter_rows(fit))


def effect_rows(fit, time_labels):
    """(kind, t, node, coords..., w, w_se) for every random effect"""
    model = fit.model
    layout = model.layout
    dim = model.refs.dim
    refs = model.refs.coords
    transient = model.structure.transient_coords
    blank = [''] * dim

    rows = []
    for t in range(layout.n_times):
        i = layout.eps_index(t)
        rows.append(['time', format_int(time_labels[t]), ''] + blank + [format_float(fit.u[i]), format_float(fit.u_se[i])])
    for t in range(layout.n_times):
        for node in range(layout.n_refs):
            i = layout.ref_index(t, node)
            rows.append(['reference', format_int(time_labels[t]), format_int(node)]
                        + [format_float(c) for c in refs[node]]
                        + [format_float(fit.u[i]), format_float(fit.u_se[i])])
    for k, (t, loc) in enumerate(layout.transient_keys):
        i = layout.transient_index(k)
        rows.append(['transient', format_int(time_labels[t]), format_int(loc)]
                    + [format_float(c) for c in transient[loc]]
                    + [format_float(fit.u[i]), format_float(fit.u_se[i])])
    return rows


def write_random_effects(path, fit, time_labels):
    header = ['kind', 't', 'node'] + coordinate_columns(fit.model.refs.dim) + ['w', 'w_se']
    _write_rows(path, header, effect_rows(fit, time_labels))


# ======================== Prediction, Simulation, Residuals ========================

def prediction_rows(table, label_of):
    """label_of maps internal times (forecasts included) to output times"""
    rows = []
    for record in table.records():
        rows.append(
            [format_float(c) for c in record.coords]
            + [format_int(label_of(record.t)),
               format_float(record.w), format_float(record.w_se),
               format_float(record.linear), format_float(record.linear_se),
               format_float(record.response), format_float(record.response_se)]
        )
    return rows


def write_predictions(path, table, label_of):
    header = coordinate_columns(table.coords.shape[1]) + PREDICTION_COLUMNS
    _write_rows(path, header, prediction_rows(table, label_of))


def write_simulations(path, simulations):
    n_sim, n_obs = simulations.y.shape
    header = ['row'] + [f'sim_{i + 1}' for i in range(n_sim)]
    rows = (
        [format_int(r + 1)] + [format_float(v) for v in simulations.y[:, r]]
        for r in range(n_obs)
    )
    _write_rows(path, header, rows)


def write_residuals(path, residuals):
    rows = (
        [format_int(r + 1), format_float(observed), format_float(pit)]
        for r, (observed, pit) in enumerate(zip(residuals.observed, residuals.values))
    )
    _write_rows(path, ['row', 'observed', 'pit'], rows)


# ======================== Graph ========================

def write_dot(path, model):
    """DOT file of the persistent graph; returns the mean edge length"""
    summary = mean_edge_distance(model.dag, model.refs)
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write(to_dot(model.dag, model.refs))
    logger.info("Wrote %s (mean edge distance %s)", path, format_float(summary.mean_edge_distance))
    return summary
