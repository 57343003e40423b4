from fits.artifacts import read_fit_artifact
from fits.management.base import StnngpCommand
from fits.services import label_of, predict_on_grid, predict_points, read_points
from fits.writers import write_predictions
from prediction.grids import PredictionGrid, write_grid_layers


class Command(StnngpCommand):
    help = 'Predict random effects, linear predictors and response means from a fit artifact'

    def add_command_arguments(self, parser):
        parser.add_argument('artifact', help='Fit artifact written by the fit command')
        source = parser.add_mutually_exclusive_group(required=True)
        source.add_argument('--points', help='CSV of points with the fitted coordinate, time and covariate columns')
        source.add_argument('--grid', help='ESRI ASCII grid whose active cells are predicted')
        source.add_argument('--bounds', nargs=4, type=float, metavar=('XMIN', 'YMIN', 'XMAX', 'YMAX'),
                            help='Rectangle covered by square cells of --cellsize')
        parser.add_argument('--cellsize', type=float, help='Cell size for --bounds')
        parser.add_argument('--times', nargs='+', type=int, help='Times predicted on a grid')
        parser.add_argument('--horizon', type=int, default=None,
                            help='Forecast horizon past the last fitted time (default: from the fit configuration)')
        parser.add_argument('--hold-state', action='store_true',
                            help='Keep every fitted random effect at its mode')
        parser.add_argument('--out', default=None,
                            help='Prediction CSV for --points, directory of grids otherwise')

    def handle_command(self, artifact, points, grid, bounds, cellsize, times, horizon, hold_state, out, **options):
        if horizon is not None and horizon < 0:
            raise self.usage("--horizon must not be negative.")
        if points is None:
            if not times:
                raise self.usage("Grid prediction needs --times.")
            if bounds is not None and not cellsize:
                raise self.usage("--bounds needs --cellsize.")
        fitted = read_fit_artifact(artifact)

        if points is not None:
            coords, labels, covariates = read_points(fitted, points)
            table = predict_points(fitted, coords, labels, covariates, horizon=horizon, hold_state=hold_state)
            path = out or 'predictions.csv'
            write_predictions(path, table, label_of(fitted))
            self.stdout.write(f"Predicted {len(table)} points -> {path}")
            return

        if grid is not None:
            target = PredictionGrid.from_template(grid, times=times)
        else:
            target = PredictionGrid.from_bounds(*bounds, cellsize, times=times)
        rasters = predict_on_grid(fitted, target, horizon=horizon)
        written = write_grid_layers(out or 'grids', target, rasters)
        self.stdout.write(f"Predicted {target.n_active} cells x {len(times)} times -> {len(written)} grids")
