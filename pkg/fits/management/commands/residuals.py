from etc.conf import stnngp_setting
from etc.helper_functions import format_float
from fits.artifacts import read_fit_artifact
from fits.management.base import StnngpCommand
from fits.services import residual_report
from fits.writers import write_residuals


class Command(StnngpCommand):
    help = 'Simulation-based PIT residuals of a fit, with a KS uniformity test'

    def add_command_arguments(self, parser):
        parser.add_argument('artifact', help='Fit artifact written by the fit command')
        parser.add_argument('--n-sim', type=int, default=None,
                            help=f"Conditional simulations (default {stnngp_setting('RESIDUAL_N_SIM')})")
        parser.add_argument('--seed', type=int, default=None, help='Root seed (default: from the fit configuration)')
        parser.add_argument('--out', default='residuals.csv', help='Residual CSV')
        parser.add_argument('--progress', action='store_true', help='Show a progress bar')

    def handle_command(self, artifact, n_sim, seed, out, progress, **options):
        if seed is not None and seed < 0:
            raise self.usage("--seed must not be negative.")
        fitted = read_fit_artifact(artifact)
        report = residual_report(fitted, n_sim, seed=seed, progress=progress)
        write_residuals(out, report.residuals)
        self.stdout.write(f"KS statistic: {format_float(report.statistic)}")
        self.stdout.write(f"p-value: {format_float(report.pvalue)}")
        self.stdout.write(f"dispersion: {report.direction}")
