from etc.exceptions import NotConvergedError
from etc.helper_functions import format_float
from fits.artifacts import write_fit_artifact
from fits.config import load_config
from fits.datasets import ingest
from fits.management.base import StnngpCommand
from fits.services import run_fit
from fits.writers import write_parameter_table, write_random_effects


class Command(StnngpCommand):
    help = 'Fit a spatio-temporal NNGP model to a CSV or GeoJSON dataset'

    def add_command_arguments(self, parser):
        parser.add_argument('data', help='CSV or GeoJSON dataset')
        parser.add_argument('--config', default=None, help='Run configuration (one `key: value` per line)')
        parser.add_argument(
            '--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
            help='Override one configuration key, e.g. --set model.family=gaussian',
        )
        parser.add_argument('--out-dir', default='.', help='Directory for the outputs')
        parser.add_argument('--prefix', default='fit', help='File name prefix of the outputs')

    def handle_command(self, data, config, overrides, out_dir, prefix, threads, **options):
        run_config = load_config(config, overrides)
        dataset = ingest(data, run_config)
        artifact = run_fit(dataset, run_config, threads=threads)
        result = artifact.fit

        write_fit_artifact(self.out_path(out_dir, f'{prefix}.json'), artifact)
        write_parameter_table(self.out_path(out_dir, f'{prefix}_parameters.csv'), result)
        write_random_effects(self.out_path(out_dir, f'{prefix}_effects.csv'), result, dataset.time_labels)

        self.stdout.write(f"{'group':<15}{'name':<16}{'par':>24}{'se':>24}  fixed")
        for group, name, par, se, fixed in result.parameter_table():
            self.stdout.write(f"{group:<15}{name:<16}{format_float(par):>24}{format_float(se):>24}  {fixed}")
        self.stdout.write(f"nll: {format_float(result.nll)}")
        self.stdout.write(f"Convergence: {result.message}")
        if not result.converged:
            raise NotConvergedError(f"not converged: {result.message}")
