from dataclasses import replace

from etc.choices import FAMILY_CHOICES
from fits.artifacts import read_fit_artifact
from fits.datasets import dataset_to_csv, dataset_to_geojson
from fits.management.base import StnngpCommand
from fits.services import simulate_fit
from fits.writers import write_simulations


class Command(StnngpCommand):
    help = 'Simulate response datasets at the fitted observation rows'

    def add_command_arguments(self, parser):
        parser.add_argument('artifact', help='Fit artifact written by the fit command')
        parser.add_argument('--n-sim', type=int, default=1, help='Number of simulated datasets')
        parser.add_argument('--unconditional', action='store_true',
                            help='Draw the random effects too instead of holding them at their modes')
        parser.add_argument('--seed', type=int, default=None, help='Root seed (default: from the fit configuration)')
        parser.add_argument('--family', choices=[value for value, _ in FAMILY_CHOICES],
                            help='Simulate from another response family')
        parser.add_argument('--family-param', action='append', default=[], metavar='NAME=VALUE',
                            help='Parameter of --family, e.g. overdispersion=0.5')
        parser.add_argument('--out', default='simulations.csv', help='Simulation CSV')
        parser.add_argument('--export-dir', default=None,
                            help='Also write every simulated dataset in the input layout')
        parser.add_argument('--export-format', choices=['csv', 'geojson'], default='csv')
        parser.add_argument('--progress', action='store_true', help='Show a progress bar')

    def handle_command(self, artifact, n_sim, unconditional, seed, family, family_param, out, progress,
                       export_dir, export_format, **options):
        if n_sim < 1:
            raise self.usage("--n-sim must be at least 1.")
        if seed is not None and seed < 0:
            raise self.usage("--seed must not be negative.")
        if family_param and family is None:
            raise self.usage("--family-param needs --family.")
        family_params = {}
        for item in family_param:
            name, sep, value = item.partition('=')
            try:
                if not sep:
                    raise ValueError(item)
                family_params[name.strip()] = float(value)
            except ValueError:
                raise self.usage(f"--family-param '{item}' is not NAME=VALUE.")

        fitted = read_fit_artifact(artifact)
        sims = simulate_fit(fitted, n_sim, conditional=not unconditional, seed=seed, family=family,
                            family_params=family_params, progress=progress)
        write_simulations(out, sims)
        kind = 'conditional' if sims.conditional else 'unconditional'
        self.stdout.write(f"{sims.n_sim} {kind} simulations of {sims.y.shape[1]} rows -> {out}")

        if export_dir:
            writer = dataset_to_geojson if export_format == 'geojson' else dataset_to_csv
            for i in range(sims.n_sim):
                path = self.out_path(export_dir, f"simulation_{i + 1}.{export_format}")
                writer(path, replace(fitted.dataset, y=sims.y[i]))
            self.stdout.write(f"{sims.n_sim} datasets -> {export_dir}")
