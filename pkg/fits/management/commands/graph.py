from etc.helper_functions import format_float
from fits.config import load_config
from fits.datasets import ingest
from fits.management.base import StnngpCommand
from fits.services import prepare_model, reference_coordinates
from fits.writers import write_dot


class Command(StnngpCommand):
    help = 'Write the persistent neighbour graph of a dataset as DOT'

    def add_command_arguments(self, parser):
        parser.add_argument('data', help='CSV or GeoJSON dataset')
        parser.add_argument('--config', default=None, help='Run configuration (one `key: value` per line)')
        parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                            help='Override one configuration key')
        parser.add_argument('--out', default='graph.dot', help='DOT file')

    def handle_command(self, data, config, overrides, out, **options):
        run_config = load_config(config, overrides)
        dataset = ingest(data, run_config)
        model = prepare_model(dataset, run_config, reference_coordinates(run_config))
        summary = write_dot(out, model)
        self.stdout.write(f"nodes: {len(model.refs)}")
        self.stdout.write(f"edges: {model.dag.n_edges}")
        self.stdout.write(f"mean edge distance: {format_float(summary.mean_edge_distance)}")
