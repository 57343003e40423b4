import csv
import io
import json
import os
import shutil
import tempfile
from dataclasses import replace
from functools import cache
from unittest import mock

import numpy as np
from numpy.testing import assert_array_equal
from django.contrib.auth import get_user_model
from django.core.files.uploadedfile import SimpleUploadedFile
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase, override_settings
from rest_framework.test import APIClient

from etc.exceptions import ArtifactError, ConfigError, DataError
from etc.helper_functions import format_float
from .artifacts import artifact_to_dict, dumps_fit_artifact, loads_fit_artifact, read_fit_artifact, write_fit_artifact
from .config import load_config, parse_config, validate_config
from .datasets import dataset_to_csv, dataset_to_geojson, ingest, ingest_csv, ingest_geojson
from .models import FitRun
from .services import predict_points, run_fit
from .writers import write_dot, write_parameter_table, write_random_effects

# Only mu is estimated, so toy fits take a fraction of a second
TOY_CONFIG = """\
model.family: poisson
graph.n_parents: 4
data.covariates: [elev]
parameters.tau.value: 0.6
parameters.tau.fixed: true
parameters.phi.value: 0.5
parameters.phi.fixed: true
parameters.sigma.value: 0.4
parameters.sigma.fixed: true
parameters.beta.elev.value: 0.2
parameters.beta.elev.fixed: true
"""


def toy_csv(n_locs=8, years=(2015, 2016, 2017), seed=0):
    """Poisson counts at n_locs sites observed every year, with an elevation covariate"""
    rng = np.random.default_rng(seed)
    locs = rng.uniform(size=(n_locs, 2))
    elevation = rng.normal(size=n_locs)
    lines = ['x,y,time,count,elev']
    for year in years:
        counts = rng.poisson(3.0, size=n_locs)
        for (x, y), count, elev in zip(locs, counts, elevation):
            lines.append(f'{format_float(x)},{format_float(y)},{year},{count},{format_float(elev)}')
    return '\n'.join(lines) + '\n'


@cache
def toy_artifact():
    config = parse_config(TOY_CONFIG)
    return run_fit(ingest_csv(io.StringIO(toy_csv()), config), config, threads=1)


class TempDirMixin:

    def setUp(self):
        super().setUp()
        self.tmp = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, self.tmp, ignore_errors=True)

    def path(self, name):
        return os.path.join(self.tmp, name)

    def write(self, name, text):
        with open(self.path(name), 'w', encoding='utf-8') as handle:
            handle.write(text)
        return self.path(name)

    def read(self, name):
        with open(self.path(name), encoding='utf-8') as handle:
            return handle.read()


# ======================== Datasets ========================

class CsvIngestTests(TempDirMixin, SimpleTestCase):

    def setUp(self):
        super().setUp()
        self.config = load_config()

    def test_three_row_file(self):
        path = self.write('toy.csv', 'x,y,time,count\n0,0,1,3\n1,0,1,4\n0,1,2,5\n')
        dataset = ingest(path, self.config)
        self.assertEqual(dataset.n_obs, 3)
        self.assertEqual(dataset.n_times, 2)
        self.assertEqual(dataset.time_labels, (1, 2))
        assert_array_equal(dataset.times, [0, 0, 1])
        assert_array_equal(dataset.y, [3.0, 4.0, 5.0])
        self.assertEqual(dataset.X.shape, (3, 0))

    def test_year_gap_is_inserted_as_unobserved_time(self):
        path = self.write('gap.csv', 'x,y,time,count\n0,0,1994,3\n1,0,1996,4\n')
        with self.assertLogs('fits.datasets', 'WARNING') as logs:
            dataset = ingest(path, self.config)
        self.assertEqual(dataset.time_labels, (1994, 1995, 1996))
        assert_array_equal(dataset.times, [0, 2])
        self.assertIn('1995', '\n'.join(logs.output))

    def test_non_numeric_cell_names_row_and_column(self):
        path = self.write('bad.csv', 'x,y,time,count\n0,0,1,3\n1,0,1,abc\n')
        with self.assertRaisesMessage(DataError, "'abc' in column 'count', row 2"):
            ingest(path, self.config)

    def test_missing_response_rows_are_dropped(self):
        path = self.write('na.csv', 'x,y,time,count\n0,0,1,3\n1,0,1,NA\n0,1,2,\n1,1,2,2\n')
        with self.assertLogs('fits.datasets', 'WARNING') as logs:
            dataset = ingest(path, self.config)
        self.assertEqual(dataset.n_obs, 2)
        self.assertIn('dropped 2 rows', '\n'.join(logs.output))

    def test_missing_coordinate_is_an_error(self):
        path = self.write('nocoord.csv', 'x,y,time,count\n0,,1,3\n')
        with self.assertRaisesMessage(DataError, "missing coordinate in column 'y'"):
            ingest(path, self.config)

    def test_unknown_column(self):
        path = self.write('cols.csv', 'lon,lat,time,count\n0,0,1,3\n')
        with self.assertRaisesMessage(DataError, "column 'x' not found"):
            ingest(path, self.config)

    def test_fractional_time(self):
        path = self.write('frac.csv', 'x,y,time,count\n0,0,1.5,3\n')
        with self.assertRaisesMessage(DataError, 'not an integer'):
            ingest(path, self.config)

    def test_constant_covariate(self):
        config = parse_config('data.covariates: [elev]')
        path = self.write('const.csv', 'x,y,time,count,elev\n0,0,1,3,2\n1,0,1,4,2\n')
        with self.assertRaisesMessage(DataError, "Covariate 'elev' is constant"):
            ingest(path, config)

    def test_configured_column_names(self):
        config = parse_config('data.coords: [lon, lat]\ndata.time: year\ndata.response: cnt')
        path = self.write('birds.csv', 'lon,lat,year,cnt\n10.5,59.9,2001,7\n10.6,59.8,2002,0\n')
        dataset = ingest(path, config)
        self.assertEqual(dataset.coordinate_names, ('lon', 'lat'))
        assert_array_equal(dataset.coords, [[10.5, 59.9], [10.6, 59.8]])

    def test_csv_writer_round_trip(self):
        config = parse_config('data.covariates: [elev]')
        dataset = ingest(self.write('toy.csv', toy_csv()), config)
        dataset_to_csv(self.path('copy.csv'), dataset)
        again = ingest(self.path('copy.csv'), config)
        assert_array_equal(again.coords, dataset.coords)
        assert_array_equal(again.y, dataset.y)
        assert_array_equal(again.X, dataset.X)
        self.assertEqual(again.time_labels, dataset.time_labels)


class GeoJsonIngestTests(TempDirMixin, SimpleTestCase):

    def setUp(self):
        super().setUp()
        self.config = load_config()

    def feature(self, geometry=None, **properties):
        return {
            'type': 'Feature',
            'geometry': geometry or {'type': 'Point', 'coordinates': [0.25, 0.75]},
            'properties': properties,
        }

    def collection(self, *features):
        return self.write('points.geojson', json.dumps({'type': 'FeatureCollection', 'features': list(features)}))

    def test_single_point_feature(self):
        dataset = ingest(self.collection(self.feature(time=2020, count=4)), self.config)
        self.assertEqual(dataset.n_obs, 1)
        assert_array_equal(dataset.coords, [[0.25, 0.75]])
        self.assertEqual(dataset.time_labels, (2020,))

    def test_missing_time_property(self):
        with self.assertRaisesMessage(DataError, "feature 1 has no 'time' property"):
            ingest(self.collection(self.feature(count=4)), self.config)

    def test_non_point_geometry(self):
        line = {'type': 'LineString', 'coordinates': [[0, 0], [1, 1]]}
        with self.assertRaisesMessage(DataError, 'only Point geometries are supported'):
            ingest(self.collection(self.feature(geometry=line, time=1, count=1)), self.config)

    def test_not_a_feature_collection(self):
        path = self.write('list.json', '[1, 2, 3]')
        with self.assertRaisesMessage(DataError, 'not a GeoJSON FeatureCollection'):
            ingest_geojson(path, self.config)

    def test_csv_geojson_round_trip(self):
        config = parse_config('data.covariates: [elev]')
        dataset = ingest(self.write('toy.csv', toy_csv()), config)
        dataset_to_geojson(self.path('toy.geojson'), dataset)
        again = ingest(self.path('toy.geojson'), config)
        assert_array_equal(again.coords, dataset.coords)
        assert_array_equal(again.times, dataset.times)
        assert_array_equal(again.y, dataset.y)
        assert_array_equal(again.X, dataset.X)
        self.assertEqual(again.time_labels, dataset.time_labels)


# ======================== Configuration ========================

class ConfigTests(TempDirMixin, SimpleTestCase):

    def test_defaults(self):
        config = load_config()
        self.assertEqual(config.family, 'poisson')
        self.assertEqual(config.link, 'log')
        self.assertEqual(config.data['coords'], ['x', 'y'])
        self.assertEqual(config.data['response'], 'count')
        self.assertEqual(config.graph['n_parents'], 15)
        self.assertEqual(config.graph['reference'], 'observed')
        self.assertEqual(config.model['nu'], 0.5)
        self.assertEqual(config.prediction['forecast_horizon'], 0)

    def test_dotted_lines(self):
        config = parse_config(TOY_CONFIG)
        self.assertEqual(config.graph['n_parents'], 4)
        self.assertEqual(config.data['covariates'], ['elev'])
        self.assertEqual(config.parameters['beta.elev'], {'value': 0.2, 'fixed': True})
        self.assertEqual(config.parameters['tau'], {'value': 0.6, 'fixed': True})

    def test_nested_sections_are_accepted(self):
        config = parse_config('model:\n  family: gaussian\ngraph:\n  n_parents: 6\n')
        self.assertEqual(config.family, 'gaussian')
        self.assertEqual(config.link, 'identity')
        self.assertEqual(config.graph['n_parents'], 6)

    def test_unknown_key_is_named(self):
        with self.assertRaisesMessage(ConfigError, 'model.famly'):
            parse_config('model.famly: poisson')
        with self.assertRaisesMessage(ConfigError, 'plotting'):
            parse_config('plotting.colour: red')

    def test_link_must_suit_family(self):
        with self.assertRaisesMessage(ConfigError, 'model.link'):
            parse_config('model.family: bernoulli\nmodel.link: log')

    def test_exponential_fixes_nu(self):
        with self.assertRaisesMessage(ConfigError, 'model.nu'):
            parse_config('model.nu: 1.5')
        self.assertEqual(parse_config('model.covariance: matern\nmodel.nu: 1.5').model['nu'], 1.5)

    def test_parameter_of_another_family(self):
        with self.assertRaisesMessage(ConfigError, 'parameters.sd'):
            parse_config('parameters.sd.value: 1.0')
        with self.assertRaisesMessage(ConfigError, 'parameters.beta.elev'):
            parse_config('parameters.beta.elev.value: 1.0')

    def test_command_line_overrides_win(self):
        config = parse_config('model.family: gaussian', overrides=['model.family=negative_binomial',
                                                                  'graph.n_parents=7'])
        self.assertEqual(config.family, 'negative_binomial')
        self.assertEqual(config.link, 'log')
        self.assertEqual(config.graph['n_parents'], 7)

    def test_malformed_override(self):
        with self.assertRaisesMessage(ConfigError, 'is not key=value'):
            parse_config('', overrides=['model.family'])

    def test_not_a_mapping(self):
        with self.assertRaisesMessage(ConfigError, 'one `key: value` per line'):
            parse_config('- a\n- b\n')

    def test_missing_file(self):
        with self.assertRaisesMessage(ConfigError, 'Cannot read configuration'):
            load_config(self.path('absent.cfg'))

    def test_initial_parameters_apply_overrides(self):
        config = parse_config(TOY_CONFIG)
        params = config.initial_parameters(np.array([1.0, 2.0, 5.0]), ('elev',))
        self.assertEqual(params['tau'], 0.6)
        self.assertTrue(params.parameter('tau').fixed)
        self.assertFalse(params.parameter('mu').fixed)
        self.assertEqual(params['beta.elev'], 0.2)

    def test_as_dict_validates_back_to_itself(self):
        config = parse_config(TOY_CONFIG)
        self.assertEqual(validate_config(config.as_dict()).as_dict(), config.as_dict())


# ======================== Artifacts ========================

class ArtifactTests(TempDirMixin, SimpleTestCase):

    def setUp(self):
        super().setUp()
        self.artifact = toy_artifact()

    def test_round_trip_is_exact(self):
        text = dumps_fit_artifact(self.artifact)
        again = loads_fit_artifact(text)
        self.assertEqual(dumps_fit_artifact(again), text)
        assert_array_equal(again.fit.u, self.artifact.fit.u)
        assert_array_equal(again.fit.u_se, self.artifact.fit.u_se)
        self.assertEqual(again.fit.params.as_dict(), self.artifact.fit.params.as_dict())
        self.assertEqual(again.time_labels, (2015, 2016, 2017))

    def test_predict_after_reload_is_bitwise_identical(self):
        write_fit_artifact(self.path('fit.json'), self.artifact)
        again = read_fit_artifact(self.path('fit.json'))
        coords = np.array([[0.5, 0.5], [0.1, 0.9], [0.5, 0.5]])
        labels = [2016, 2017, 2018]
        covariates = np.array([[0.3], [-1.0], [0.3]])
        first = predict_points(self.artifact, coords, labels, covariates, horizon=1)
        second = predict_points(again, coords, labels, covariates, horizon=1)
        for name in ('w', 'w_se', 'linear', 'linear_se', 'response', 'response_se'):
            assert_array_equal(second.layer(name), first.layer(name))

    def test_truncated_file(self):
        text = dumps_fit_artifact(self.artifact)
        with self.assertRaisesMessage(ArtifactError, 'truncated'):
            loads_fit_artifact(text[:len(text) // 2])

    def test_version_mismatch(self):
        document = artifact_to_dict(self.artifact)
        document['version'] = 2
        with self.assertRaisesMessage(ArtifactError, 'version 2 is not supported'):
            loads_fit_artifact(json.dumps(document))

    def test_not_an_artifact(self):
        with self.assertRaisesMessage(ArtifactError, 'Not a fit artifact'):
            loads_fit_artifact('{"format": "something-else"}')

    def test_tampered_graph(self):
        document = artifact_to_dict(self.artifact)
        parents = document['graph']['persistent_parents']
        parents[-1] = list(reversed(parents[-1])) if len(parents[-1]) > 1 else [0]
        with self.assertRaisesMessage(ArtifactError, 'stored graph'):
            loads_fit_artifact(json.dumps(document))

    def test_missing_section(self):
        document = artifact_to_dict(self.artifact)
        del document['u']
        with self.assertRaisesMessage(ArtifactError, 'incomplete'):
            loads_fit_artifact(json.dumps(document))


# ======================== Output Files ========================

class WriterTests(TempDirMixin, SimpleTestCase):

    def setUp(self):
        super().setUp()
        self.artifact = toy_artifact()

    def rows(self, name):
        with open(self.path(name), encoding='utf-8', newline='') as handle:
            return list(csv.DictReader(handle))

    def test_parameter_table_reads_back_exactly(self):
        fit = self.artifact.fit
        write_parameter_table(self.path('parameters.csv'), fit)
        self.assertTrue(self.read('parameters.csv').startswith('group,name,par,se,fixed\n'))
        rows = self.rows('parameters.csv')
        table = fit.parameter_table()
        self.assertEqual(len(rows), len(table))
        for row, (group, name, par, se, fixed) in zip(rows, table):
            self.assertEqual((row['group'], row['name']), (group, name))
            self.assertEqual(float(row['par']), par)
            self.assertEqual(row['fixed'], 'TRUE' if fixed else 'FALSE')
        groups = {row['group'] for row in rows}
        self.assertEqual(groups, {'spatial', 'time', 'fixed_effects'})

    def test_random_effects_cover_every_effect(self):
        fit = self.artifact.fit
        write_random_effects(self.path('effects.csv'), fit, self.artifact.time_labels)
        rows = self.rows('effects.csv')
        self.assertEqual(len(rows), fit.model.n_effects)
        self.assertEqual([r['kind'] for r in rows[:3]], ['time'] * 3)
        self.assertEqual([r['t'] for r in rows[:3]], ['2015', '2016', '2017'])
        assert_array_equal([float(r['w']) for r in rows], fit.u)

    def test_dot_file(self):
        model = self.artifact.model
        summary = write_dot(self.path('graph.dot'), model)
        text = self.read('graph.dot')
        self.assertTrue(text.startswith('digraph persistent {'))
        self.assertEqual(text.count(' -> '), model.dag.n_edges)
        self.assertGreater(summary.mean_edge_distance, 0.0)


# ======================== Management Commands ========================

class CommandTests(TempDirMixin, SimpleTestCase):

    def setUp(self):
        super().setUp()
        self.data = self.write('toy.csv', toy_csv())
        self.config = self.write('toy.cfg', TOY_CONFIG)

    def run_command(self, *args):
        out = io.StringIO()
        call_command(*args, stdout=out, stderr=io.StringIO())
        return out.getvalue()

    def fit(self, out_dir='out', *extra):
        return self.run_command('fit', self.data, '--config', self.config, '--out-dir', self.path(out_dir),
                                '--threads', '2', *extra)

    def artifact_path(self):
        write_fit_artifact(self.path('fit.json'), toy_artifact())
        return self.path('fit.json')

    def assertExitCode(self, code, *args):
        with self.assertRaises(CommandError) as caught:
            self.run_command(*args)
        self.assertEqual(caught.exception.returncode, code)
        return caught.exception

    def test_fit_writes_artifact_and_tables(self):
        output = self.fit()
        self.assertIn('Convergence: relative convergence', output)
        for name in ('fit.json', 'fit_parameters.csv', 'fit_effects.csv'):
            self.assertTrue(os.path.exists(self.path(os.path.join('out', name))))
        self.assertIn('ar1', output)

    def test_fit_outputs_are_byte_identical_across_runs(self):
        self.fit('first')
        self.fit('second')
        for name in ('fit.json', 'fit_parameters.csv', 'fit_effects.csv'):
            self.assertEqual(self.read(os.path.join('first', name)), self.read(os.path.join('second', name)))

    def test_fit_not_converged_still_writes_and_exits_3(self):
        artifact = toy_artifact()
        stalled = replace(artifact, fit=replace(artifact.fit, converged=False, message='iteration limit'))
        with mock.patch('fits.management.commands.fit.run_fit', return_value=stalled):
            error = self.assertExitCode(3, 'fit', self.data, '--config', self.config, '--out-dir', self.path('out'))
        self.assertIn('iteration limit', str(error))
        self.assertTrue(os.path.exists(self.path(os.path.join('out', 'fit.json'))))

    def test_fit_data_errors_exit_2(self):
        self.assertExitCode(2, 'fit', self.path('absent.csv'), '--config', self.config)
        self.assertExitCode(2, 'fit', self.data, '--set', 'model.famly=poisson')
        bad = self.write('bad.csv', 'x,y,time,count\n0,0,1,many\n')
        self.assertExitCode(2, 'fit', bad)

    def test_usage_errors_exit_1(self):
        artifact = self.artifact_path()
        self.assertExitCode(1, 'predict', artifact)
        self.assertExitCode(1, 'predict', artifact, '--bounds', '0', '0', '1', '1', '--cellsize', '0.5')
        self.assertExitCode(1, 'fit', self.data, '--threads', '0')
        self.assertExitCode(1, 'simulate', artifact, '--n-sim', '0')
        self.assertExitCode(1, 'simulate', artifact, '--family-param', 'overdispersion=0.5')

    def test_predict_points(self):
        artifact = self.artifact_path()
        points = self.write('points.csv', 'x,y,time,elev\n0.5,0.5,2016,0.3\n0.2,0.8,2018,-0.4\n')
        self.run_command('predict', artifact, '--points', points, '--horizon', '1', '--out', self.path('pred.csv'))
        lines = self.read('pred.csv').splitlines()
        self.assertEqual(lines[0], 'x,y,t,w,w_se,linear,linear_se,response,response_se')
        self.assertEqual(len(lines), 3)
        self.assertEqual([line.split(',')[2] for line in lines[1:]], ['2016', '2018'])

    def test_predict_past_the_horizon_exits_2(self):
        artifact = self.artifact_path()
        points = self.write('points.csv', 'x,y,time,elev\n0.5,0.5,2019,0.3\n')
        self.assertExitCode(2, 'predict', artifact, '--points', points, '--horizon', '1')

    def test_predict_grid_needs_a_covariate_free_model(self):
        artifact = self.artifact_path()
        self.assertExitCode(2, 'predict', artifact, '--bounds', '0', '0', '1', '1', '--cellsize', '0.5',
                            '--times', '2016', '--out', self.path('grids'))

    def test_predict_grid_writes_every_layer(self):
        self.run_command('fit', self.data, '--set', 'model.family=gaussian', '--set', 'graph.n_parents=4',
                         '--set', 'parameters.tau.fixed=true', '--set', 'parameters.phi.fixed=true',
                         '--set', 'parameters.sigma.fixed=true', '--out-dir', self.path('gauss'))
        self.run_command('predict', self.path(os.path.join('gauss', 'fit.json')),
                         '--bounds', '0', '0', '1', '1', '--cellsize', '0.5', '--times', '2015', '2016',
                         '--out', self.path('grids'))
        names = sorted(os.listdir(self.path('grids')))
        self.assertEqual(len(names), 12)
        self.assertIn('response_2016.asc', names)

    def test_simulate(self):
        artifact = self.artifact_path()
        self.run_command('simulate', artifact, '--n-sim', '3', '--seed', '4', '--out', self.path('sims.csv'),
                         '--export-dir', self.path('datasets'))
        lines = self.read('sims.csv').splitlines()
        self.assertEqual(lines[0], 'row,sim_1,sim_2,sim_3')
        self.assertEqual(len(lines), toy_artifact().dataset.n_obs + 1)
        self.assertEqual(len(os.listdir(self.path('datasets'))), 3)

        self.run_command('simulate', artifact, '--n-sim', '3', '--seed', '4', '--out', self.path('again.csv'))
        self.assertEqual(self.read('again.csv'), self.read('sims.csv'))

    def test_simulate_with_another_family(self):
        artifact = self.artifact_path()
        self.run_command('simulate', artifact, '--family', 'negative_binomial',
                         '--family-param', 'overdispersion=0.5', '--out', self.path('nb.csv'))
        self.assertTrue(self.read('nb.csv').startswith('row,sim_1\n'))

    def test_residuals(self):
        artifact = self.artifact_path()
        output = self.run_command('residuals', artifact, '--n-sim', '50', '--seed', '2',
                                  '--out', self.path('pit.csv'))
        self.assertIn('KS statistic:', output)
        self.assertIn('p-value:', output)
        self.assertRegex(output, r'dispersion: (over|under|none)')
        lines = self.read('pit.csv').splitlines()
        self.assertEqual(lines[0], 'row,observed,pit')
        pit = np.array([float(line.split(',')[2]) for line in lines[1:]])
        self.assertTrue(np.all((pit >= 0.0) & (pit <= 1.0)))

    def test_residuals_need_enough_simulations(self):
        self.assertExitCode(2, 'residuals', self.artifact_path(), '--n-sim', '10', '--out', self.path('pit.csv'))

    def test_corrupt_artifact_exits_2(self):
        path = self.write('broken.json', '{"format": "stnngp-fit", "vers')
        self.assertExitCode(2, 'simulate', path)

    def test_graph(self):
        output = self.run_command('graph', self.data, '--config', self.config, '--out', self.path('g.dot'))
        self.assertIn('nodes: 8', output)
        self.assertIn('mean edge distance:', output)
        self.assertTrue(self.read('g.dot').startswith('digraph'))

    def test_graph_with_reference_file(self):
        refs = self.write('refs.csv', 'x,y\n0,0\n1,0\n0,1\n1,1\n0.5,0.5\n')
        output = self.run_command('graph', self.data, '--config', self.config, '--set', f'graph.reference={refs}',
                                  '--out', self.path('g.dot'))
        self.assertIn('nodes: 5', output)


# ======================== REST API ========================

@override_settings(MEDIA_ROOT=tempfile.gettempdir())
class FitRunApiTests(TestCase):

    def setUp(self):
        User = get_user_model()
        self.user = User.objects.create_user('analyst', password='not-a-secret')
        self.other = User.objects.create_user('colleague', password='not-a-secret')
        self.client = APIClient()
        self.client.force_authenticate(self.user)

    def stored_run(self, owner=None, **fields):
        artifact = toy_artifact()
        values = dict(
            name='Toy counts',
            owner=owner or self.user,
            dataset='Datasets/toy.csv',
            family='poisson',
            link='log',
            status='converged',
            message=artifact.fit.message,
            nll=artifact.fit.nll,
            n_obs=artifact.dataset.n_obs,
            n_times=artifact.dataset.n_times,
            n_refs=len(artifact.model.refs),
            config=artifact.config.as_dict(),
            artifact=dumps_fit_artifact(artifact),
        )
        values.update(fields)
        return FitRun.objects.create(**values)

    def url(self, run=None, action=None):
        url = '/api/fits/runs/'
        if run is not None:
            url += f'{run.pk}/'
        if action:
            url += f'{action}/'
        return url

    def test_authentication_required(self):
        self.client.force_authenticate(None)
        self.assertEqual(self.client.get(self.url()).status_code, 401)

    def test_create_fits_the_uploaded_dataset(self):
        upload = SimpleUploadedFile('toy.csv', toy_csv().encode(), content_type='text/csv')
        config = json.dumps({
            'model.family': 'poisson', 'graph.n_parents': 4, 'data.covariates': ['elev'],
            'parameters': {'tau': {'fixed': True}, 'phi': {'fixed': True}, 'sigma': {'fixed': True}},
        })
        response = self.client.post(self.url(), {'name': 'Toy counts', 'dataset': upload, 'config': config},
                                    format='multipart')
        self.assertEqual(response.status_code, 201, response.data)
        data = response.data['data']
        self.assertEqual(data['status'], 'converged')
        self.assertEqual(data['n_obs'], 24)
        self.assertEqual(data['n_times'], 3)
        self.assertEqual(data['owner_name'], 'analyst')
        self.assertIn('beta.elev', {row['name'] for row in data['parameters']})
        run = FitRun.objects.get(pk=data['id'])
        self.assertEqual(run.load_artifact().time_labels, (2015, 2016, 2017))
        run.dataset.delete(save=False)

    def test_create_rejects_bad_config(self):
        upload = SimpleUploadedFile('toy.csv', toy_csv().encode(), content_type='text/csv')
        response = self.client.post(self.url(), {'name': 'Toy', 'dataset': upload,
                                                 'config': json.dumps({'model.famly': 'poisson'})},
                                    format='multipart')
        self.assertEqual(response.status_code, 400)
        self.assertIn('model.famly', response.data['errors']['detail'][0])
        self.assertFalse(FitRun.objects.exists())

    def test_create_rejects_other_file_types(self):
        upload = SimpleUploadedFile('toy.xlsx', b'PK', content_type='application/octet-stream')
        response = self.client.post(self.url(), {'name': 'Toy', 'dataset': upload}, format='multipart')
        self.assertEqual(response.status_code, 400)
        self.assertIn('dataset', response.data['errors'])

    def test_list_shows_own_runs_only(self):
        self.stored_run()
        self.stored_run(owner=self.other, name='Not mine')
        response = self.client.get(self.url())
        self.assertEqual(response.status_code, 200)
        self.assertEqual(response.data['count'], 1)
        self.assertEqual(response.data['results'][0]['name'], 'Toy counts')

    def test_staff_see_every_run(self):
        self.stored_run()
        self.stored_run(owner=self.other, name='Not mine')
        self.user.is_staff = True
        self.user.save()
        self.assertEqual(self.client.get(self.url()).data['count'], 2)

    def test_filter_and_search(self):
        self.stored_run()
        self.stored_run(name='Stalled', status='not_converged', message='iteration limit')
        self.assertEqual(self.client.get(self.url(), {'status': 'not_converged'}).data['count'], 1)
        self.assertEqual(self.client.get(self.url(), {'search': 'stalled'}).data['count'], 1)
        self.assertEqual(self.client.get(self.url(), {'family': 'gaussian'}).data['count'], 0)

    def test_other_users_run_is_not_found(self):
        run = self.stored_run(owner=self.other)
        self.assertEqual(self.client.get(self.url(run)).status_code, 404)
        self.assertEqual(self.client.post(self.url(run, 'simulate'), {}).status_code, 404)

    def test_retrieve_and_parameters(self):
        run = self.stored_run()
        detail = self.client.get(self.url(run)).data['data']
        self.assertEqual(detail['slug'], 'toy-counts')
        response = self.client.get(self.url(run, 'parameters'))
        self.assertEqual(response.status_code, 200)
        self.assertEqual(response.data['data'], detail['parameters'])

    def test_updates_are_not_allowed(self):
        run = self.stored_run()
        self.assertEqual(self.client.patch(self.url(run), {'name': 'Renamed'}).status_code, 405)

    def test_delete(self):
        run = self.stored_run()
        self.assertEqual(self.client.delete(self.url(run)).status_code, 200)
        self.assertFalse(FitRun.objects.exists())

    def test_predict(self):
        run = self.stored_run()
        body = {'points': [
            {'coords': [0.5, 0.5], 'time': 2016, 'covariates': {'elev': 0.3}},
            {'coords': [0.2, 0.8], 'time': 2018, 'covariates': {'elev': -0.4}},
        ], 'forecast_horizon': 1}
        response = self.client.post(self.url(run, 'predict'), body, format='json')
        self.assertEqual(response.status_code, 200, response.data)
        rows = response.data['data']
        self.assertEqual([row['time'] for row in rows], [2016, 2018])
        self.assertTrue(all(row['response'] > 0 for row in rows))

        expected = predict_points(toy_artifact(), np.array([[0.5, 0.5], [0.2, 0.8]]), [2016, 2018],
                                  np.array([[0.3], [-0.4]]), horizon=1)
        self.assertEqual([row['w'] for row in rows], expected.w.tolist())

    def test_predict_validation(self):
        run = self.stored_run()
        wrong_dim = {'points': [{'coords': [0.5], 'time': 2016, 'covariates': {'elev': 0.0}}]}
        self.assertEqual(self.client.post(self.url(run, 'predict'), wrong_dim, format='json').status_code, 400)
        no_covariate = {'points': [{'coords': [0.5, 0.5], 'time': 2016}]}
        response = self.client.post(self.url(run, 'predict'), no_covariate, format='json')
        self.assertEqual(response.status_code, 400)
        self.assertIn('elev', response.data['errors']['points'][0])
        past_horizon = {'points': [{'coords': [0.5, 0.5], 'time': 2019, 'covariates': {'elev': 0.0}}]}
        self.assertEqual(self.client.post(self.url(run, 'predict'), past_horizon, format='json').status_code, 400)

    def test_simulate(self):
        run = self.stored_run()
        response = self.client.post(self.url(run, 'simulate'), {'n_sim': 2, 'seed': 5}, format='json')
        self.assertEqual(response.status_code, 200)
        data = response.data['data']
        self.assertEqual(len(data['y']), 2)
        self.assertEqual(len(data['y'][0]), toy_artifact().dataset.n_obs)
        again = self.client.post(self.url(run, 'simulate'), {'n_sim': 2, 'seed': 5}, format='json')
        self.assertEqual(again.data['data']['y'], data['y'])

    def test_residuals(self):
        run = self.stored_run()
        response = self.client.post(self.url(run, 'residuals'), {'n_sim': 50, 'seed': 1}, format='json')
        self.assertEqual(response.status_code, 200)
        data = response.data['data']
        self.assertEqual(len(data['pit']), toy_artifact().dataset.n_obs)
        self.assertIn(data['direction'], ('over', 'under', 'none'))
        too_few = self.client.post(self.url(run, 'residuals'), {'n_sim': 10}, format='json')
        self.assertEqual(too_few.status_code, 400)

    def test_graph(self):
        run = self.stored_run()
        data = self.client.get(self.url(run, 'graph')).data['data']
        self.assertEqual(data['nodes'], 8)
        self.assertTrue(data['dot'].startswith('digraph'))
        self.assertGreater(data['mean_edge_distance'], 0.0)
