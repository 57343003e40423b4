import json

import numpy as np

from etc.helper_functions import format_float, json_float
from fits.management.base import StnngpCommand
from prediction.scenarios import (
    DISPERSION_CASES, GAUSSIAN_SCENARIOS, POISSON_SCENARIOS,
    coverage_summary, dispersion_study, gaussian_truth, poisson_truth, recovery_study, tau_scaling_study,
)

STUDIES = ('tau-scaling', 'gaussian', 'poisson', 'dispersion')


class Command(StnngpCommand):
    help = 'Run the unit-square simulation studies and summarise them'

    def add_command_arguments(self, parser):
        parser.add_argument('study', choices=STUDIES)
        parser.add_argument('--scenario', action='append', default=[],
                            help='Recovery scenario to run (default: all of the study)')
        parser.add_argument('--replicates', type=int, default=20, help='Replicates per scenario or family')
        parser.add_argument('--seed', type=int, default=0, help='Root seed')
        parser.add_argument('--n-parents', type=int, default=15)
        parser.add_argument('--out', default=None, help='JSON summary file')
        parser.add_argument('--progress', action='store_true', help='Show a progress bar')

    def handle_command(self, study, scenario, replicates, seed, n_parents, out, progress, threads, **options):
        if replicates < 1:
            raise self.usage("--replicates must be at least 1.")
        if n_parents < 1:
            raise self.usage("--n-parents must be at least 1.")

        if study == 'tau-scaling':
            summary = self.tau_scaling(seed, n_parents)
        elif study == 'dispersion':
            summary = self.dispersion(replicates, seed, n_parents, progress, threads)
        else:
            summary = self.recovery(study, scenario, replicates, seed, n_parents, progress, threads)

        if out:
            with open(out, 'w', encoding='utf-8', newline='\n') as handle:
                json.dump(summary, handle, indent=2, sort_keys=True)
                handle.write('\n')
            self.stdout.write(f"Summary -> {out}")

    # ======================== Studies ========================

    def tau_scaling(self, seed, n_parents):
        result = tau_scaling_study(seed=seed, n_parents=n_parents)
        ratios = result.se_ratios()
        self.stdout.write(f"max relative mean difference: {format_float(result.max_mean_difference())}")
        for tau, row in zip(result.taus, ratios):
            self.stdout.write(f"tau {format_float(tau)}: se ratio {format_float(float(np.median(row)))} (median)")
        return {
            'taus': [float(t) for t in result.taus],
            'max_mean_difference': json_float(result.max_mean_difference()),
            'median_se_ratio': [json_float(float(np.median(row))) for row in ratios],
        }

    def recovery(self, study, names, replicates, seed, n_parents, progress, threads):
        scenarios, truth_of, family, link = {
            'gaussian': (GAUSSIAN_SCENARIOS, gaussian_truth, 'gaussian', 'identity'),
            'poisson': (POISSON_SCENARIOS, poisson_truth, 'poisson', 'log'),
        }[study]
        unknown = [name for name in names if name not in scenarios]
        if unknown:
            raise self.usage(f"Unknown {study} scenario {', '.join(unknown)}; "
                             f"choose from {', '.join(scenarios)}.")

        summary = {}
        for name in names or list(scenarios):
            outcomes = recovery_study(truth_of(**scenarios[name]), family, link, replicates=replicates,
                                      seed=seed, progress=progress, n_parents=n_parents, threads=threads)
            result = coverage_summary(outcomes)
            wald = ', '.join(f"{k} {v}/{result['replicates']}" for k, v in result['wald'].items())
            self.stdout.write(
                f"{name}: converged {result['converged']}/{result['replicates']}; Wald {wald}; "
                f"prediction coverage {format_float(result['fitted_coverage'])} fitted, "
                f"{format_float(result['forecast_coverage'])} forecast"
            )
            result['fitted_coverage'] = json_float(result['fitted_coverage'])
            result['forecast_coverage'] = json_float(result['forecast_coverage'])
            summary[name] = result
        return summary

    def dispersion(self, replicates, seed, n_parents, progress, threads):
        outcomes = dispersion_study(seeds=range(seed, seed + replicates), progress=progress,
                                    n_parents=n_parents, threads=threads)
        summary = {}
        for family in DISPERSION_CASES:
            rows = [o for o in outcomes if o.generating_family == family]
            rejected = sum(o.pvalue < 0.01 for o in rows)
            matched = sum(o.direction == o.expected for o in rows)
            self.stdout.write(f"{family}: KS rejected {rejected}/{len(rows)}, "
                              f"pattern '{DISPERSION_CASES[family][1]}' {matched}/{len(rows)}")
            summary[family] = {'replicates': len(rows), 'rejected': rejected, 'matched': matched}
        return summary
