import filecmp
import math
import os
import shutil
import sys
import tempfile
import unittest

import numpy as np
import pandas as pd

# Add the repository root and src to the path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from config.config import RunConfig
from dataset_service import DatasetService
from evaluation_service import (EvaluationService, best_alpha, report, summarize, summary_markdown, sweep_points,
                                system_label, trend_checks)
from records.models import METRIC_COLUMNS, MetricRow, read_metrics_csv, write_metrics_csv
from training_service import Checkpoint, tdcn_config
from utils.errors import CheckpointError, ConfigError, ReportError
from utils.optimizer import OptimizerState
from utils.tdcn import TdcnModel


def metric_rows():
    rows = []
    for sample in ('eval_00000', 'eval_00001'):
        rows.append(MetricRow(sample, 'mixture', sdr_bf=-3.0, permutation='1-2-3', t60=0.2, sir=0.0,
                              output_sir=-2.0))
        rows.append(MetricRow(sample, 'rm3', sdr_bf=7.0, permutation='1-2-3', t60=0.2, sir=0.0, output_sir=9.0))
        for alpha, vm, bf in ((1.0, 10.0, 5.0), (0.0, -14.0, 6.0), (0.3, 11.0, 6.5)):
            rows.append(MetricRow(sample, 'vm', alpha=alpha, sdr_vm=vm, sdr_bf=bf, permutation='1-2-3',
                                  t60=0.2, sir=0.0, output_sir=8.0))
    return rows


class TestReports(unittest.TestCase):
    def setUp(self):
        """A metrics CSV with baselines and three alphas."""
        self.tmp = tempfile.mkdtemp()
        self.csv = os.path.join(self.tmp, 'metrics.csv')
        write_metrics_csv(self.csv, metric_rows())

    def tearDown(self):
        """Remove the temporary directory."""
        shutil.rmtree(self.tmp)

    def test_summary_order_and_means(self):
        summary = summarize(read_metrics_csv(self.csv))
        self.assertEqual(list(summary['label']), ['Mixture', 'RM-BF (3ch)', 'VM-BF (L_BF)', 'VM-BF (L_MTL)',
                                                  'VM-BF (L_VM)'])
        self.assertEqual(list(summary['count']), [2] * 5)
        vm = summary[summary['system'] == 'vm']
        self.assertEqual(list(vm['alpha']), [0.0, 0.3, 1.0])
        self.assertAlmostEqual(vm['sdr_bf'].iloc[1], 6.5)
        self.assertTrue(math.isnan(summary['sdr_vm'].iloc[0]))

    def test_best_alpha(self):
        summary = summarize(read_metrics_csv(self.csv))
        self.assertEqual(best_alpha(summary), {'sdr_vm': 0.3, 'sdr_bf': 0.3})
        markdown = summary_markdown(summary)
        self.assertIn('| VM-BF (L_MTL) | 0.3 | 11.00 | 6.50 |', markdown)
        self.assertIn('Best alpha by SDR_BF: 0.3', markdown)

    def test_report_files_and_deterministic_plots(self):
        first = report([self.csv], os.path.join(self.tmp, 'a'))
        second = report([self.csv], os.path.join(self.tmp, 'b'))
        for key in ('summary_csv', 'summary_md', 'sdr_vm_plot', 'sdr_bf_plot'):
            self.assertTrue(os.path.isfile(first[key]), msg=key)
            self.assertTrue(filecmp.cmp(first[key], second[key], shallow=False), msg=key)
        self.assertTrue(first['sdr_vm_plot'].endswith('sdr_vm_vs_alpha.png'))

    def test_empty_metrics(self):
        empty = os.path.join(self.tmp, 'empty.csv')
        pd.DataFrame(columns=METRIC_COLUMNS).to_csv(empty, index=False)
        with self.assertRaises(ReportError):
            report([empty], os.path.join(self.tmp, 'out'))

    def test_system_labels(self):
        self.assertEqual(system_label('rm2'), 'RM-BF (2ch)')
        self.assertEqual(system_label('vm-copy'), 'VM-BF (copy)')
        self.assertEqual(system_label('vm', 0.7), 'VM-BF (L_MTL)')

    def test_trend_checks(self):
        summary = summarize(read_metrics_csv(self.csv))
        checks = trend_checks(summary)
        self.assertEqual([item['passed'] for item in checks], [None, True, True, True, True])
        self.assertEqual(checks[1]['values'], (7.0, 6.5))
        self.assertEqual(checks[2]['values'], (10.0, -14.0))

    def test_trend_checks_failures(self):
        rows = metric_rows()
        rows.append(MetricRow('eval_00000', 'rm2', sdr_bf=6.0, permutation='1-2-3', t60=0.2, sir=0.0,
                              output_sir=7.0))
        for row in rows:
            if row.system == 'vm' and row.alpha == 0.0:
                row.sdr_vm = 5.0
        csv = os.path.join(self.tmp, 'failing.csv')
        write_metrics_csv(csv, rows)
        checks = trend_checks(summarize(read_metrics_csv(csv)))
        self.assertFalse(checks[0]['passed'])
        self.assertFalse(checks[2]['passed'])
        self.assertTrue(checks[1]['passed'])

    def test_summary_lists_trend_checks(self):
        markdown = summary_markdown(summarize(read_metrics_csv(self.csv)))
        self.assertIn('## Trend checks', markdown)
        self.assertIn('- [skipped] VM-BF (best alpha) SDR_BF >= RM-BF (2ch) + 1 dB: 6.50 vs -', markdown)
        self.assertIn('- [pass] SDR_VM(alpha=1) - SDR_VM(alpha=0) >= 10 dB: 10.00 vs -14.00', markdown)

    def test_seven_alpha_sweep(self):
        alphas = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0)
        rows = [MetricRow('eval_00000', 'rm2', sdr_bf=4.0, permutation='1-2-3', t60=0.2, sir=0.0, output_sir=5.0)]
        for i, alpha in enumerate(alphas):
            rows.append(MetricRow('eval_00000', 'vm', alpha=alpha, sdr_vm=float(i), sdr_bf=5.0 + 0.1 * i,
                                  permutation='1-2-3', t60=0.2, sir=0.0, output_sir=8.0))
        csv = os.path.join(self.tmp, 'sweep.csv')
        write_metrics_csv(csv, rows)
        paths = report([csv], os.path.join(self.tmp, 'sweep'))
        summary = pd.read_csv(paths['summary_csv'])
        points, scores = sweep_points(summary, 'sdr_bf')
        self.assertEqual(points, list(alphas))
        self.assertEqual(len(scores), 7)
        self.assertTrue(os.path.isfile(paths['sdr_bf_plot']))


class TestEvaluationService(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.data_dir = tempfile.mkdtemp()
        cls.run_config = RunConfig.from_preset('testing')
        DatasetService(cls.run_config).generate(cls.data_dir, ['eval'])

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.data_dir)

    def setUp(self):
        """Untrained checkpoints for a separator and two VMEs."""
        self.out = tempfile.mkdtemp()
        model_cfg = self.run_config.model
        self.separator = Checkpoint('separator', TdcnModel(tdcn_config(model_cfg, 'separator', 3), seed=1),
                                    OptimizerState()).save(os.path.join(self.out, 'separator.npz'))
        self.vmes = []
        for alpha in (1.0, 0.0):
            path = os.path.join(self.out, f'vme-{alpha}.npz')
            Checkpoint('vme', TdcnModel(tdcn_config(model_cfg, 'vme', 3), seed=2), OptimizerState(),
                       {'alpha': alpha}).save(path)
            self.vmes.append(path)

    def tearDown(self):
        """Remove the output directory."""
        shutil.rmtree(self.out)

    def test_oracle_evaluation(self):
        service = EvaluationService(self.run_config, self.data_dir, vme_paths=self.vmes, mask_source='oracle')
        summary = service.evaluate(os.path.join(self.out, 'results'))
        frame = read_metrics_csv(os.path.join(self.out, 'results', 'metrics.csv'))
        self.assertEqual(len(frame), 2 * 6)
        self.assertEqual(list(frame['system'][:6]), ['mixture', 'rm2', 'rm3', 'vm-copy', 'vm', 'vm'])
        self.assertEqual(list(frame['alpha'][4:6]), [0.0, 1.0])
        self.assertTrue(np.all(np.isfinite(frame['sdr_bf'])))
        self.assertTrue(np.all(frame['sdr_vm'][frame['system'] == 'vm'].notna()))
        self.assertEqual(len(summary), 6)
        self.assertTrue(os.path.isfile(os.path.join(self.out, 'results', 'summary.md')))

    def test_evaluation_is_deterministic(self):
        for name in ('a', 'b'):
            EvaluationService(self.run_config, self.data_dir, separator_path=self.separator,
                              systems=['mixture', 'rm3']).evaluate(os.path.join(self.out, name))
        self.assertTrue(filecmp.cmp(os.path.join(self.out, 'a', 'metrics.csv'),
                                    os.path.join(self.out, 'b', 'metrics.csv'), shallow=False))

    def test_mask_source_resolution(self):
        self.assertEqual(EvaluationService(self.run_config, self.data_dir, systems=['rm3']).mask_source, 'oracle')
        service = EvaluationService(self.run_config, self.data_dir, separator_path=self.separator, systems=['rm3'])
        self.assertEqual(service.mask_source, 'separator')

    def test_missing_checkpoints(self):
        with self.assertRaises(CheckpointError):
            EvaluationService(self.run_config, self.data_dir, systems=['rm2'], mask_source='separator')
        with self.assertRaises(CheckpointError):
            EvaluationService(self.run_config, self.data_dir, systems=['vm'], mask_source='oracle')
        # the mixture baseline needs no masks
        EvaluationService(self.run_config, self.data_dir, systems=['mixture'], mask_source='separator')

    def test_unknown_system(self):
        with self.assertRaises(ConfigError):
            EvaluationService(self.run_config, self.data_dir, systems=['rm4'])

    def test_dump_weights(self):
        service = EvaluationService(self.run_config, self.data_dir, vme_paths=self.vmes, systems=['vm'],
                                    mask_source='oracle')
        path = service.dump_first_weights(os.path.join(self.out, 'weights.json'))
        self.assertTrue(os.path.isfile(path))


if __name__ == '__main__':
    unittest.main()
