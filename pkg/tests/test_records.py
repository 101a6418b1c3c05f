import math
import os
import shutil
import sys
import tempfile
import unittest

# Add the repository root to the path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from records.models import (METRIC_COLUMNS, EventLog, EventType, MetricRow, SampleRecord, format_permutation,
                            read_manifest, read_metrics_csv, write_manifest, write_metrics_csv)
from utils.errors import DatasetError, ReportError


def make_record(index):
    return SampleRecord(sample_id=f'eval_{index:05d}', split='eval', seed=1000 + index,
                        files={'mixture': f'wav/eval_{index:05d}_mixture.wav'},
                        scene={'room': {'t60': 0.2}, 'sir_db': [1.0, -1.0]},
                        num_sources=3, length=2000, sample_rate=8000)


class TestManifest(unittest.TestCase):
    def setUp(self):
        """Temporary directory for manifests."""
        self.tmp = tempfile.mkdtemp()
        self.path = os.path.join(self.tmp, 'manifest.jsonl')

    def tearDown(self):
        """Remove the temporary directory."""
        shutil.rmtree(self.tmp)

    def test_round_trip(self):
        records = [make_record(i) for i in range(3)]
        write_manifest(self.path, records)
        restored = read_manifest(self.path)
        self.assertEqual([r.to_dict() for r in restored], [r.to_dict() for r in records])
        self.assertEqual(restored[1].path('/data', 'mixture'), '/data/wav/eval_00001_mixture.wav')

    def test_missing_role(self):
        with self.assertRaises(DatasetError):
            make_record(0).path('/data', 'x1')

    def test_missing_manifest(self):
        with self.assertRaises(DatasetError):
            read_manifest(self.path)

    def test_invalid_line(self):
        with open(self.path, 'w') as handle:
            handle.write('{"sample_id": \n')
        with self.assertRaises(DatasetError):
            read_manifest(self.path)

    def test_malformed_entry(self):
        with open(self.path, 'w') as handle:
            handle.write('{"sample_id": "x"}\n')
        with self.assertRaises(DatasetError):
            read_manifest(self.path)

    def test_empty_manifest(self):
        open(self.path, 'w').close()
        with self.assertRaises(DatasetError):
            read_manifest(self.path)


class TestEventLog(unittest.TestCase):
    def setUp(self):
        """Event log in a temporary directory."""
        self.tmp = tempfile.mkdtemp()
        self.log = EventLog(os.path.join(self.tmp, 'events.jsonl'))

    def tearDown(self):
        """Remove the temporary directory."""
        shutil.rmtree(self.tmp)

    def test_log_and_filter(self):
        self.assertEqual(self.log.read(), [])
        self.log.log(EventType.INIT, epoch=0, dev_pit=1.5)
        self.log.log('epoch', epoch=1, train_pit=0.5)
        self.log.log(EventType.EPOCH, epoch=2, train_pit=0.25)
        events = self.log.read()
        self.assertEqual([e['event'] for e in events], ['init', 'epoch', 'epoch'])
        self.assertEqual([e['epoch'] for e in self.log.read(EventType.EPOCH)], [1, 2])
        self.assertIn('timestamp', events[0])

    def test_unknown_event(self):
        with self.assertRaises(ValueError):
            self.log.log('restart')


class TestMetricsCsv(unittest.TestCase):
    def setUp(self):
        """Temporary directory for metric files."""
        self.tmp = tempfile.mkdtemp()
        self.path = os.path.join(self.tmp, 'metrics.csv')

    def tearDown(self):
        """Remove the temporary directory."""
        shutil.rmtree(self.tmp)

    def test_round_trip(self):
        rows = [MetricRow('eval_00000', 'rm3', sdr_bf=5.25, permutation=format_permutation((1, 0, 2)),
                          t60=0.2, sir=0.5, output_sir=9.0),
                MetricRow('eval_00000', 'vm', alpha=0.3, sdr_vm=10.5, sdr_bf=6.125,
                          permutation='1-2-3', t60=0.2, sir=0.5, output_sir=8.0)]
        write_metrics_csv(self.path, rows)
        frame = read_metrics_csv(self.path)
        self.assertEqual(list(frame.columns), METRIC_COLUMNS)
        self.assertEqual(len(frame), 2)
        self.assertTrue(math.isnan(frame['alpha'][0]))
        self.assertEqual(frame['permutation'][0], '2-1-3')
        self.assertAlmostEqual(frame['sdr_vm'][1], 10.5)

    def test_concatenates_files(self):
        write_metrics_csv(self.path, [MetricRow('a', 'mixture', sdr_bf=-3.0)])
        other = os.path.join(self.tmp, 'other.csv')
        write_metrics_csv(other, [MetricRow('b', 'mixture', sdr_bf=-2.0)])
        self.assertEqual(list(read_metrics_csv([self.path, other])['sample_id']), ['a', 'b'])

    def test_read_errors(self):
        with self.assertRaises(ReportError):
            read_metrics_csv(self.path)
        write_metrics_csv(self.path, [])
        with self.assertRaises(ReportError):
            read_metrics_csv(self.path)
        with open(self.path, 'w') as handle:
            handle.write('sample_id,system\na,rm2\n')
        with self.assertRaises(ReportError):
            read_metrics_csv(self.path)
        open(self.path, 'w').close()
        with self.assertRaises(ReportError):
            read_metrics_csv(self.path)

    def test_format_permutation(self):
        self.assertEqual(format_permutation((0, 1, 2)), '1-2-3')
        self.assertEqual(format_permutation(None), '')


if __name__ == '__main__':
    unittest.main()
