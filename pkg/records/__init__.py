"""
Records package for the virtual microphone toolkit.
Contains the dataset manifest, training event and metric row formats.
"""

from .models import (EventLog, EventType, MetricRow, METRIC_COLUMNS, SampleRecord, Split, format_permutation,
                     read_manifest, read_metrics_csv, write_manifest, write_metrics_csv)

__all__ = [
    'EventLog',
    'EventType',
    'MetricRow',
    'METRIC_COLUMNS',
    'SampleRecord',
    'Split',
    'format_permutation',
    'read_manifest',
    'read_metrics_csv',
    'write_manifest',
    'write_metrics_csv'
]
