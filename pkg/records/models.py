"""
Persistent records of the virtual microphone toolkit: dataset manifests,
training event streams and per-sample evaluation metrics.
"""

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass
from datetime import datetime
from enum import Enum

import pandas as pd

from utils.errors import DatasetError, ReportError

logger = logging.getLogger(__name__)


class Split(Enum):
    TRAIN = 'train'
    DEV = 'dev'
    EVAL = 'eval'


class EventType(Enum):
    INIT = 'init'
    EPOCH = 'epoch'
    CHECKPOINT = 'checkpoint'
    ABORT = 'abort'


@dataclass
class SampleRecord:
    """One line of a dataset manifest"""

    sample_id: str
    split: str
    seed: int
    files: dict
    scene: dict
    num_sources: int
    length: int
    sample_rate: int

    def __repr__(self):
        return f'<SampleRecord {self.sample_id} ({self.split})>'

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(**data)
        except TypeError as e:
            raise DatasetError(f"malformed manifest entry: {str(e)}")

    def path(self, root, role):
        """Absolute path of the WAV file for ``role`` (mixture, r, v, x1, ...)."""
        if role not in self.files:
            raise DatasetError(f"sample {self.sample_id} has no '{role}' file")
        return os.path.join(root, self.files[role])


def write_manifest(path, records):
    """Write records as JSON lines with sorted keys, one per sample in order."""
    with open(path, 'w') as handle:
        for record in records:
            handle.write(json.dumps(record.to_dict(), sort_keys=True) + '\n')
    logger.info(f"Wrote manifest with {len(records)} samples to {path}")
    return path


def read_manifest(path):
    if not os.path.isfile(path):
        raise DatasetError(f"manifest not found: {path}")
    records = []
    with open(path) as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                records.append(SampleRecord.from_dict(json.loads(line)))
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{number}: invalid JSON ({e.msg})")
    if not records:
        raise DatasetError(f"manifest {path} is empty")
    return records


class EventLog:
    """Append-only JSON-lines stream of training events"""

    def __init__(self, path):
        self.path = path
        self.started = time.perf_counter()

    def __repr__(self):
        return f'<EventLog {self.path}>'

    def log(self, event, **fields):
        event = EventType(event)
        record = {
            'event': event.value,
            'timestamp': datetime.utcnow().isoformat(),
            'wall_time': round(time.perf_counter() - self.started, 3),
        }
        record.update(fields)
        with open(self.path, 'a') as handle:
            handle.write(json.dumps(record, sort_keys=True) + '\n')
        return record

    def read(self, event=None):
        if not os.path.isfile(self.path):
            return []
        with open(self.path) as handle:
            records = [json.loads(line) for line in handle if line.strip()]
        if event is not None:
            records = [r for r in records if r['event'] == EventType(event).value]
        return records


METRIC_COLUMNS = ['sample_id', 'system', 'alpha', 'sdr_vm', 'sdr_bf', 'permutation', 't60', 'sir', 'output_sir']


@dataclass
class MetricRow:
    """Scores of one evaluation system on one sample; alpha and sdr_vm are NaN where they do not apply"""

    sample_id: str
    system: str
    alpha: float = math.nan
    sdr_vm: float = math.nan
    sdr_bf: float = math.nan
    permutation: str = ''
    t60: float = math.nan
    sir: float = math.nan
    output_sir: float = math.nan

    def __repr__(self):
        return f'<MetricRow {self.sample_id} {self.system} alpha={self.alpha}>'

    def to_dict(self):
        return {column: getattr(self, column) for column in METRIC_COLUMNS}


def format_permutation(perm):
    """1-based permutation string, e.g. (1, 0, 2) -> '2-1-3'."""
    return '-'.join(str(p + 1) for p in perm) if perm is not None else ''


def write_metrics_csv(path, rows):
    frame = pd.DataFrame([row.to_dict() for row in rows], columns=METRIC_COLUMNS)
    frame.to_csv(path, index=False, float_format='%.6f')
    logger.info(f"Wrote {len(frame)} metric rows to {path}")
    return frame


def read_metrics_csv(paths):
    """Concatenate one or more metric CSVs; empty input is a report error."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    frames = []
    for path in paths:
        if not os.path.isfile(path):
            raise ReportError(f"metrics file not found: {path}")
        try:
            frame = pd.read_csv(path, dtype={'permutation': str})
        except pd.errors.EmptyDataError:
            raise ReportError(f"metrics file {path} is empty")
        missing = set(METRIC_COLUMNS) - set(frame.columns)
        if missing:
            raise ReportError(f"metrics file {path} lacks columns {sorted(missing)}")
        frames.append(frame)
    frame = pd.concat(frames, ignore_index=True)
    if frame.empty:
        raise ReportError("no metric rows to report")
    return frame
