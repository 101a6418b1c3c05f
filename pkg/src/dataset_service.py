"""
Dataset generation and loading.

Each sample is simulated from its own seed, derived from the master seed,
the split and the sample index, so samples can be produced in any order or
in parallel and still come out identical.
"""

import logging
import os
import sys

import numpy as np
from joblib import Parallel, delayed

# Add parent directory to path to import modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from records.models import SampleRecord, Split, read_manifest, write_manifest
from utils.errors import ConfigError, DatasetError, ShapeError, StorageError
from utils.room_utils import diffuse_noise, sample_scene, synth_speech_like, synthesize
from utils.signal_utils import read_wav, write_wav

logger = logging.getLogger(__name__)

SPLIT_INDEX = {Split.TRAIN: 0, Split.DEV: 1, Split.EVAL: 2}


def sample_seed(master_seed, split, index):
    """32-bit seed of one sample from (master seed, split, index)."""
    split = Split(split)
    sequence = np.random.SeedSequence([int(master_seed), SPLIT_INDEX[split], int(index)])
    return int(sequence.generate_state(1)[0])


def sample_id(split, index):
    return f'{Split(split).value}_{index:05d}'


def simulate_sample(seed, data_cfg):
    """
    Simulate one mixture: scene, speech-like sources, diffuse noise.

    Args:
        seed: per-sample seed
        data_cfg: the ``data`` section of a RunConfig

    Returns:
        MixtureSample
    """
    fs = data_cfg['sample_rate']
    num_sources = data_cfg['num_sources']
    scene = sample_scene(seed, num_sources=num_sources, sample_rate=fs, noise_snr_db=data_cfg['noise_snr_db'])
    children = np.random.SeedSequence(seed).spawn(num_sources + 1)
    sources = [synth_speech_like(int(child.generate_state(1)[0]), data_cfg['duration'], fs)
               for child in children[:num_sources]]
    length = sources[0].length
    noise = diffuse_noise(scene.mic_positions, length, fs, np.random.default_rng(children[-1]))
    return synthesize(scene, sources, noise, max_order=data_cfg['rir_max_order'],
                      interp_taps=data_cfg['rir_interp_taps'])


def _write_sample(root, split, index, seed, data_cfg):
    sample = simulate_sample(seed, data_cfg)
    name = sample_id(split, index)
    files = {'mixture': f'wav/{name}_mixture.wav', 'r': f'wav/{name}_r.wav', 'v': f'wav/{name}_v.wav'}
    for i in range(sample.x.num_channels):
        files[f'x{i + 1}'] = f'wav/{name}_x{i + 1}.wav'

    write_wav(os.path.join(root, files['mixture']), sample.mixture)
    write_wav(os.path.join(root, files['r']), sample.r)
    write_wav(os.path.join(root, files['v']), sample.v)
    for i in range(sample.x.num_channels):
        write_wav(os.path.join(root, files[f'x{i + 1}']), sample.x.select([i]))

    return SampleRecord(sample_id=name, split=Split(split).value, seed=seed, files=files,
                        scene=sample.metadata.to_dict(), num_sources=sample.x.num_channels,
                        length=sample.mixture.length, sample_rate=sample.mixture.sample_rate)


class DatasetService:
    """Generates the train/dev/eval splits of a simulated dataset"""

    def __init__(self, run_config):
        self.run_config = run_config
        self.data_cfg = run_config.data

    def split_sizes(self):
        return {
            Split.TRAIN: self.data_cfg['num_train'],
            Split.DEV: self.data_cfg['num_dev'],
            Split.EVAL: self.data_cfg['num_eval'],
        }

    def generate(self, out_dir, splits=None):
        """
        Write every requested split under ``out_dir/<split>/``.

        Returns:
            dict: split name -> manifest path
        """
        splits = [Split(s) for s in splits] if splits else list(Split)
        manifests = {}
        for split in splits:
            count = self.split_sizes()[split]
            manifests[split.value] = self.generate_split(out_dir, split, count)
        return manifests

    def generate_split(self, out_dir, split, count):
        split = Split(split)
        root = os.path.join(out_dir, split.value)
        try:
            os.makedirs(os.path.join(root, 'wav'), exist_ok=True)
        except OSError as e:
            raise ConfigError(f"cannot create dataset directory {root}: {e.strerror}")
        if not os.access(root, os.W_OK):
            raise ConfigError(f"dataset directory {root} is not writable")

        master = self.data_cfg['seed']
        seeds = [sample_seed(master, split, index) for index in range(count)]
        logger.info(f"Generating {count} {split.value} samples in {root} "
                    f"(seed={master}, workers={self.data_cfg['num_workers']})")
        records = Parallel(n_jobs=self.data_cfg['num_workers'])(
            delayed(_write_sample)(root, split.value, index, seed, self.data_cfg)
            for index, seed in enumerate(seeds)
        )
        manifest = os.path.join(root, 'manifest.jsonl')
        write_manifest(manifest, records)
        return manifest


class DatasetLoader:
    """Reads the samples of one split, one batch at a time"""

    def __init__(self, data_dir, split):
        self.split = Split(split)
        self.root = os.path.join(data_dir, self.split.value)
        self.records = read_manifest(os.path.join(self.root, 'manifest.jsonl'))
        lengths = {record.length for record in self.records}
        if len(lengths) != 1:
            raise DatasetError(f"{self.root}: samples have different lengths {sorted(lengths)}")
        self.length = lengths.pop()
        self.sample_rate = self.records[0].sample_rate
        self.num_sources = self.records[0].num_sources

    def __len__(self):
        return len(self.records)

    def __repr__(self):
        return f'<DatasetLoader {self.root} ({len(self)} samples)>'

    def _read(self, record, role):
        path = record.path(self.root, role)
        if not os.path.isfile(path):
            raise DatasetError(f"missing file {path} for sample {record.sample_id}")
        try:
            wave = read_wav(path)
        except StorageError as e:
            raise DatasetError(f"unreadable file for sample {record.sample_id}: {e}")
        if wave.length != record.length:
            raise DatasetError(f"{path} has {wave.length} samples, manifest says {record.length}")
        return wave.samples

    def load(self, index):
        """
        Returns:
            dict: mixture [C, T], r [2, T], v [1, T], x [I, T] float64 arrays
            plus the manifest record
        """
        record = self.records[index]
        x = np.concatenate([self._read(record, f'x{i + 1}') for i in range(record.num_sources)], axis=0)
        return {
            'record': record,
            'mixture': self._read(record, 'mixture'),
            'r': self._read(record, 'r'),
            'v': self._read(record, 'v'),
            'x': x,
        }

    def batch(self, indices):
        """Stack samples into [B, ...] arrays."""
        samples = [self.load(i) for i in indices]
        if not samples:
            raise ShapeError("empty batch")
        batch = {key: np.stack([s[key] for s in samples]) for key in ('mixture', 'r', 'v', 'x')}
        batch['records'] = [s['record'] for s in samples]
        return batch

