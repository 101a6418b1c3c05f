"""
Evaluation of the beamforming systems on the eval split and the reports
built from the resulting metric CSVs.
"""

import logging
import math
import os
import sys

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from joblib import Parallel, delayed  # noqa: E402

# Add parent directory to path to import modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config.config import SYSTEMS  # noqa: E402
from records.models import MetricRow, Split, format_permutation, read_metrics_csv, write_metrics_csv  # noqa: E402
from utils.beamformer import AugmentedArray, beamform, dump_weights  # noqa: E402
from utils.errors import CheckpointError, ConfigError, ReportError  # noqa: E402
from utils.metrics import output_sir, sdr_bf, sdr_vm  # noqa: E402
from utils.room_utils import REF_CHANNEL  # noqa: E402
from utils.signal_utils import MultichannelWave  # noqa: E402
from utils.tdcn import TdcnConfig, TdcnModel  # noqa: E402

from dataset_service import DatasetLoader  # noqa: E402
from training_service import Checkpoint, load_model, oracle_masks, separator_masks, stft_config  # noqa: E402

logger = logging.getLogger(__name__)

SYSTEM_LABELS = {
    'mixture': 'Mixture',
    'rm2': 'RM-BF (2ch)',
    'rm3': 'RM-BF (3ch)',
    'vm-copy': 'VM-BF (copy)',
}


def system_label(system, alpha=math.nan):
    """Results-table label of a system; VM-BF rows name the objective their alpha selects."""
    if system != 'vm':
        return SYSTEM_LABELS[system]
    if alpha == 1.0:
        return 'VM-BF (L_VM)'
    if alpha == 0.0:
        return 'VM-BF (L_BF)'
    return 'VM-BF (L_MTL)'


def _model_from_state(state):
    if state is None:
        return None
    cfg_dict, params = state
    model = TdcnModel(TdcnConfig.from_dict(cfg_dict))
    model.load_state_dict(params)
    return model.frozen()


def _model_state(model):
    return (model.cfg.to_dict(), model.state_dict())


def _rows_for(record, scores):
    t60 = record.scene['room']['t60']
    sir = float(np.mean(record.scene['sir_db'])) if record.scene['sir_db'] else math.nan
    rows = []
    for system, alpha, vm_score, (bf_score, perm, out_sir) in scores:
        rows.append(MetricRow(sample_id=record.sample_id, system=system, alpha=alpha,
                              sdr_vm=vm_score, sdr_bf=bf_score, permutation=format_permutation(perm),
                              t60=t60, sir=sir, output_sir=out_sir))
    return rows


def _bf_scores(x, estimates):
    score, perm = sdr_bf(x, estimates)
    return score, perm, output_sir(x, estimates, perm)


def evaluate_sample(sample, systems, vme_states, separator_state, mask_source, stft_cfg_dict):
    """
    Score every requested system on one sample.

    Args:
        sample: dict from DatasetLoader.load
        systems: system names
        vme_states: list of (alpha, (tdcn config dict, params)) for the 'vm' system
        separator_state: (tdcn config dict, params) or None
        mask_source: 'separator' or 'oracle' (resolved, never 'auto')

    Returns:
        list of MetricRow, in system order then alpha order
    """
    record = sample['record']
    fs = record.sample_rate
    stft_cfg = stft_config(stft_cfg_dict)
    mixture, r, v, x = sample['mixture'], sample['r'], sample['v'], sample['x']
    mixture_ref = mixture[REF_CHANNEL:REF_CHANNEL + 1]

    masks = None
    needs_masks = any(system != 'mixture' for system in systems)
    if needs_masks and mask_source == 'oracle':
        masks = oracle_masks(mixture_ref, x, stft_cfg, fs)
    elif needs_masks:
        masks = separator_masks(_model_from_state(separator_state), mixture_ref, stft_cfg, fs)

    def bf(wave):
        estimates, _ = beamform(wave, masks, stft_cfg, REF_CHANNEL)
        return _bf_scores(x, estimates.samples)

    def augmented(middle, virtual):
        return AugmentedArray.from_signals(MultichannelWave(r, fs), MultichannelWave(middle, fs), virtual).wave

    scores = []
    for system in systems:
        if system == 'mixture':
            scores.append((system, math.nan, math.nan, _bf_scores(x, np.repeat(mixture_ref, x.shape[0], axis=0))))
        elif system == 'rm2':
            scores.append((system, math.nan, math.nan, bf(MultichannelWave(r, fs))))
        elif system == 'rm3':
            scores.append((system, math.nan, math.nan, bf(augmented(v, virtual=False))))
        elif system == 'vm-copy':
            copy = r[0:1]
            scores.append((system, math.nan, sdr_vm(v, copy), bf(augmented(copy, virtual=True))))
        elif system == 'vm':
            for alpha, state in vme_states:
                v_hat = _model_from_state(state)(r).data
                scores.append((system, alpha, sdr_vm(v, v_hat), bf(augmented(v_hat, virtual=True))))
    return _rows_for(record, scores)


class EvaluationService:
    """Runs the systems of the results table over the eval split"""

    def __init__(self, run_config, data_dir, separator_path=None, vme_paths=None, systems=None, mask_source=None):
        self.run_config = run_config
        self.eval_cfg = run_config.eval
        self.systems = list(systems or self.eval_cfg['systems'])
        unknown = [s for s in self.systems if s not in SYSTEMS]
        if unknown:
            raise ConfigError(f"unknown systems {unknown}, expected a subset of {list(SYSTEMS)}")
        self.mask_source = mask_source or self.eval_cfg['mask_source']
        if self.mask_source == 'auto':
            self.mask_source = 'separator' if separator_path else 'oracle'
        if self.mask_source == 'separator' and not separator_path:
            needing = [s for s in self.systems if s != 'mixture']
            if needing:
                raise CheckpointError(f"system '{needing[0]}' needs a separator checkpoint for its masks "
                                      f"(or use mask source 'oracle')")
        self.separator = None
        if separator_path and self.mask_source == 'separator':
            self.separator = load_model(separator_path, 'separator')
        self.vmes = []
        if 'vm' in self.systems:
            if not vme_paths:
                raise CheckpointError("system 'vm' needs at least one VME checkpoint")
            for path in vme_paths:
                checkpoint = Checkpoint.load(path, kind='vme')
                alpha = checkpoint.training.get('alpha')
                if alpha is None:
                    raise CheckpointError(f"VME checkpoint {path} does not record its alpha")
                self.vmes.append((float(alpha), checkpoint.model))
            self.vmes.sort(key=lambda item: item[0])
        self.eval_set = DatasetLoader(data_dir, Split.EVAL)

    def evaluate(self, out_dir, dump_weights_path=None):
        """
        Score every eval sample and write metrics.csv and the summary files.

        Returns:
            pandas.DataFrame: the summary table
        """
        os.makedirs(out_dir, exist_ok=True)
        vme_states = [(alpha, _model_state(model)) for alpha, model in self.vmes]
        separator_state = _model_state(self.separator) if self.separator is not None else None
        logger.info(f"Evaluating systems {self.systems} on {len(self.eval_set)} samples "
                    f"(masks: {self.mask_source}, alphas: {[a for a, _ in self.vmes]})")
        per_sample = Parallel(n_jobs=self.eval_cfg['num_eval_workers'])(
            delayed(evaluate_sample)(self.eval_set.load(i), self.systems, vme_states, separator_state,
                                     self.mask_source, self.run_config.model)
            for i in range(len(self.eval_set))
        )
        rows = [row for sample_rows in per_sample for row in sample_rows]
        write_metrics_csv(os.path.join(out_dir, 'metrics.csv'), rows)
        if dump_weights_path:
            self.dump_first_weights(dump_weights_path)
        return write_summary(read_metrics_csv(os.path.join(out_dir, 'metrics.csv')), out_dir)

    def dump_first_weights(self, path):
        """MVDR weights of the first eval sample, for the first VME (or the 3ch RM array without one)."""
        sample = self.eval_set.load(0)
        fs = sample['record'].sample_rate
        stft_cfg = stft_config(self.run_config.model)
        mixture_ref = sample['mixture'][REF_CHANNEL:REF_CHANNEL + 1]
        if self.separator is not None:
            masks = separator_masks(self.separator, mixture_ref, stft_cfg, fs)
        else:
            masks = oracle_masks(mixture_ref, sample['x'], stft_cfg, fs)
        r = MultichannelWave(sample['r'], fs)
        if self.vmes:
            v_hat = self.vmes[0][1].frozen()(sample['r']).data
            array = AugmentedArray.from_signals(r, MultichannelWave(v_hat, fs), virtual=True)
        else:
            array = AugmentedArray.from_signals(r, MultichannelWave(sample['v'], fs), virtual=False)
        _, info = beamform(array.wave, masks, stft_cfg, REF_CHANNEL)
        return dump_weights(info['weights'], path, fs, stft_cfg.frame_length, array.provenance)


# ---------------------------------------------------------------------------
# reports

SUMMARY_COLUMNS = ['system', 'label', 'alpha', 'sdr_vm', 'sdr_bf', 'output_sir', 'count']


def summarize(frame):
    """
    Mean scores per (system, alpha), baselines first, VM-BF rows by alpha.

    Returns:
        pandas.DataFrame with SUMMARY_COLUMNS
    """
    if frame.empty:
        raise ReportError("no metric rows to summarize")
    frame = frame.copy()
    frame['alpha_key'] = frame['alpha'].fillna(-1.0)
    grouped = frame.groupby(['system', 'alpha_key'], sort=False).agg(
        alpha=('alpha', 'first'), sdr_vm=('sdr_vm', 'mean'), sdr_bf=('sdr_bf', 'mean'),
        output_sir=('output_sir', 'mean'), count=('sample_id', 'count')).reset_index()
    order = {system: i for i, system in enumerate(SYSTEMS)}
    grouped['order'] = grouped['system'].map(lambda s: order.get(s, len(order)))
    grouped = grouped.sort_values(['order', 'alpha_key'], kind='mergesort').reset_index(drop=True)
    grouped['label'] = [system_label(s, a) for s, a in zip(grouped['system'], grouped['alpha'])]
    return grouped[SUMMARY_COLUMNS]


def best_alpha(summary):
    """alpha with the highest mean SDR_VM and SDR_BF among the VM-BF rows (None without any)."""
    vm = summary[summary['system'] == 'vm']
    if vm.empty:
        return {'sdr_vm': None, 'sdr_bf': None}
    return {metric: float(vm.loc[vm[metric].idxmax(), 'alpha']) for metric in ('sdr_vm', 'sdr_bf')}


# Margins of the expected ordering between systems, in dB
BEAT_RM2_MARGIN = 1.0
RM3_SLACK = 0.5
VM_ENDPOINT_GAP = 10.0
MTL_VM_TOLERANCE = 2.0


def _score(summary, system, metric, alpha=None):
    rows = summary[summary['system'] == system]
    if alpha is not None:
        rows = rows[np.isclose(rows['alpha'], alpha)]
    values = rows[metric].dropna()
    return float(values.iloc[0]) if len(values) else None


def trend_checks(summary):
    """
    Directional checks between the systems of a sweep.

    Each check is skipped (passed None) when the summary lacks the rows it needs.

    Returns:
        list of dict: name, passed (True, False or None) and the compared values
    """
    vm = summary[summary['system'] == 'vm']
    best_bf = float(vm['sdr_bf'].max()) if vm['sdr_bf'].notna().any() else None
    rm2 = _score(summary, 'rm2', 'sdr_bf')
    rm3 = _score(summary, 'rm3', 'sdr_bf')
    vm_one, vm_zero = _score(summary, 'vm', 'sdr_vm', 1.0), _score(summary, 'vm', 'sdr_vm', 0.0)
    mtl_vm, mtl_bf = _score(summary, 'vm', 'sdr_vm', 0.3), _score(summary, 'vm', 'sdr_bf', 0.3)
    bf_one = _score(summary, 'vm', 'sdr_bf', 1.0)

    def check(name, values, predicate):
        passed = None if any(v is None for v in values) else bool(predicate(*values))
        return {'name': name, 'passed': passed, 'values': values}

    return [
        check(f'VM-BF (best alpha) SDR_BF >= RM-BF (2ch) + {BEAT_RM2_MARGIN:g} dB', (best_bf, rm2),
              lambda vm_bf, rm: vm_bf >= rm + BEAT_RM2_MARGIN),
        check(f'RM-BF (3ch) SDR_BF >= VM-BF (any alpha) - {RM3_SLACK:g} dB', (rm3, best_bf),
              lambda rm, vm_bf: rm >= vm_bf - RM3_SLACK),
        check(f'SDR_VM(alpha=1) - SDR_VM(alpha=0) >= {VM_ENDPOINT_GAP:g} dB', (vm_one, vm_zero),
              lambda one, zero: one - zero >= VM_ENDPOINT_GAP),
        check(f'SDR_VM(alpha=0.3) within {MTL_VM_TOLERANCE:g} dB of SDR_VM(alpha=1)', (mtl_vm, vm_one),
              lambda mtl, one: abs(mtl - one) <= MTL_VM_TOLERANCE),
        check('SDR_BF(alpha=0.3) >= SDR_BF(alpha=1)', (mtl_bf, bf_one), lambda mtl, one: mtl >= one),
    ]


def sweep_points(summary, metric):
    """(alphas, scores) of the VM-BF rows, the curve of an alpha-sweep plot."""
    vm = summary[summary['system'] == 'vm']
    return vm['alpha'].tolist(), vm[metric].tolist()


def _fmt(value, digits=2):
    return '-' if value is None or (isinstance(value, float) and math.isnan(value)) else f'{value:.{digits}f}'


def summary_markdown(summary):
    best = best_alpha(summary)
    lines = [
        '# Evaluation summary',
        '',
        '| System | alpha | SDR_VM [dB] | SDR_BF [dB] | output SIR [dB] | samples |',
        '|---|---|---|---|---|---|',
    ]
    for row in summary.itertuples(index=False):
        lines.append(f'| {row.label} | {_fmt(row.alpha, 1)} | {_fmt(row.sdr_vm)} | {_fmt(row.sdr_bf)} '
                     f'| {_fmt(row.output_sir)} | {row.count} |')
    lines += [
        '',
        f"Best alpha by SDR_VM: {_fmt(best['sdr_vm'], 1)}",
        f"Best alpha by SDR_BF: {_fmt(best['sdr_bf'], 1)}",
        '',
        'Permutations are resolved by the output SIR of each estimate projected '
        'onto each reference separately.',
        '',
        '## Trend checks',
        '',
    ]
    marks = {True: 'pass', False: 'FAIL', None: 'skipped'}
    for item in trend_checks(summary):
        values = ' vs '.join(_fmt(v) for v in item['values'])
        lines.append(f"- [{marks[item['passed']]}] {item['name']}: {values}")
    lines.append('')
    return '\n'.join(lines)


def plot_alpha_sweep(summary, metric, path):
    """SDR vs alpha for the VM-BF rows, baselines drawn as horizontal reference lines."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    alphas, scores = sweep_points(summary, metric)
    if alphas:
        ax.plot(alphas, scores, marker='o', color='tab:blue', label='VM-BF')
    styles = ['--', ':', '-.', (0, (5, 1))]
    baselines = summary[(summary['system'] != 'vm') & summary[metric].notna()]
    for style, row in zip(styles, baselines.itertuples(index=False)):
        ax.axhline(getattr(row, metric), linestyle=style, color='gray', label=row.label)
    ax.set_xlabel('alpha')
    ax.set_ylabel(f"{'SDR_VM' if metric == 'sdr_vm' else 'SDR_BF'} [dB]")
    ax.set_xlim(-0.05, 1.05)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize='small')
    fig.tight_layout()
    fig.savefig(path, format='png', dpi=100, metadata={'Software': None})
    plt.close(fig)
    return path


def write_summary(frame, out_dir):
    summary = summarize(frame)
    summary.to_csv(os.path.join(out_dir, 'summary.csv'), index=False, float_format='%.6f')
    with open(os.path.join(out_dir, 'summary.md'), 'w') as handle:
        handle.write(summary_markdown(summary))
    logger.info(f"Wrote summary of {len(summary)} systems to {out_dir}")
    return summary


def report(csv_paths, out_dir):
    """
    Summary table and the two alpha-sweep plots from one or more metric CSVs.

    Returns:
        dict: paths of the written files
    """
    frame = read_metrics_csv(csv_paths)
    os.makedirs(out_dir, exist_ok=True)
    summary = write_summary(frame, out_dir)
    paths = {
        'summary_csv': os.path.join(out_dir, 'summary.csv'),
        'summary_md': os.path.join(out_dir, 'summary.md'),
        'sdr_vm_plot': plot_alpha_sweep(summary, 'sdr_vm', os.path.join(out_dir, 'sdr_vm_vs_alpha.png')),
        'sdr_bf_plot': plot_alpha_sweep(summary, 'sdr_bf', os.path.join(out_dir, 'sdr_bf_vs_alpha.png')),
    }
    return paths
