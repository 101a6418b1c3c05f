"""
Command line interface: dataset generation, separator and VME training,
evaluation, reports and the full alpha sweep.
"""

import json
import logging
import os
import sys

import click

# Add parent directory to path to import modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config.config import Config, RunConfig
from utils.errors import ConfigError, StorageError, VmeError

from dataset_service import DatasetService
from evaluation_service import EvaluationService, report
from training_service import SeparatorTrainer, VmeTrainer

logger = logging.getLogger(__name__)


class VmeGroup(click.Group):
    """Click group that turns toolkit errors into one stderr line and a category exit code"""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except VmeError as e:
            logger.debug(f"Command failed: {e.one_line()}", exc_info=True)
            click.echo(e.one_line(), err=True)
            ctx.exit(e.exit_code)
        except OSError as e:
            error = StorageError(f"{e.strerror or e}: {e.filename}" if e.filename else str(e))
            logger.debug(f"Command failed: {error.one_line()}", exc_info=True)
            click.echo(error.one_line(), err=True)
            ctx.exit(error.exit_code)


def _setup_logging():
    level = getattr(logging, str(Config.LOG_LEVEL).upper(), logging.INFO)
    logging.basicConfig(filename=Config.LOG_FILE, level=level,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')


def _parse_list(text, cast=str):
    return [cast(item.strip()) for item in text.split(',') if item.strip()]


def _run_config(ctx, seed=None, alpha=None, systems=None):
    run = RunConfig.load(ctx.obj['config_path'])
    if seed is not None:
        run.set('data', 'seed', seed)
        run.set('train', 'train_seed', seed)
    if alpha is not None:
        run.set('train', 'alpha', alpha)
    if systems:
        run.set('eval', 'systems', _parse_list(systems))
    return run


def _echo_json(document):
    click.echo(json.dumps(document, indent=2, sort_keys=True, default=str))


@click.group(cls=VmeGroup)
@click.option('--config', 'config_path', type=click.Path(), default=None, help='JSON run config file.')
@click.pass_context
def cli(ctx, config_path):
    """Virtual microphone estimation toolkit."""
    _setup_logging()
    ctx.ensure_object(dict)
    ctx.obj['config_path'] = config_path


@cli.command('gen-data')
@click.option('--seed', type=int, default=None, help='Master seed of the dataset.')
@click.option('--out', 'out_dir', type=click.Path(), required=True, help='Dataset directory.')
@click.option('--split', 'splits', multiple=True, type=click.Choice(['train', 'dev', 'eval']),
              help='Only generate these splits.')
@click.pass_context
def gen_data(ctx, seed, out_dir, splits):
    """Simulate the train/dev/eval mixtures."""
    run = _run_config(ctx, seed=seed)
    manifests = DatasetService(run).generate(out_dir, splits or None)
    _echo_json({'manifests': manifests})


@cli.command('train-sep')
@click.option('--data', 'data_dir', type=click.Path(), required=True, help='Dataset directory.')
@click.option('--out', 'out_dir', type=click.Path(), required=True, help='Run directory.')
@click.option('--seed', type=int, default=None, help='Training seed.')
@click.option('--resume', type=click.Path(), default=None, help='Checkpoint to continue from.')
@click.option('--max-steps', type=int, default=None, help='Stop after this many optimizer steps.')
@click.pass_context
def train_sep(ctx, data_dir, out_dir, seed, resume, max_steps):
    """Train the PIT separator on the reference channel."""
    run = _run_config(ctx, seed=seed)
    _echo_json(SeparatorTrainer(run, data_dir, out_dir).train(resume=resume, max_steps=max_steps))


@cli.command('train-vme')
@click.option('--data', 'data_dir', type=click.Path(), required=True, help='Dataset directory.')
@click.option('--separator', 'separator_path', type=click.Path(), default=None,
              help='Separator checkpoint providing the beamformer masks.')
@click.option('--out', 'out_dir', type=click.Path(), required=True, help='Run directory.')
@click.option('--alpha', type=float, default=None, help='Weight of the VM-level loss.')
@click.option('--seed', type=int, default=None, help='Training seed.')
@click.option('--resume', type=click.Path(), default=None, help='Checkpoint to continue from.')
@click.option('--max-steps', type=int, default=None, help='Stop after this many optimizer steps.')
@click.pass_context
def train_vme(ctx, data_dir, separator_path, out_dir, alpha, seed, resume, max_steps):
    """Train the virtual microphone estimator under the multi-task loss."""
    run = _run_config(ctx, seed=seed, alpha=alpha)
    trainer = VmeTrainer(run, data_dir, out_dir, separator_path=separator_path)
    summary = trainer.train(resume=resume, max_steps=max_steps)
    summary['bf_gradient_steps'] = trainer.bf_gradient_steps
    _echo_json(summary)


@cli.command('evaluate')
@click.option('--data', 'data_dir', type=click.Path(), required=True, help='Dataset directory.')
@click.option('--separator', 'separator_path', type=click.Path(), default=None, help='Separator checkpoint.')
@click.option('--vme', 'vme_paths', type=click.Path(), multiple=True, help='VME checkpoint, one per alpha.')
@click.option('--systems', default=None, help='Comma-separated systems: mixture,rm2,rm3,vm-copy,vm.')
@click.option('--masks', 'mask_source', type=click.Choice(['auto', 'separator', 'oracle']), default=None,
              help='Where the beamformer masks come from.')
@click.option('--out', 'out_dir', type=click.Path(), required=True, help='Results directory.')
@click.option('--dump-weights', 'dump_weights_path', type=click.Path(), default=None,
              help='Write the MVDR weights of the first sample as JSON.')
@click.pass_context
def evaluate(ctx, data_dir, separator_path, vme_paths, systems, mask_source, out_dir, dump_weights_path):
    """Score the systems on the eval split and write metrics.csv and a summary."""
    run = _run_config(ctx, systems=systems)
    service = EvaluationService(run, data_dir, separator_path=separator_path, vme_paths=list(vme_paths),
                                mask_source=mask_source)
    summary = service.evaluate(out_dir, dump_weights_path=dump_weights_path)
    click.echo(summary.to_string(index=False))


@cli.command('report')
@click.argument('csv_paths', nargs=-1, type=click.Path())
@click.option('--out', 'out_dir', type=click.Path(), required=True, help='Report directory.')
@click.pass_context
def report_cmd(ctx, csv_paths, out_dir):
    """Summary table and alpha-sweep plots from metric CSVs."""
    if not csv_paths:
        raise ConfigError("report needs at least one metrics CSV")
    _echo_json(report(list(csv_paths), out_dir))


@cli.command('sweep')
@click.option('--data', 'data_dir', type=click.Path(), required=True, help='Dataset directory.')
@click.option('--out', 'out_dir', type=click.Path(), required=True, help='Sweep directory.')
@click.option('--separator', 'separator_path', type=click.Path(), default=None,
              help='Reuse this separator checkpoint instead of training one.')
@click.option('--alphas', default=None, help='Comma-separated alpha values.')
@click.option('--seed', type=int, default=None, help='Training seed.')
@click.pass_context
def sweep(ctx, data_dir, out_dir, separator_path, alphas, seed):
    """Train one VME per alpha against one separator, then evaluate and report."""
    run = _run_config(ctx, seed=seed)
    if alphas:
        run.set('eval', 'alphas', _parse_list(alphas, float))
    if separator_path is None:
        separator_path = SeparatorTrainer(run, data_dir, os.path.join(out_dir, 'separator')).train()['checkpoint']
    vme_paths = []
    for alpha in run.eval['alphas']:
        trainer = VmeTrainer(run, data_dir, os.path.join(out_dir, f'vme-alpha-{alpha:.2f}'),
                             separator_path=separator_path, alpha=alpha)
        vme_paths.append(trainer.train()['checkpoint'])
    results = os.path.join(out_dir, 'results')
    systems = list(run.eval['systems'])
    EvaluationService(run, data_dir, separator_path=separator_path, vme_paths=vme_paths,
                      systems=systems).evaluate(results)
    _echo_json(report([os.path.join(results, 'metrics.csv')], results))


def main():
    cli(obj={})


if __name__ == '__main__':
    main()
