"""
Two-stage training: a PIT separator on the reference channel, then the
virtual microphone estimator under the multi-task loss with the separator
frozen.
"""

import json
import logging
import math
import os
import sys

import numpy as np

# Add parent directory to path to import modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from records.models import EventLog, EventType, Split
from utils import autodiff as ad
from utils.beamformer import augment, compute_masks, mask_bf
from utils.errors import CheckpointError, ConfigError, TrainingError
from utils.losses import MtlConfig, mtl_loss, pit_bf_loss, vm_loss
from utils.optimizer import OptimizerState, apply_gradients
from utils.room_utils import REF_CHANNEL
from utils.signal_utils import StftConfig
from utils.tdcn import TdcnConfig, TdcnModel

from dataset_service import DatasetLoader

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'vme-checkpoint'
CHECKPOINT_VERSION = 1
KINDS = ('separator', 'vme')


# ---------------------------------------------------------------------------
# checkpoints

class Checkpoint:
    """A model, its optimizer state and where training stopped"""

    def __init__(self, kind, model, optimizer, training=None, rng=None):
        if kind not in KINDS:
            raise CheckpointError(f"unknown checkpoint kind '{kind}'")
        self.kind = kind
        self.model = model
        self.optimizer = optimizer
        self.training = dict(training or {})
        self.rng = dict(rng or {})

    def __repr__(self):
        return f'<Checkpoint {self.kind} step={self.optimizer.step}>'

    def header(self):
        return {
            'format': CHECKPOINT_FORMAT,
            'version': CHECKPOINT_VERSION,
            'kind': self.kind,
            'tdcn': self.model.cfg.to_dict(),
            'optimizer': self.optimizer.hyperparameters(),
            'training': self.training,
            'rng': self.rng,
        }

    def save(self, path):
        arrays = {'__header__': np.array(json.dumps(self.header(), sort_keys=True))}
        for name, value in self.model.state_dict().items():
            arrays[f'param/{name}'] = np.asarray(value, dtype=np.float64)
        for name, value in self.optimizer.first_moment.items():
            arrays[f'adam_m/{name}'] = np.asarray(value, dtype=np.float64)
        for name, value in self.optimizer.second_moment.items():
            arrays[f'adam_v/{name}'] = np.asarray(value, dtype=np.float64)
        tmp = f'{path}.tmp.npz'
        np.savez(tmp, **arrays)
        os.replace(tmp, path)
        logger.info(f"Saved {self.kind} checkpoint at step {self.optimizer.step} to {path}")
        return path

    @classmethod
    def load(cls, path, kind=None):
        if not os.path.isfile(path):
            raise CheckpointError(f"checkpoint not found: {path}")
        try:
            with np.load(path, allow_pickle=False) as archive:
                header = json.loads(str(archive['__header__']))
                arrays = {name: archive[name] for name in archive.files if name != '__header__'}
        except (OSError, ValueError, KeyError) as e:
            raise CheckpointError(f"cannot read checkpoint {path}: {str(e)}")
        if header.get('format') != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path} is not a checkpoint (format {header.get('format')!r})")
        if header.get('version') != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path} has checkpoint version {header.get('version')}, "
                                  f"this build reads version {CHECKPOINT_VERSION}")
        if kind is not None and header['kind'] != kind:
            raise CheckpointError(f"{path} holds a {header['kind']} model, expected {kind}")

        cfg = TdcnConfig.from_dict(header['tdcn'])
        model = TdcnModel(cfg)
        model.load_state_dict({name[len('param/'):]: value for name, value in arrays.items()
                               if name.startswith('param/')})
        hyper = header['optimizer']
        optimizer = OptimizerState(
            learning_rate=hyper['learning_rate'], beta1=hyper['beta1'], beta2=hyper['beta2'],
            eps=hyper['eps'], clip_threshold=hyper['clip_threshold'], step=hyper['step'],
            first_moment={name[len('adam_m/'):]: value for name, value in arrays.items()
                          if name.startswith('adam_m/')},
            second_moment={name[len('adam_v/'):]: value for name, value in arrays.items()
                           if name.startswith('adam_v/')},
        )
        return cls(header['kind'], model, optimizer, header.get('training'), header.get('rng'))


# ---------------------------------------------------------------------------
# helpers

def epoch_order(train_seed, epoch, count):
    """Shuffled sample order of one epoch, a function of (seed, epoch) only."""
    rng = np.random.default_rng(np.random.SeedSequence([int(train_seed), int(epoch)]))
    return rng.permutation(count)


def batch_mean(losses):
    """Mean of a list of scalar DiffTensors, summed in list order."""
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    return total * (1.0 / len(losses))


def tdcn_config(model_cfg, kind, num_sources):
    """TdcnConfig for a separator (one input, I heads) or a VME (two inputs, one head)."""
    if kind == 'separator':
        heads, inputs, activation = num_sources, 1, model_cfg['separator_mask_activation']
    else:
        heads, inputs, activation = 1, 2, model_cfg['vme_mask_activation']
    return TdcnConfig(
        basis_size=model_cfg['basis_size'],
        kernel_length=model_cfg['kernel_length'],
        bottleneck=model_cfg['bottleneck'],
        hidden=model_cfg['hidden'],
        conv_kernel=model_cfg['conv_kernel'],
        blocks_per_repeat=model_cfg['blocks_per_repeat'],
        repeats=model_cfg['repeats'],
        output_heads=heads,
        input_channels=inputs,
        mask_activation=activation,
    )


def stft_config(model_cfg):
    return StftConfig(frame_length=model_cfg['stft_frame_length'], hop=model_cfg['stft_hop'],
                      window=model_cfg['stft_window'])


def separator_masks(separator, mixture_ref, stft_cfg, sample_rate):
    """Magnitude-ratio masks [I, frames, K] from a frozen separator run on the reference channel [1, T]."""
    separated = separator(mixture_ref).data
    return compute_masks(mixture_ref, separated, stft_cfg, sample_rate)


def oracle_masks(mixture_ref, x, stft_cfg, sample_rate):
    """Magnitude-ratio masks of the reference images against the observation."""
    return compute_masks(mixture_ref, x, stft_cfg, sample_rate)


# ---------------------------------------------------------------------------
# trainers

class BaseTrainer:
    """Shared epoch loop, dev evaluation, checkpointing and event logging"""

    kind = None

    def __init__(self, run_config, data_dir, out_dir):
        self.run_config = run_config
        self.train_cfg = run_config.train
        self.data_dir = data_dir
        self.out_dir = out_dir
        try:
            os.makedirs(out_dir, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"cannot create output directory {out_dir}: {e.strerror}")
        self.train_set = DatasetLoader(data_dir, Split.TRAIN)
        self.dev_set = DatasetLoader(data_dir, Split.DEV)
        self.stft_cfg = stft_config(run_config.model)
        self.checkpoint_path = os.path.join(out_dir, 'checkpoint.npz')
        self.events = EventLog(os.path.join(out_dir, 'events.jsonl'))
        self.model = TdcnModel(tdcn_config(run_config.model, self.kind, self.train_set.num_sources),
                               seed=self.train_cfg['train_seed'])
        self.optimizer = OptimizerState(learning_rate=self.train_cfg['learning_rate'],
                                        clip_threshold=self.train_cfg['clip_threshold'])
        self.epoch = 0
        self.batch_index = 0

    # subclasses -------------------------------------------------------------

    def batch_loss(self, model, batch):
        """Returns (scalar DiffTensor to optimize, dict of float loss components)."""
        raise NotImplementedError

    def num_epochs(self):
        raise NotImplementedError

    def training_state(self):
        return {'epoch': self.epoch, 'batch': self.batch_index, 'step': self.optimizer.step}

    # loop -------------------------------------------------------------------

    def _batches(self, epoch):
        order = epoch_order(self.train_cfg['train_seed'], epoch, len(self.train_set))
        size = self.train_cfg['batch_size']
        return [order[i:i + size].tolist() for i in range(0, len(order), size)]

    def dev_loss(self):
        """Mean loss components over the dev split, computed with frozen parameters."""
        frozen = self.model.frozen()
        totals, count = {}, 0
        size = self.train_cfg['batch_size']
        for start in range(0, len(self.dev_set), size):
            indices = list(range(start, min(start + size, len(self.dev_set))))
            _, components = self.batch_loss(frozen, self.dev_set.batch(indices))
            for key, value in components.items():
                totals[key] = totals.get(key, 0.0) + value * len(indices)
            count += len(indices)
        return {f'dev_{key}': value / count for key, value in totals.items()}

    def _abort(self, message, **fields):
        self.events.log(EventType.ABORT, kind=self.kind, epoch=self.epoch, step=self.optimizer.step,
                        message=message, **fields)
        logger.error(message)
        raise TrainingError(message)

    def save(self):
        checkpoint = Checkpoint(self.kind, self.model, self.optimizer, self.training_state(),
                                {'train_seed': self.train_cfg['train_seed'],
                                 'epoch': self.epoch, 'batch': self.batch_index})
        checkpoint.save(self.checkpoint_path)
        self.events.log(EventType.CHECKPOINT, kind=self.kind, epoch=self.epoch, step=self.optimizer.step,
                        path=self.checkpoint_path)
        return self.checkpoint_path

    def resume(self, path):
        checkpoint = Checkpoint.load(path, kind=self.kind)
        if checkpoint.model.cfg != self.model.cfg:
            raise CheckpointError(f"{path} was trained with a different network configuration")
        self.model = checkpoint.model
        self.optimizer = checkpoint.optimizer
        self.epoch = int(checkpoint.training.get('epoch', 0))
        self.batch_index = int(checkpoint.training.get('batch', 0))
        self.restore_training_state(checkpoint.training)
        logger.info(f"Resumed {self.kind} training at epoch {self.epoch}, batch {self.batch_index}, "
                    f"step {self.optimizer.step}")

    def restore_training_state(self, training):
        pass

    def train_step(self, batch):
        self.model.zero_grad()
        loss, components = self.batch_loss(self.model, batch)
        if not all(math.isfinite(v) for v in components.values()):
            self._abort(f"non-finite {self.kind} loss at step {self.optimizer.step + 1}: {components}",
                        components=components)
        ad.backward(loss)
        try:
            grad_norm = apply_gradients(self.optimizer, self.model.params)
        except TrainingError as e:
            self._abort(str(e))
        return components, grad_norm

    def train(self, resume=None, max_steps=None):
        """
        Run the remaining epochs.

        Args:
            resume: checkpoint path to continue from
            max_steps: stop (and checkpoint) once the optimizer reaches this step

        Returns:
            dict: summary with the final step, epoch and last dev losses
        """
        if resume:
            self.resume(resume)
        else:
            dev = self.dev_loss()
            self.events.log(EventType.INIT, kind=self.kind, epoch=0, step=0, **dev)
            logger.info(f"Initial {self.kind} dev loss: {dev}")

        dev = {}
        while self.epoch < self.num_epochs():
            batches = self._batches(self.epoch)
            sums, grad_norms = {}, []
            while self.batch_index < len(batches):
                if max_steps is not None and self.optimizer.step >= max_steps:
                    self.save()
                    return self.summary(dev, stopped=True)
                components, grad_norm = self.train_step(self.train_set.batch(batches[self.batch_index]))
                self.batch_index += 1
                grad_norms.append(grad_norm)
                for key, value in components.items():
                    sums.setdefault(key, []).append(value)
            self.epoch += 1
            self.batch_index = 0
            dev = self.dev_loss()
            train = {f'train_{key}': float(np.mean(values)) for key, values in sums.items()}
            self.events.log(EventType.EPOCH, kind=self.kind, epoch=self.epoch, step=self.optimizer.step,
                            grad_norm=float(np.mean(grad_norms)) if grad_norms else 0.0, **train, **dev)
            logger.info(f"{self.kind} epoch {self.epoch}/{self.num_epochs()}: {train} {dev}")
            self.save()
        return self.summary(dev, stopped=False)

    def summary(self, dev, stopped):
        return {'kind': self.kind, 'epoch': self.epoch, 'step': self.optimizer.step,
                'checkpoint': self.checkpoint_path, 'stopped_early': stopped, **dev}


class SeparatorTrainer(BaseTrainer):
    """PIT training of the separator on the reference channel"""

    kind = 'separator'

    def num_epochs(self):
        return self.train_cfg['separator_epochs']

    def batch_loss(self, model, batch):
        mixture = batch['mixture'][:, REF_CHANNEL:REF_CHANNEL + 1]
        estimates = model(mixture)
        loss, _ = pit_bf_loss(batch['x'], estimates, self.train_cfg['snr_epsilon'],
                              self.train_cfg['loss_floor_db'])
        return loss, {'pit': loss.item()}


class VmeTrainer(BaseTrainer):
    """
    Virtual microphone estimator under alpha * L_VM + (1 - alpha) * L_BF.

    The beamformer masks come from the frozen separator (oracle image masks
    when no separator is given). At alpha = 1 or 0 the loss that does not
    enter the objective is still computed, on a detached estimate, so both
    components are logged every epoch.
    """

    kind = 'vme'

    def __init__(self, run_config, data_dir, out_dir, separator_path=None, alpha=None):
        super().__init__(run_config, data_dir, out_dir)
        alpha = self.train_cfg['alpha'] if alpha is None else alpha
        self.mtl = MtlConfig(alpha=float(alpha), snr_epsilon=self.train_cfg['snr_epsilon'],
                             loss_floor_db=self.train_cfg['loss_floor_db'])
        self.separator_path = separator_path
        self.separator = None
        if separator_path:
            self.separator = load_model(separator_path, 'separator')
            if self.separator.cfg.output_heads != self.train_set.num_sources:
                raise CheckpointError(f"separator {separator_path} has {self.separator.cfg.output_heads} heads, "
                                      f"dataset has {self.train_set.num_sources} sources")
        else:
            logger.warning("No separator checkpoint given, training the VME with oracle masks")
        # optimizer steps whose gradient came (partly) from the BF-level loss
        self.bf_gradient_steps = 0
        self._bf_connected = False

    def num_epochs(self):
        return self.train_cfg['vme_epochs']

    def training_state(self):
        state = super().training_state()
        state.update({'alpha': self.mtl.alpha, 'separator': self.separator_path,
                      'bf_gradient_steps': self.bf_gradient_steps})
        return state

    def restore_training_state(self, training):
        if training.get('alpha') is not None and float(training['alpha']) != self.mtl.alpha:
            raise CheckpointError(f"checkpoint was trained with alpha={training['alpha']}, "
                                  f"this run uses alpha={self.mtl.alpha}")
        self.bf_gradient_steps = int(training.get('bf_gradient_steps', 0))

    def masks(self, mixture_ref, x):
        fs = self.train_set.sample_rate
        if self.separator is None:
            return oracle_masks(mixture_ref, x, self.stft_cfg, fs)
        return separator_masks(self.separator, mixture_ref, self.stft_cfg, fs)

    def batch_loss(self, model, batch):
        eps, floor = self.mtl.snr_epsilon, self.mtl.loss_floor_db
        v_hat = model(batch['r'])
        v_hat_vm = v_hat if self.mtl.alpha > 0.0 else v_hat.detach()
        v_hat_bf = v_hat if self.mtl.alpha < 1.0 else v_hat.detach()

        vm_losses, bf_losses = [], []
        for b in range(v_hat.shape[0]):
            vm_losses.append(vm_loss(batch['v'][b], v_hat_vm[b], eps, floor))
            mixture_ref = batch['mixture'][b, REF_CHANNEL:REF_CHANNEL + 1]
            masks = self.masks(mixture_ref, batch['x'][b])
            estimates, _ = mask_bf(augment(batch['r'][b], v_hat_bf[b]), masks, self.stft_cfg, REF_CHANNEL)
            loss, _ = pit_bf_loss(batch['x'][b], estimates, eps, floor)
            bf_losses.append(loss)
        l_vm, l_bf = batch_mean(vm_losses), batch_mean(bf_losses)
        loss = mtl_loss(self.mtl, l_vm, l_bf)
        self._bf_connected = l_bf.requires_grad and loss is not l_vm
        return loss, {'mtl': loss.item(), 'vm': l_vm.item(), 'bf': l_bf.item()}

    def train_step(self, batch):
        self._bf_connected = False
        components, grad_norm = super().train_step(batch)
        if self._bf_connected:
            self.bf_gradient_steps += 1
        return components, grad_norm


def load_model(path, kind):
    """Frozen model from a checkpoint, for inference."""
    return Checkpoint.load(path, kind=kind).model.frozen()
