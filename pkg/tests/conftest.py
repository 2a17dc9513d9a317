import numpy as np
import pytest
import torch

from gstuda.config import ExperimentConfig, TaskConfig
from gstuda.data import ImageGrid
from gstuda.synth import PhantomSpec, ShiftConfig, build_task
from gstuda.trainer import TrainConfig
from gstuda.translator import TranslatorModel

# Keep CPU math stable regardless of the host's core count.
torch.set_num_threads(1)


def grid01(arr) -> ImageGrid:
    return ImageGrid.from_array(np.asarray(arr, dtype=np.float64), 0.0, 1.0)


def tiny_task(seed=0, src_subjects=2, src_slices=3, tgt_slices=4, size=16):
    spec = PhantomSpec(height=size, width=size, n_blobs=2, blob_scale=2.5, seed=seed)
    src_shift = ShiftConfig(tag_period=4.0, tag_contrast=0.5, noise_sigma=0.01, seed=5)
    tgt_shift = ShiftConfig(tag_period=6.0, tag_contrast=0.7, gamma=1.2,
                            brightness_offset=0.02, noise_sigma=0.03, seed=6)
    return build_task(spec, src_shift, tgt_shift, src_subjects, src_slices, 1, tgt_slices)


def tiny_train_config(**over) -> TrainConfig:
    base = dict(batch_size=4, mc_samples=3, rounds=2, iters_per_round=3,
                pretrain_epochs=2, depth=2, base_channels=4, seed=0)
    base.update(over)
    return TrainConfig(**base)


def tiny_experiment_config(**over) -> ExperimentConfig:
    task = TaskConfig(height=16, width=16, n_blobs=2, blob_scale=2.5, phantom_seed=1,
                      n_source_subjects=2, source_slices=3, n_target_subjects=1,
                      target_slices=4)
    base = dict(task=task, train=tiny_train_config(),
                methods=("no_uda", "ac_gst"), seeds=(0,))
    base.update(over)
    return ExperimentConfig(**base)


@pytest.fixture
def tiny_datasets():
    return tiny_task()


@pytest.fixture
def toy_translator():
    return TranslatorModel(depth=2, base_channels=4, dropout_rate=0.2, init_seed=3)
