"""Uncertainty-masked generative self-training for image translation."""

from .attention import AttentionModel
from .config import ConfigError, ExperimentConfig, load_config, parse_config_text
from .data import (Dataset, ImageGrid, PairedSample, UnpairedSample, batch_iter,
                   load_dataset, save_dataset)
from .losses import LossBreakdown, NonFiniteLossError, gst_total, source_loss, target_loss
from .masks import (ReliabilityMask, RhoSchedule, attentive_mask, binary_mask,
                    continuous_mask, rho_at)
from .metrics import (MetricsReport, evaluate, l1, paired_ttest_one_tailed, psnr, ssim)
from .synth import (PhantomSpec, ShiftConfig, build_probe_slice, build_task,
                    foreground_mask, make_phantom, render_pair)
from .trainer import (AdaptationState, TrainConfig, TrainingDiverged, adapt,
                      pretrain, step1_generate, step2_retrain)
from .translator import TranslatorModel, TranslatorOutput
from .uncertainty import (DropoutEnsemble, UncertaintyMaps, aleatoric, ensemble_mean,
                          epistemic, mc_ensemble, total)
from .experiment import ExperimentResult, run_cell, run_experiment

__version__ = "0.1.0"
