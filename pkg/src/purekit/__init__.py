"""Stochastic purification of poisoned image datasets.

Generative dynamics (energy-model Langevin chains and truncated-schedule
diffusion round trips) applied as a training-data preprocessing step, with a
synthetic poisoning harness and dynamics diagnostics, all sized to run on a
CPU in minutes.
"""

from .autodiff import (DTYPE, GradCheckReport, Graph, GraphBuilder,
                       finite_diff_check, load_params, save_params)
from .data import DatasetFile, load_dataset, make_textures, save_dataset
from .ddpm import (DdpmTrainConfig, NoisePredictor, NoiseSchedule, ddpm_purify,
                   load_predictor, make_schedule, q_sample, save_predictor,
                   train_ddpm)
from .diagnostics import (EnergyHistogram, LyapunovEstimate, LyapunovReport,
                          crossover_step, energy_histogram, l2_trajectory,
                          lyapunov, lyapunov_sweep)
from .ebm import (EbmTrainConfig, EnergyModel, PersistentBank, QuadraticEnergy,
                  energy_rank, langevin_purify, load_energy_model,
                  save_energy_model, train_ebm)
from .errors import (ConfigError, ContractError, DataError, DivergenceError,
                     PurekitError)
from .pipeline import (PRESETS, PurifyConfig, PurifyModels, classify_purified,
                       purify_dataset, purify_image, stage_stream)
from .threat import (Classifier, ClassifierTrainConfig, PoisonSpec,
                     inject_triggered, inject_triggerless, make_trigger,
                     natural_accuracy, psr_triggered, psr_triggerless,
                     train_classifier)
from .trajectory import TrajectoryLog, TrajectoryTracker

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
