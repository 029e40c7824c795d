"""Budget-aware sparse fine-tuning of small CNNs for cross-domain few-shot learning.

The pipeline meta-trains a backbone with an episodic prototype loss, then for each
target episode scores layers and channels by activation Fisher information, picks a
sparse update plan under memory and compute budgets, and fine-tunes only that plan.
"""

from .arch import ModelSpec, ParamStore, WidthMultiplier, build_backbone, init_params, make_divisible
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .cost import Budget, CostReport, fits, plan_cost
from .data import Dataset, generate_toy_pair, load_dataset, save_dataset
from .engine import backward, forward, instrument, sgd_momentum_step
from .episodes import Episode, make_pseudo_query, sample_episode
from .errors import (ArtifactMismatchError, CheckpointError, ConfigError, ContractError, DivergenceError,
                     NumericError, SamplingError, SparseTuneError, StructuralError)
from .estimators import ProtoEmbedder, SparseFewShotClassifier
from .finetune import evaluate, fine_tune
from .fisher import FisherReport, fisher_pass, single_layer_sweep
from .plan import PlanEntry, UpdatePlan
from .protonet import classify, compute_prototypes, cosine_distance, protonet_loss
from .selection import Ranking, score_layers, select
from .training import MetaSchedule, adapt_episode, lr_schedule, meta_train

__version__ = "0.1.0"
