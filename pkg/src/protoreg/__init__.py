"""Prototype-based interpretable regression with optimal-transport
patch matching, on a self-contained float64 autodiff substrate."""

from .autodiff import DTensor, GradCheckReport, ShapeError, grad_check, zero_grads
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .encoder import EncoderConfig, EncoderParams, encode, init_params
from .inference import InferenceConfig, Prediction, evaluate, predict
from .losses import (ConsistencyConfig, MetricLossConfig, consistency_loss,
                     metric_loss, total_loss, train_weight)
from .model import Model
from .prototypes import (DistanceVector, PrototypeSet, avgpool_distance,
                         distances, init_prototypes, project)
from .synthdata import (Dataset, SampleRecord, SynthConfig, augment, generate,
                        load_manifest, mirror_permutation, mirror_transform)
from .trainer import TrainConfig, kfold_split, run_ablation_table, run_sweep, train
from .transport import (OTConfig, TransportPlan, emd, exact_emd_oracle,
                        pairwise_cost, sinkhorn_log)

__version__ = "0.1.0"
