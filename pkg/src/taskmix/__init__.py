"""taskmix: a desk-scale lab for unsupervised in-context meta-learning.

Episodes are synthesized from unlabeled image collections (augmented
supports, convex-mixed queries), classified in context by a non-causal
transformer over per-query token sequences, and analysed with structural
similarity, collision-probability, and logistic phase-boundary tools.
"""

from .analysis import (LogisticFit, PhaseBoundaries, centroid_distances,
                       fit_logistic, logistic_derivative, phase_boundaries)
from .augment import AugSpec, apply_augmentation, apply_pipeline, sample_augmentations
from .cluster import kmeans_pseudolabels
from .datasets import Dataset, gen_synthetic_dataset, load_dataset, save_dataset
from .episodes import (Episode, MixConfig, build_episode,
                       build_episode_augment_only, build_test_episode,
                       collision_probability, multi_dataset_sample, sample_lambda)
from .image import mix_patch, mix_pixel
from .model import (ExtractorSpec, InContextClassifier, ModelConfig,
                    assemble_sequence, desk_config, embed_images, encode_labels,
                    forward, init_model, load_checkpoint, paper_scale_config,
                    save_checkpoint)
from .optim import AdamState, LrSchedule, adam_step, lr_at
from .ssim import SsimConfig, mssim_query, ssim
from .tensor import Tape, Tensor, backward
from .train import MetricsLog, TrainConfig, episode_loss, evaluate, relative_accuracy, train

__version__ = "0.1.0"
