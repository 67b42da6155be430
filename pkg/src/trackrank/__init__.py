"""Temporal aggregation heads, metric-learning losses and retrieval evaluation
for video person re-identification on precomputed frame features."""

from .aggregators import (HEAD_PRESETS, AttentionConfig, PoolConfig, RnnConfig,
                          attention_aggregate, normalize_scores, temporal_pool)
from .data import SynthConfig, generate_synthetic, load_dataset, write_dataset
from .losses import LabeledBatch, TripletConfig, batch_hard_triplet, softmax_cross_entropy, total_loss
from .retrieval import distance_matrix, evaluate, rerank, video_embedding
from .sampling import PKSampler, SamplerConfig, Tracklet, cut_clips, sample_batch
from .tensor import Tensor, backward
from .trainer import TrainConfig, adam_step, train

__version__ = "0.1.0"
