"""Two-phase training toolkit for image aesthetics scoring.

Phase I aligns a backbone's projected feature to a frozen reference encoder
(a CLIP image tower in production) with a cosine loss over unlabeled data;
phase II fine-tunes a teacher with the binned EMD loss and then trains a
student semi-supervised on mixed labeled/unlabeled batches against ground
truth and frozen-teacher pseudo labels.
"""

from .attention import (AttentionMap, AttentionStats, collect_stats,
                        compare_stats, mean_attention_distance,
                        mean_attention_entropy)
from .data import (BatchPlan, Manifest, MixedBatch, Normalization,
                   PreprocessSpec, SampleRecord, compose_batches,
                   merge_manifests, preprocess)
from .distributions import (DEFAULT_BIN_VALUES, ScoreDistribution, cdf, mos,
                            scalar_to_distribution)
from .losses import (AlignmentConfig, EmdConfig, StudentLossConfig,
                     alignment_loss, cosine_alignment, emd, emd_loss, kd_loss,
                     student_loss, supervised_loss)
from .metrics import (EvalPair, IerConfig, IerReport, MetricsReport,
                      compute_metrics, interval_error_rate, mse, plcc, srcc)
from .models import (EncoderSpec, FeatureCache, PredictionHead, Projector,
                     build_encoder, cache_features, capture_attention, encode,
                     freeze, load_checkpoint, params_digest,
                     predict_distribution, save_checkpoint)
from .synthetic import SyntheticSpec, generate

__version__ = "0.1.0"
