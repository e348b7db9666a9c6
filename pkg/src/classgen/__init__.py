"""classgen: turn differentiable classifiers into image generators.

The generator optimizes input pixels through a mask-based stochastic
reconstruction module so the classifier's input gradients become
semantic-aware, with progressive resolution stages and diversity /
distribution losses, plus a desk-scale FID/IS evaluation suite.
"""

from .errors import (ClassgenError, ConfigError, InputShapeError,
                     ModelStoreError, NumericalError)
from .losses import (ClassStatistics, LossWeights, batch_statistics,
                     classification_loss, composite_loss, distance_metric_loss,
                     distribution_loss, estimate_class_statistics,
                     load_stats_dir)
from .masking import (MaskPattern, apply_complement, apply_mask, derive_rng,
                      masked_reconstruct, sample_mask)
from .metrics import (GaussianSummary, diversity_score, frechet_distance,
                      gaussian_summary, inception_score)
from .models import (EnsembleSpec, GeneralizedClassifier, extract_features,
                     input_gradient, make_ensemble, predict_logits,
                     text_to_classifier)
from .sampler import (ImageBatch, RunRecord, SamplerConfig,
                      adversarial_baseline_generate, gradient_blur, init_input,
                      progressive_generate, resume_generate, sampler_step,
                      upsample)

__version__ = "0.1.0"
