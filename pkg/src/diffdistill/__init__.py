"""Desk-scale diffusion-based dataset distillation toolkit."""

from .datastore import (Checkpoint, Dataset, LabeledImageBatch, RecordLayout,
                        import_cifar_style, read_checkpoint, read_dataset,
                        seed_substream, write_checkpoint, write_dataset)
from .denoiser import (Denoiser, DenoiserConfig, attention, count_params,
                       embed, init_params, param_shapes, patchify,
                       predict_noise, skip_merge, transformer_block,
                       unpatchify)
from .distillery import Budget, DistilledDataset, distill, risk_proxy
from .downstream import ConvNetConfig, EvalReport, evaluate, protocol, train_classifier
from .errors import ConfigError, DataError, DiffDistillError, NumericError
from .metrics import (FeatureExtractor, GaussianStats, accumulate,
                      build_feature_extractor, fid_eval, frechet_distance,
                      matrix_sqrt_psd, reference_stats)
from .sampler import SamplerConfig, ancestral_sample, fast_ode_sample, sample_class_batch
from .schedule import (NoiseSchedule, build_schedule, forward_marginal,
                       forward_step, posterior_mean)
from .trainer import (OptimizerState, TrainConfig, adamw_step, diffusion_loss,
                      train, warm_start)

__version__ = "0.1.0"
