"""Adaptive multi-extractor feature acquisition with distillation for no-reference video quality."""

from .core import (ConfigError, EvalResult, QualityRecord, TrainConfig, VideoClip, normalize_mos, read_config,
                   validate_config, write_config)
from .distill import StudentModel, kd_loss, smooth_l1, student_forward, total_loss
from .extractors import ExtractorPool, FeatureVector, build_toy_bank, extract, extract_all
from .harness import (AblationReport, ViewPlan, evaluate, fig3_analysis, five_crop, gating_stats,
                      multi_view_inference, run_repeated)
from .metrics import UndefinedCorrelation, aggregate_repeats, evaluate_scores, plcc, srcc
from .pipeline import (AdaDQA, Checkpoint, OptimizerState, SamplingPlan, Trainer, center_crop, load_checkpoint,
                       lr_at, optimizer_step, sample_frames, save_checkpoint, train)
from .qam import QAM, aggregate, gate, sparsity_loss, transform
from .synthdata import (DistortionSpec, SynthClipSpec, apply_distortion, distortion_response_curve, generate_clip,
                        make_dataset, synth_mos)

__version__ = "0.1.0"
