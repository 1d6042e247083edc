"""beamsight: roof-beam hazard statistics, a small residual classifier, and attribution."""

from .attribution import (AttributionMap, AttributionRequest, beam_alignment_score,
                          completeness_check, integrated_gradients, render_heatmap)
from .beamstats import (BeamMap, CircleStats, GroupSummary, TTestResult, circle_stats,
                        paired_t, parse_beam_map, summary_table, t_cdf, welch_t)
from .dataset import (ImageSample, SplitSpec, augment, load_image, resize, split, tile4)
from .resnet import (Model, ModelConfig, apply_freeze_policy, build_model, classify,
                     load_checkpoint, save_checkpoint)
from .synth import SynthConfig, generate_synthetic, generate_texture_families
from .tensorcore import GradGraph, OP_KINDS, Tensor
from .trainer import ConfusionMatrix, EpochRecord, HParams, evaluate, train, transfer_experiment

__version__ = "0.1.0"
