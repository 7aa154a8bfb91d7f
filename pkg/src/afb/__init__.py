"""Bounded adaptive feature banks with uncertain-region refinement for
matching-based video object segmentation, plus the synthetic-video pipeline,
metrics, and CLI that exercise them."""

from . import backend
from .feature_bank import AbsorbReport, BankConfig, FeatureBank, FeatureEntry, lfu_index
from .matcher import MatchResult, QueryFeatures, match
from .metrics import aggregate, boundary_f, jaccard
from .numerics import Rng, bilinear_upsample, cosine, softmax
from .pipeline import ExtractorConfig, FrameResult, PipelineConfig, segment_video
from .refinement import RefineConfig, Scorer, refine, train_scorer
from .synthgen import SceneSpec, VideoSequence, generate, load_dataset, save_dataset
from .uncertainty import ScoreMaps, UncertaintyMap, confidence_loss, cross_entropy, normalize, total_loss, uncertainty_map

__version__ = "0.1.0"
