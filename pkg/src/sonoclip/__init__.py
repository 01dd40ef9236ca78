"""Contrastive image-text pretraining and evaluation for fetal ultrasound, at desk scale.

The submodules follow the pipeline order: ``phantom`` (synthetic data),
``preprocess``, ``curation``, ``tokenizer``, ``model``, ``pretrain``,
``zeroshot``, ``probes``, ``metrics``, ``interpret`` and ``cli``.
"""
from .curation import ImageRecord, TemplateBank, build_caption_set, build_shards, confident_flags, pseudo_label
from .growth import QuantileModel, hc_percentile_bounds, load_quantiles
from .metrics import ProbeRun, auroc, cv_harness, dsc, macro_f1, support_set_harness, wilcoxon_signed_rank
from .model import DualEncoder, ModelConfig
from .preprocess import AugmentationPolicy, augment, extract_fan, remove_annotations, standardize
from .pretrain import ContrastivePretrainer, TrainConfig, clip_loss, lr_at, select_checkpoint, train
from .probes import LinearProbe, SegDecoderConfig, SegmentationProbe, sample_clips
from .tokenizer import Vocab, encode, train_bpe
from .zeroshot import GAEstimator, PromptBank, ZeroShotClassifier, estimate_ga

__version__ = "0.1.0"

__all__ = [
    "AugmentationPolicy",
    "ContrastivePretrainer",
    "DualEncoder",
    "GAEstimator",
    "ImageRecord",
    "LinearProbe",
    "ModelConfig",
    "ProbeRun",
    "PromptBank",
    "QuantileModel",
    "SegDecoderConfig",
    "SegmentationProbe",
    "TemplateBank",
    "TrainConfig",
    "Vocab",
    "ZeroShotClassifier",
    "augment",
    "auroc",
    "build_caption_set",
    "build_shards",
    "clip_loss",
    "confident_flags",
    "cv_harness",
    "dsc",
    "encode",
    "estimate_ga",
    "extract_fan",
    "hc_percentile_bounds",
    "load_quantiles",
    "lr_at",
    "macro_f1",
    "pseudo_label",
    "remove_annotations",
    "sample_clips",
    "select_checkpoint",
    "standardize",
    "support_set_harness",
    "train",
    "train_bpe",
    "wilcoxon_signed_rank",
]
