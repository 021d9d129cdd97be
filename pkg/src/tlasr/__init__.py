"""Desk-scale transducer ASR lab: restricted RNNT loss, MinWER fine-tuning,
encoder seeding from multilingual models, synthetic corpora and WER tools."""

__version__ = "0.1.0"

from .lattice import AlignmentBand, LogitLattice, band_from_alignment, brute_force_loss, rnnt_forward, rnnt_grad
from .model import ModelConfig, ModelParams, init_params, load_checkpoint, save_checkpoint
from .decode import Hypothesis, NBestList, beam_search, greedy_decode
from .minwer import minwer_grad, minwer_loss
from .evaluation import align_words, classify_rare, corpus_wer, emit_report, wer_breakdown, werr
from .training import Checkpoint, LrSchedule, TrainConfig, finetune_minwer, lr_at, train_rnnt
from .estimator import TransducerASR

__all__ = [
    "AlignmentBand",
    "LogitLattice",
    "band_from_alignment",
    "brute_force_loss",
    "rnnt_forward",
    "rnnt_grad",
    "ModelConfig",
    "ModelParams",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "Hypothesis",
    "NBestList",
    "beam_search",
    "greedy_decode",
    "minwer_grad",
    "minwer_loss",
    "align_words",
    "classify_rare",
    "corpus_wer",
    "emit_report",
    "wer_breakdown",
    "werr",
    "Checkpoint",
    "LrSchedule",
    "TrainConfig",
    "finetune_minwer",
    "lr_at",
    "train_rnnt",
    "TransducerASR",
]
