"""Token-level weighted training of seq2seq models from span-annotated outputs."""

from .annotations import AnnotatedExample, Dataset, ErrorSpan, Severity, mqm_score
from .losses import dpo_loss, nl_span_loss, twa_error_span_loss, twa_sequence_loss
from .model import ModelConfig, Seq2SeqModel
from .tokenize_align import Vocab, assign_token_weights, build_vocab, encode
from .trainer import TrainConfig, train

__all__ = [
    "AnnotatedExample", "Dataset", "ErrorSpan", "Severity", "mqm_score",
    "dpo_loss", "nl_span_loss", "twa_error_span_loss", "twa_sequence_loss",
    "ModelConfig", "Seq2SeqModel",
    "Vocab", "assign_token_weights", "build_vocab", "encode",
    "TrainConfig", "train",
]
