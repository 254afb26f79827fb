"""Query-by-example keyword search with a separable, reparameterised CNN embedder."""

from .encoder import Encoder, EncoderConfig, EncoderUnderflowError
from .features import FeatureMatrix, SegmentRef, Waveform, compute_fbank, temporal_context_pad
from .head import EmbeddingHead, attention_pool, penalization
from .metrics import EvalConfig, EvalReport, LabelSpan, match
from .model import Model, load_model, save_model
from .search import (
    Detection,
    FastSchemeError,
    QueryEmbeddingSet,
    ScoreMatrix,
    SearchConfig,
    enroll,
    score_basic,
    score_fast,
    search,
)
from .synth import SynthCorpusSpec, synthesize
from .training import TrainConfig, amsoftmax_loss, retrain_embedding, train

__version__ = "0.1.0"

__all__ = [
    "Detection",
    "EmbeddingHead",
    "Encoder",
    "EncoderConfig",
    "EncoderUnderflowError",
    "EvalConfig",
    "EvalReport",
    "FastSchemeError",
    "FeatureMatrix",
    "LabelSpan",
    "Model",
    "QueryEmbeddingSet",
    "ScoreMatrix",
    "SearchConfig",
    "SegmentRef",
    "SynthCorpusSpec",
    "TrainConfig",
    "Waveform",
    "amsoftmax_loss",
    "attention_pool",
    "compute_fbank",
    "enroll",
    "load_model",
    "match",
    "penalization",
    "retrain_embedding",
    "save_model",
    "score_basic",
    "score_fast",
    "search",
    "synthesize",
    "temporal_context_pad",
    "train",
]
