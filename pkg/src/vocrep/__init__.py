"""Self-supervised representation learning for non-verbal vocal audio."""

from . import audio_io, checkpoint, config, context, encoder, finetune, metrics
from . import model, nn, pretrain, quantizer, rng, tsne

__version__ = "0.1.0"

__all__ = [
    "audio_io", "checkpoint", "config", "context", "encoder", "finetune",
    "metrics", "model", "nn", "pretrain", "quantizer", "rng", "tsne",
    "__version__",
]
