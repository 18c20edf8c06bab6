"""Point embedder + encoder-decoder Transformer, training and decoding."""

from .network import E2EModel, ModelConfig, load_checkpoint, save_checkpoint
from .decode import Decoded, ModelDecoder, decode_beam, decode_sample
from .train import TrainingDiverged, train, train_from_generator

__all__ = [
    "E2EModel", "ModelConfig", "load_checkpoint", "save_checkpoint",
    "Decoded", "ModelDecoder", "decode_beam", "decode_sample",
    "TrainingDiverged", "train", "train_from_generator",
]
