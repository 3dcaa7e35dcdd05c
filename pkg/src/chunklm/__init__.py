"""Chunked attention-free byte-level language model."""
from .config import ModelConfig, TrainConfig, load_config
from .model import ChunkState, ModelParams, forward_chunk, forward_sequence, generate, init_params, new_state, zero_params

__version__ = "0.1.0"
