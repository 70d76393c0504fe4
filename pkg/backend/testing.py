"""Seeded toy configs and checkpoints shared by the test modules"""
import numpy as np

from .checkpoint import Checkpoint, Provenance
from .transformer import ModelConfig, init_random

TINY = ModelConfig(n_layers=2, n_heads=2, head_dim=4, d_model=8, d_ff=16, vocab_size=260, max_seq_len=16)
TINY_SMALL = ModelConfig(n_layers=1, n_heads=1, head_dim=4, d_model=4, d_ff=8, vocab_size=260, max_seq_len=16)


def make_checkpoint(config, seed=0, name="model", std=0.02, dtype=np.float32):
    return Checkpoint(config, init_random(config, seed, std=std, dtype=dtype), Provenance(name=name, seed=seed))
