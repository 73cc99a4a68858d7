"""mcil: multimodal class-incremental learning at desk scale."""

import torch

__version__ = "0.1.0"

# Single-threaded math keeps every run bit-reproducible across machines.
torch.set_num_threads(1)
