"""Policy model configuration, loadable from a plain JSON text file."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path


@dataclass
class ModelConfig:
    d_backbone: int = 128
    layers_backbone: int = 4
    heads: int = 4
    d_expert: int = 64
    layers_expert: int = 2
    chunk_len: int = 16       # H
    exec_len: int = 8         # executed prefix per inference
    max_history: int = 6      # frames per view
    history_stride: int = 10  # steps between history frames
    action_dim: int = 3
    fast_bins: int = 32       # per-dimension quantization levels
    denoise_steps: int = 5
    max_delay: int = 4        # RTC training-time delay bound
    view_size: int = 24
    patch: int = 4
    mlp_mult: int = 4

    def __post_init__(self):
        if self.exec_len > self.chunk_len:
            raise ValueError("exec_len must be <= chunk_len")
        if self.max_delay >= self.exec_len:
            raise ValueError("max_delay must be < exec_len")
        if self.view_size % self.patch != 0:
            raise ValueError("patch must divide view_size")

    @property
    def tokens_per_frame(self) -> int:
        side = self.view_size // self.patch
        return side * side

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @staticmethod
    def load(path) -> "ModelConfig":
        return ModelConfig(**json.loads(Path(path).read_text()))
