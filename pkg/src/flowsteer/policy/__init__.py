from .config import ModelConfig
from .types import ActionChunk, FlowSample
from .masks import TokenLayout, build_attention_mask
from .fast import fast_detokenize, fast_tokenize
from .text import (
    MAX_TEXT_TOKENS, VOCAB, encode_prompt, encode_text, render_prompt,
    tokenize_text,
)
from .model import (
    BackboneOutput, ObsInput, PolicyModel, load_policy, save_policy,
)
from .training import (
    TrainingExample, make_training_example, rtc_delay_condition, train_step,
)
from .sampler import (
    DEFAULT_BETA, DEFAULT_UNCOND_FIELDS, GUIDANCE_BETAS, sample_chunk,
)

__all__ = [
    "ModelConfig", "ActionChunk", "FlowSample", "TokenLayout",
    "build_attention_mask", "fast_detokenize", "fast_tokenize",
    "MAX_TEXT_TOKENS", "VOCAB", "encode_prompt", "encode_text",
    "render_prompt", "tokenize_text", "BackboneOutput", "ObsInput",
    "PolicyModel", "load_policy", "save_policy", "TrainingExample",
    "make_training_example", "rtc_delay_condition", "train_step",
    "DEFAULT_BETA", "DEFAULT_UNCOND_FIELDS", "GUIDANCE_BETAS", "sample_chunk",
]
