from .episode import (
    Episode, EpisodeMetadata, InstructionEvent, Observation, Segment, bin_speed,
)
from .serialize import (
    deserialize_episode, load_episode_file, save_episode_file, serialize_episode,
)
from .prompts import (
    SUBGOAL_HORIZON_STEPS, SUBGOAL_VIEWS, DropoutConfig, PromptContext,
    assemble_prompt, sample_subgoal_timestep, select_runtime_metadata,
    subgoal_frames_at,
)
from .buckets import bucket_by_quality, remove_diverse_slice
from .manifest import DatasetStore, episode_filename, is_high_quality

__all__ = [
    "Episode", "EpisodeMetadata", "InstructionEvent", "Observation", "Segment",
    "bin_speed", "deserialize_episode", "load_episode_file",
    "save_episode_file", "serialize_episode", "SUBGOAL_HORIZON_STEPS",
    "SUBGOAL_VIEWS", "DropoutConfig", "PromptContext", "assemble_prompt",
    "sample_subgoal_timestep", "select_runtime_metadata", "subgoal_frames_at",
    "bucket_by_quality", "remove_diverse_slice", "DatasetStore",
    "episode_filename", "is_high_quality",
]
