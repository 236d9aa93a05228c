"""Prompt text serialization and the fixed word-level vocabulary.

The conditioning bundle is rendered as one english sentence per field in a
canonical order (task, subtask, speed, quality, mistake, control mode);
absent fields are omitted entirely, never replaced with placeholders.
"""

from __future__ import annotations

import re

from flowsteer.data.prompts import PromptContext

MAX_TEXT_TOKENS = 64

_WORDS = [
    # field names and literal values
    "task", "subtask", "speed", "quality", "mistake", "control", "mode",
    "true", "false", "joint", "ee", "done",
    # template language
    "pick", "up", "the", "block", "blocks", "place", "in", "region",
    "regions", "stack", "on", "top", "of", "put", "sort", "into", "their",
    "move", "lid", "aside", "open", "container", "inside", "and", "to",
    "hold", "each", "matching", "a",
    # colors and sides
    "red", "green", "blue", "yellow", "left", "right", "bottom",
]

_NUMBERS = sorted({w * k for w in (20, 25, 50, 100, 500) for k in range(1, 81)}
                  | set(range(1, 10)))

VOCAB = ["<unk>", "<bos>", ".", ":", ","] + _WORDS + [str(n) for n in _NUMBERS]
TOKEN_TO_ID = {tok: i for i, tok in enumerate(VOCAB)}
UNK_ID = TOKEN_TO_ID["<unk>"]


def render_prompt(ctx: PromptContext) -> str:
    parts = [f"Task: {ctx.task_text}."]
    if ctx.subtask_text is not None:
        parts.append(f"Subtask: {ctx.subtask_text}.")
    if ctx.speed_label is not None:
        parts.append(f"Speed: {ctx.speed_label}.")
    if ctx.quality is not None:
        parts.append(f"Quality: {ctx.quality}.")
    if ctx.mistake is not None:
        parts.append(f"Mistake: {'true' if ctx.mistake else 'false'}.")
    parts.append(f"Control Mode: {ctx.control_mode}.")
    return " ".join(parts)


def tokenize_text(text: str) -> list:
    return re.findall(r"[a-z0-9]+|[^\sa-z0-9]", text.lower())


def encode_text(text: str) -> list:
    ids = [TOKEN_TO_ID.get(tok, UNK_ID) for tok in tokenize_text(text)]
    if len(ids) > MAX_TEXT_TOKENS:
        raise ValueError(f"prompt too long: {len(ids)} tokens")
    return ids


def encode_prompt(ctx: PromptContext) -> list:
    return encode_text(render_prompt(ctx))
