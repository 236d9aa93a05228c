"""Dataset store: one binary file per episode plus a delimited-text manifest."""

from __future__ import annotations

import hashlib
from pathlib import Path

from .episode import Episode
from .serialize import load_episode_file, save_episode_file

MANIFEST_NAME = "manifest.tsv"
COLUMNS = ["path", "episode_id", "template_id", "task_text", "embodiment",
           "control_mode", "source", "quality", "length", "speed_label",
           "mistake", "final_progress", "hq_subtask"]


def episode_filename(episode_id: str) -> str:
    return hashlib.sha1(episode_id.encode()).hexdigest()[:16] + ".fsep"


def is_high_quality(ep: Episode) -> bool:
    # segments usable as world-model subgoal supervision
    return ep.metadata.quality >= 4 and ep.source == "demo" and not ep.metadata.mistake


class DatasetStore:
    """Directory of immutable episode files with a manifest index."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_NAME

    def add(self, ep: Episode) -> str:
        name = episode_filename(ep.episode_id)
        save_episode_file(self.root / name, ep)
        return name

    def write_manifest(self, episodes: list) -> None:
        lines = ["\t".join(COLUMNS)]
        for ep in episodes:
            row = [
                episode_filename(ep.episode_id), ep.episode_id, ep.template_id,
                ep.task_text, ep.embodiment_id, ep.control_mode, ep.source,
                str(ep.metadata.quality), str(ep.metadata.length_steps),
                str(ep.metadata.speed_label),
                "1" if ep.metadata.mistake else "0",
                f"{ep.final_progress:.6f}",
                "1" if is_high_quality(ep) else "0",
            ]
            lines.append("\t".join(row))
        self.manifest_path.write_text("\n".join(lines) + "\n")

    def read_manifest(self) -> list:
        text = self.manifest_path.read_text().strip().split("\n")
        header = text[0].split("\t")
        return [dict(zip(header, line.split("\t"))) for line in text[1:]]

    def load(self, row_or_path) -> Episode:
        path = row_or_path["path"] if isinstance(row_or_path, dict) else row_or_path
        return load_episode_file(self.root / path)

    def load_all(self, rows=None) -> list:
        rows = self.read_manifest() if rows is None else rows
        return [self.load(r) for r in rows]
