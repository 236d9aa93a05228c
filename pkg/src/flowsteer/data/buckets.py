"""Quality bucketing and diversity-removal slices of a dataset."""

from __future__ import annotations

from collections import Counter

from flowsteer.tensor.rng import SplitRng

from .episode import Episode


def bucket_by_quality(dataset: list, top_fraction: float) -> list:
    """Top fraction ranked by (quality desc, length asc), id tie-break."""
    if not 0 < top_fraction <= 1.0:
        raise ValueError(f"top_fraction must be in (0,1], got {top_fraction}")
    ranked = sorted(dataset,
                    key=lambda e: (-e.metadata.quality, len(e), e.episode_id))
    k = int(len(ranked) * top_fraction + 0.5)
    return ranked[:k]


def remove_diverse_slice(dataset: list, fraction: float = 0.20,
                         mode: str = "most_diverse",
                         rng: SplitRng | None = None) -> list:
    """Drop a fraction of episodes: rarest task templates first, or at random."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0,1), got {fraction}")
    n_remove = int(len(dataset) * fraction + 0.5)
    if mode == "most_diverse":
        counts = Counter(e.template_id for e in dataset)
        # rarest templates carry the diversity; strip them first
        order = sorted(dataset,
                       key=lambda e: (counts[e.template_id], e.template_id,
                                      e.episode_id))
        removed = {id(e) for e in order[:n_remove]}
        return [e for e in dataset if id(e) not in removed]
    if mode == "random":
        if rng is None:
            raise ValueError("random mode requires an rng")
        idx = rng.choice(len(dataset), size=n_remove, replace=False)
        removed_idx = set(int(i) for i in idx)
        return [e for i, e in enumerate(dataset) if i not in removed_idx]
    raise ValueError(f"unknown mode {mode!r}")
