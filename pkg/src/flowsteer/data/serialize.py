"""Self-describing binary episode container.

Layout (see docs/formats.md): magic, version, length-prefixed UTF-8 header
strings, metadata scalars, counts and shapes, then frames as raw bytes,
proprio and actions as little-endian float64, segments and instruction
events as length-prefixed UTF-8 records. Round trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .episode import Episode, EpisodeMetadata, InstructionEvent, Observation, Segment

MAGIC = b"FSEPIS1\n"
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_CODE_DTYPES = {0: np.dtype("float32"), 1: np.dtype("float64")}


def _w_str(buf: list, s: str) -> None:
    raw = s.encode("utf-8")
    buf.append(struct.pack("<I", len(raw)))
    buf.append(raw)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        out = self.raw[self.pos:self.pos + n]
        if len(out) != n:
            raise ValueError("truncated episode file")
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def s(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def serialize_episode(ep: Episode) -> bytes:
    ep.validate()
    buf: list = [MAGIC, struct.pack("<I", 1)]
    for s in (ep.task_text, ep.embodiment_id, ep.control_mode, ep.source,
              ep.template_id, ep.episode_id):
        _w_str(buf, s)
    buf.append(struct.pack("<d", ep.final_progress))
    m = ep.metadata
    buf.append(struct.pack("<IIBB", m.length_steps, m.speed_label, m.quality,
                           1 if m.mistake else 0))
    n_steps = len(ep.steps)
    obs0 = ep.steps[0][0] if n_steps else Observation({}, np.zeros(0))
    views = sorted(obs0.views)
    frame_dtype = (obs0.views[views[0]].dtype if views else np.dtype("float32"))
    buf.append(struct.pack("<IB", n_steps, len(views)))
    for name in views:
        _w_str(buf, name)
        buf.append(struct.pack("<H", obs0.views[name].shape[0]))
    proprio_dim = obs0.proprio.shape[0] if n_steps else 0
    action_dim = ep.steps[0][1].shape[0] if n_steps else 0
    buf.append(struct.pack("<HHB", proprio_dim, action_dim,
                           _DTYPE_CODES[np.dtype(frame_dtype)]))
    le = np.dtype(frame_dtype).newbyteorder("<")
    for obs, _ in ep.steps:
        for name in views:
            buf.append(np.ascontiguousarray(obs.views[name], dtype=le).tobytes())
    for obs, _ in ep.steps:
        buf.append(np.ascontiguousarray(obs.proprio, dtype="<f8").tobytes())
    for _, action in ep.steps:
        buf.append(np.ascontiguousarray(action, dtype="<f8").tobytes())
    buf.append(struct.pack("<I", len(ep.segments)))
    for seg in ep.segments:
        buf.append(struct.pack("<II", seg.start, seg.end))
        _w_str(buf, seg.subtask_text)
        buf.append(struct.pack("<B", 1 if seg.is_mistake else 0))
    buf.append(struct.pack("<I", len(ep.instruction_events)))
    for ev in ep.instruction_events:
        buf.append(struct.pack("<I", ev.step_index))
        _w_str(buf, ev.subtask_text)
    return b"".join(buf)


def deserialize_episode(raw: bytes) -> Episode:
    r = _Reader(raw)
    if r.take(8) != MAGIC:
        raise ValueError("not a flowsteer episode file")
    version = r.u32()
    if version != 1:
        raise ValueError(f"unsupported episode version {version}")
    task_text, embodiment_id, control_mode, source, template_id, episode_id = \
        (r.s() for _ in range(6))
    final_progress = r.f64()
    length_steps, speed_label = r.u32(), r.u32()
    quality, mistake = r.u8(), bool(r.u8())
    n_steps, n_views = r.u32(), r.u8()
    view_specs = [(r.s(), r.u16()) for _ in range(n_views)]
    proprio_dim, action_dim = r.u16(), r.u16()
    frame_dtype = _CODE_DTYPES[r.u8()]
    le = frame_dtype.newbyteorder("<")
    frames_per_step = []
    for _ in range(n_steps):
        views = {}
        for name, v in view_specs:
            n_bytes = v * v * 3 * frame_dtype.itemsize
            arr = np.frombuffer(r.take(n_bytes), dtype=le).astype(frame_dtype)
            views[name] = arr.reshape(v, v, 3)
        frames_per_step.append(views)
    proprios = [np.frombuffer(r.take(proprio_dim * 8), dtype="<f8").astype("f8")
                for _ in range(n_steps)]
    actions = [np.frombuffer(r.take(action_dim * 8), dtype="<f8").astype("f8")
               for _ in range(n_steps)]
    steps = [(Observation(frames_per_step[i], proprios[i]), actions[i])
             for i in range(n_steps)]
    segments = []
    for _ in range(r.u32()):
        start, end = r.u32(), r.u32()
        text = r.s()
        segments.append(Segment(start, end, text, bool(r.u8())))
    events = [InstructionEvent(r.u32(), r.s()) for _ in range(r.u32())]
    return Episode(
        steps=steps, segments=segments,
        metadata=EpisodeMetadata(length_steps, speed_label, quality, mistake),
        source=source, task_text=task_text, embodiment_id=embodiment_id,
        control_mode=control_mode, template_id=template_id,
        episode_id=episode_id, instruction_events=events,
        final_progress=final_progress,
    )


def save_episode_file(path, ep: Episode) -> None:
    Path(path).write_bytes(serialize_episode(ep))


def load_episode_file(path) -> Episode:
    return deserialize_episode(Path(path).read_bytes())
